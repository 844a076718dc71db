"""
File to store the dataset presets: domain pairs, per-domain item thresholds
and the published post-filtering statistics used by the large-data check.
"""

AMAZON_MIN_USER_INTERACTIONS = 5
RATING_THRESHOLD = 3.5

DATASET_PRESETS = {
    'amazon-books-kindle': {
        'source': 'amazon',
        'domains': ['Books', 'Kindle Store'],
        'item_thresholds': {'Books': 200, 'Kindle Store': 30},
        'min_user_interactions': AMAZON_MIN_USER_INTERACTIONS,
        'rating_threshold': RATING_THRESHOLD,
        'expected': {
            'users': 63711,
            'items': {'Books': 29124, 'Kindle Store': 30243},
            'interactions': {'Books': 2041610, 'Kindle Store': 1014985},
        },
    },
    'amazon-books-movies': {
        'source': 'amazon',
        'domains': ['Books', 'Movies'],
        'item_thresholds': {'Books': 200, 'Movies': 20},
        'min_user_interactions': AMAZON_MIN_USER_INTERACTIONS,
        'rating_threshold': RATING_THRESHOLD,
        'expected': {
            'users': 43242,
            'items': {'Books': 29266, 'Movies': 33793},
            'interactions': {'Books': 702081, 'Movies': 671961},
        },
    },
    'amazon-books-clothing': {
        'source': 'amazon',
        'domains': ['Books', 'Clothing'],
        'item_thresholds': {'Books': 200, 'Clothing': 150},
        'min_user_interactions': AMAZON_MIN_USER_INTERACTIONS,
        'rating_threshold': RATING_THRESHOLD,
        'expected': {
            'users': 42965,
            'items': {'Books': 29354, 'Clothing': 24244},
            'interactions': {'Books': 602743, 'Clothing': 390677},
        },
    },
    # Yelp pairs carry no user minimum.
    'yelp-restaurants-hotels': {
        'source': 'yelp',
        'domains': ['Restaurants', 'Hotels'],
        'item_thresholds': {'Restaurants': 100, 'Hotels': 1},
        'min_user_interactions': 0,
        'rating_threshold': RATING_THRESHOLD,
        'expected': {
            'users': 86566,
            'items': {'Restaurants': 7886, 'Hotels': 5089},
            'interactions': {'Restaurants': 599587, 'Hotels': 142516},
        },
    },
    'yelp-restaurants-shopping': {
        'source': 'yelp',
        'domains': ['Restaurants', 'Shopping'],
        'item_thresholds': {'Restaurants': 10, 'Shopping': 1},
        'min_user_interactions': 0,
        'rating_threshold': RATING_THRESHOLD,
        'expected': {
            'users': 138801,
            'items': {'Restaurants': 35361, 'Shopping': 30998},
            'interactions': {'Restaurants': 1260613, 'Shopping': 291897},
        },
    },
    'yelp-food-shopping': {
        'source': 'yelp',
        'domains': ['Food', 'Shopping'],
        'item_thresholds': {'Food': 1, 'Shopping': 1},
        'min_user_interactions': 0,
        'rating_threshold': RATING_THRESHOLD,
        'expected': {
            'users': 110427,
            'items': {'Food': 29929, 'Shopping': 30171},
            'interactions': {'Food': 577291, 'Shopping': 256196},
        },
    },
    'yelp-burgers-pizza': {
        'source': 'yelp',
        'domains': ['Burgers', 'Pizza'],
        'item_thresholds': {'Burgers': 1, 'Pizza': 1},
        'min_user_interactions': 0,
        'rating_threshold': RATING_THRESHOLD,
        'expected': {
            'users': 67088,
            'items': {'Burgers': 5340, 'Pizza': 6364},
            'interactions': {'Burgers': 143799, 'Pizza': 151864},
        },
    },
}

# Relative tolerance for comparing a prepared dataset with `expected`.
EXPECTED_COUNT_TOLERANCE = 0.02
