def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains full synthetic models (minutes); deselect with -m 'not slow'")
