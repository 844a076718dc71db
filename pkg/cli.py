"""
Command-line surface: prepare, synth, train, eval, pareto and sweep.

Every subcommand is a thin argparse wrapper around a library-callable
`cmd_*` function. Configuration is one JSON document (RunConfig) whose fields
can be overridden with `--set section.field=value`.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence

import pandas as pd
from pydantic import BaseModel, Field, ValidationError

from errors import ConfigError, DatasetError, DimensionError, PoeVaeError
from evaluation import (
    EVAL_MODES,
    EvalConfig,
    EvalReport,
    ParetoPoint,
    eval_concat_baseline,
    eval_cross_domain,
    eval_single_domain,
    get_recommender,
    pareto_front,
    pareto_points,
    read_report_json,
    write_pareto_csv,
    write_report_csv,
    write_report_json,
)
from ingest import (
    DatasetBundle,
    MultiDomainDataset,
    SplitSpec,
    binarize,
    build_multidomain,
    concat_domains,
    dataset_statistics,
    filter_items,
    filter_users,
    load_bundle,
    make_bundle,
    read_amazon_json,
    read_domain_tsv,
    save_bundle,
    select_domains,
)
from model import ModelConfig, PoeModel
from presets import DATASET_PRESETS, EXPECTED_COUNT_TOLERANCE, RATING_THRESHOLD
from synthgen import SynthConfig, generate
from training import (
    TrainConfig,
    TrainResult,
    load_checkpoint,
    read_checkpoint_manifest,
    save_checkpoint,
    train,
    write_gradient_norms,
    write_loss_trace,
)

logger = logging.getLogger(__name__)

READERS = {"tsv": read_domain_tsv, "amazon_json": read_amazon_json}


class PrepareConfig(BaseModel):
    inputs: List[str] = Field(default_factory=list, description="One raw ratings file per domain.")
    domain_names: Optional[List[str]] = Field(None, description="Domain names, in input order.")
    item_thresholds: Optional[List[int]] = Field(None, description="Minimum reviews per item, per domain.")
    rating_threshold: float = Field(RATING_THRESHOLD, description="Ratings at or above this become interactions.")
    min_user_interactions: int = Field(5, ge=0, description="Minimum interactions per user.")
    per_domain_user_filter: bool = Field(False, description="Apply the user minimum per domain.")
    input_format: Literal["tsv", "amazon_json"] = Field("tsv", description="Raw input format.")
    preset: Optional[str] = Field(None, description="Named domain pair from presets.py.")


class RunConfig(BaseModel):
    prepare: PrepareConfig = Field(default_factory=PrepareConfig)
    split: SplitSpec = Field(default_factory=SplitSpec)
    synth: Optional[SynthConfig] = None
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: Optional[TrainConfig] = None
    eval: EvalConfig = Field(default_factory=EvalConfig)


def config_error_from_validation(error: ValidationError) -> ConfigError:
    details = {".".join(str(p) for p in e["loc"]) or "<root>": e["msg"] for e in error.errors()}
    fields = ", ".join(details)
    return ConfigError(f"invalid configuration: {fields}", details=details)


def apply_overrides(document: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Applies `a.b.c=value` overrides; values are parsed as JSON when possible."""
    for override in overrides:
        if "=" not in override:
            raise ConfigError(f"override must read key=value, got {override!r}")
        key, raw = override.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.strip().split(".")
        node = document
        for part in parts[:-1]:
            if node.get(part) is None:
                node[part] = {}
            node = node[part]
            if not isinstance(node, dict):
                raise ConfigError(f"override {key} descends into a non-section value")
        node[parts[-1]] = value
    return document


def load_run_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> RunConfig:
    document: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path) as f:
                document = json.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    document = apply_overrides(document, overrides)
    try:
        return RunConfig.model_validate(document)
    except ValidationError as e:
        raise config_error_from_validation(e) from e


def _write_json(path: Path, payload) -> Path:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def resolve_preset(cfg: PrepareConfig) -> PrepareConfig:
    if cfg.preset is None:
        return cfg
    if cfg.preset not in DATASET_PRESETS:
        raise ConfigError(f"Unsupported preset: {cfg.preset}", details={"presets": sorted(DATASET_PRESETS)})
    preset = DATASET_PRESETS[cfg.preset]
    return cfg.model_copy(update={
        "domain_names": preset["domains"],
        "item_thresholds": [preset["item_thresholds"][name] for name in preset["domains"]],
        "rating_threshold": preset["rating_threshold"],
        "min_user_interactions": preset["min_user_interactions"],
        "input_format": "amazon_json" if preset["source"] == "amazon" else cfg.input_format,
    })


def compare_with_expected(ds: MultiDomainDataset, expected: Dict[str, Any], tolerance: float = EXPECTED_COUNT_TOLERANCE) -> Dict[str, float]:
    """Relative deviation of the prepared counts from published ones."""
    observed = {"users": ds.n_users}
    reference = {"users": expected["users"]}
    for domain in ds.domains:
        observed[f"items.{domain.name}"] = domain.item_count
        observed[f"interactions.{domain.name}"] = int(domain.rows.nnz)
        reference[f"items.{domain.name}"] = expected["items"][domain.name]
        reference[f"interactions.{domain.name}"] = expected["interactions"][domain.name]
    deviations = {key: abs(observed[key] - ref) / ref for key, ref in reference.items()}
    for key, deviation in deviations.items():
        if deviation > tolerance:
            logger.warning(f"{key}: {observed[key]} deviates {deviation:.2%} from the published {reference[key]}")
        else:
            logger.info(f"{key}: {observed[key]} within {deviation:.2%} of the published {reference[key]}")
    return deviations


def cmd_prepare(cfg: PrepareConfig, split: SplitSpec, output_dir) -> DatasetBundle:
    """binarize -> filter_items -> filter_users -> build -> split, then write the dataset directory."""
    cfg = resolve_preset(cfg)
    if not cfg.inputs:
        raise ConfigError("prepare needs at least one input file")
    n_domains = len(cfg.inputs)
    missing = [p for p in cfg.inputs if not Path(p).is_file()]
    if missing:
        raise DatasetError(f"input files not found: {missing}", details={"missing": missing})
    thresholds = cfg.item_thresholds if cfg.item_thresholds is not None else [1] * n_domains
    if len(thresholds) != n_domains:
        raise ConfigError(f"{len(thresholds)} item thresholds for {n_domains} inputs")
    names = cfg.domain_names or [Path(p).stem for p in cfg.inputs]
    if len(names) != n_domains:
        raise ConfigError(f"{len(names)} domain names for {n_domains} inputs")

    reader = READERS[cfg.input_format]
    records = pd.concat([reader(p, d) for d, p in enumerate(cfg.inputs)], ignore_index=True)
    records = binarize(records, cfg.rating_threshold)
    records = filter_items(records, dict(enumerate(thresholds)), n_domains)
    records = filter_users(records, cfg.min_user_interactions, per_domain=cfg.per_domain_user_filter)
    ds = build_multidomain(records, names, n_domains)
    bundle = make_bundle(ds, split, metadata={
        "domain_names": names,
        "item_thresholds": thresholds,
        "rating_threshold": cfg.rating_threshold,
        "min_user_interactions": cfg.min_user_interactions,
    })

    stats = dataset_statistics(ds, dict(zip(names, thresholds)))
    print(stats.to_string(index=False))
    if cfg.preset is not None:
        compare_with_expected(ds, DATASET_PRESETS[cfg.preset]["expected"])
    save_bundle(bundle, output_dir)
    return bundle


def cmd_synth(cfg: SynthConfig, split: SplitSpec, output_dir) -> DatasetBundle:
    bundle = make_bundle(generate(cfg), split, metadata={"synth": cfg.model_dump()})
    save_bundle(bundle, output_dir)
    return bundle


def cmd_train(
    dataset_dir,
    config: RunConfig,
    output_dir,
    domains: Optional[Sequence[int]] = None,
    concat: bool = False,
) -> TrainResult:
    """Trains on the bundle's train part; writes checkpoint/, loss_trace.csv and config.json."""
    if config.train is None:
        raise ConfigError("a train section with an epoch count is required", details={"train.epochs": "required"})
    if domains and concat:
        raise ConfigError("--domains and --concat are mutually exclusive")
    bundle = load_bundle(dataset_dir)
    train_set = bundle.train
    layout = "per_domain"
    domain_ids = list(range(train_set.n_domains))
    if concat:
        train_set = concat_domains(train_set)
        layout = "concat"
    elif domains:
        train_set = select_domains(train_set, list(domains))
        domain_ids = list(domains)
    weights = config.train.loss_config(train_set.n_domains).domain_weights

    model = PoeModel.initialize(train_set.item_counts, config.model, domain_ids=domain_ids, layout=layout)
    result = train(model, train_set, config.train)

    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, output_dir / "checkpoint", step=result.step, domain_weights=weights)
    write_loss_trace(result.trace, output_dir / "loss_trace.csv")
    if config.train.track_gradient_norms:
        write_gradient_norms(result.gradient_norms, output_dir / "gradient_norms.csv")
    _write_json(output_dir / "config.json", config.model_dump(mode="json"))
    return result


def _check_compatible(model: PoeModel, bundle: DatasetBundle):
    counts = bundle.train.item_counts
    if model.layout == "concat":
        return
    for pos, d in enumerate(model.domain_ids):
        if not 0 <= d < len(counts):
            raise DimensionError(f"checkpoint domain {d} does not exist in the dataset", details={"domain": d})
        if model.item_counts[pos] != counts[d]:
            raise DimensionError(
                f"domain {d} ({bundle.domain_names[d]}): checkpoint has {model.item_counts[pos]} items, "
                f"dataset has {counts[d]}",
                details={"domain": d},
            )


def cmd_eval(
    checkpoint_dir,
    dataset_dir,
    output_dir,
    mode: str,
    source: Optional[int] = None,
    target: Optional[int] = None,
    eval_cfg: Optional[EvalConfig] = None,
    label: Optional[str] = None,
) -> EvalReport:
    """Runs one protocol and writes report.json and report.csv."""
    eval_cfg = eval_cfg or EvalConfig()
    if mode not in EVAL_MODES:
        raise ConfigError(f"Unsupported evaluation mode: {mode}", details={"modes": list(EVAL_MODES)})
    if mode == "cross" and source is None:
        raise ConfigError("cross-domain evaluation needs a source domain")
    bundle = load_bundle(dataset_dir)
    n_domains = bundle.train.n_domains
    for d in (source, target):
        if d is not None and not 0 <= d < n_domains:
            raise ConfigError(f"domain {d} outside [0, {n_domains})", details={"domain": d})

    model, domain_weights = None, None
    covered = list(range(n_domains))
    if mode != "baseline-popularity":
        if checkpoint_dir is None:
            raise ConfigError(f"mode {mode} needs a checkpoint")
        model = load_checkpoint(checkpoint_dir)
        domain_weights = read_checkpoint_manifest(checkpoint_dir).get("domain_weights")
        _check_compatible(model, bundle)
        if model.layout == "per_domain":
            covered = model.domain_ids
    recommender = get_recommender(
        mode, model=model, train_set=bundle.train, item_counts=bundle.train.item_counts,
        include_prior=eval_cfg.include_prior, normalize=eval_cfg.normalize_input,
    )

    if target is not None:
        targets = [target]
    elif source is not None:
        targets = [d for d in covered if d != source]
    else:
        targets = covered
    metrics = []
    for t in targets:
        if source is not None:
            metrics.append(eval_cross_domain(
                recommender, bundle.test_input, bundle.test_heldout, source, t, eval_cfg.ks,
                target_ground_truth=eval_cfg.target_ground_truth, source_fraction=eval_cfg.source_fraction,
                batch_size=eval_cfg.batch_size,
            ))
        elif mode == "baseline-concat":
            metrics.append(eval_concat_baseline(
                recommender, bundle.test_input, bundle.test_heldout, t, eval_cfg.ks, eval_cfg.batch_size
            ))
        else:
            metrics.append(eval_single_domain(
                recommender, bundle.test_input, bundle.test_heldout, t, eval_cfg.ks, eval_cfg.batch_size
            ))

    report = EvalReport.from_user_metrics(
        mode, metrics, bundle.domain_names, source=source, label=label,
        metadata={
            "domain_weights": domain_weights,
            "target_ground_truth": eval_cfg.target_ground_truth,
            "source_fraction": eval_cfg.source_fraction,
        },
    )
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    write_report_json(report, output_dir / "report.json")
    write_report_csv(report, output_dir / "report.csv")
    return report


def cmd_pareto(report_paths: Sequence, output_path, metric: str = "ndcg", k: int = 50) -> List[ParetoPoint]:
    reports = [read_report_json(p) for p in report_paths]
    points = pareto_points(reports, metric, k)
    write_pareto_csv(points, output_path)
    logger.info(f"{len(pareto_front(points))} of {len(points)} runs on the Pareto front")
    return points


def cmd_sweep(
    dataset_dir,
    config: RunConfig,
    output_dir,
    weight_grid: Sequence[Sequence[float]],
    metric: str = "ndcg",
    k: int = 50,
) -> List[ParetoPoint]:
    """One model per lambda setting, each evaluated single-domain, then the Pareto CSV."""
    if config.train is None:
        raise ConfigError("a train section with an epoch count is required", details={"train.epochs": "required"})
    if not weight_grid:
        raise ConfigError("the weight grid is empty")
    if k not in config.eval.ks:
        raise ConfigError(f"K={k} is not among the evaluated cutoffs {config.eval.ks}")
    n_domains = load_bundle(dataset_dir).train.n_domains
    for weights in weight_grid:
        config.train.model_copy(update={"domain_weights": list(weights)}).loss_config(n_domains)
    output_dir = Path(output_dir)
    report_paths = []
    for i, weights in enumerate(weight_grid):
        run_config = config.model_copy(update={"train": config.train.model_copy(update={"domain_weights": list(weights)})})
        run_dir = output_dir / f"run-{i}"
        logger.info(f"Sweep run {i + 1}/{len(weight_grid)}: lambda={list(weights)}")
        cmd_train(dataset_dir, run_config, run_dir)
        cmd_eval(run_dir / "checkpoint", dataset_dir, run_dir, "single",
                 eval_cfg=config.eval, label=json.dumps(list(weights)))
        report_paths.append(run_dir / "report.json")
    return cmd_pareto(report_paths, output_dir / "pareto.csv", metric, k)


def _flag_overrides(args: argparse.Namespace, mapping: Dict[str, str]) -> List[str]:
    overrides = []
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None and value is not False:
            overrides.append(f"{key}={json.dumps(value)}")
    return overrides


def _config_from_args(args: argparse.Namespace, mapping: Dict[str, str]) -> RunConfig:
    return load_run_config(args.config, [*_flag_overrides(args, mapping), *(args.set or [])])


def _parse_weights(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"weights must read like 1,0.5 (got {text!r})") from e


def _run_prepare(args):
    config = _config_from_args(args, {
        "inputs": "prepare.inputs",
        "names": "prepare.domain_names",
        "item_thresholds": "prepare.item_thresholds",
        "rating_threshold": "prepare.rating_threshold",
        "min_user_interactions": "prepare.min_user_interactions",
        "per_domain_user_filter": "prepare.per_domain_user_filter",
        "input_format": "prepare.input_format",
        "preset": "prepare.preset",
        "seed": "split.seed",
    })
    cmd_prepare(config.prepare, config.split, args.output)


def _run_synth(args):
    config = _config_from_args(args, {"seed": "synth.seed"})
    if config.synth is None:
        raise ConfigError("a synth section is required", details={"synth": "required"})
    cmd_synth(config.synth, config.split, args.output)


def _run_train(args):
    config = _config_from_args(args, {"epochs": "train.epochs", "seed": "train.seed"})
    cmd_train(args.dataset, config, args.output, domains=args.domains, concat=args.concat)


def _run_eval(args):
    config = _config_from_args(args, {
        "k": "eval.ks",
        "target_ground_truth": "eval.target_ground_truth",
        "source_fraction": "eval.source_fraction",
    })
    cmd_eval(args.checkpoint, args.dataset, args.output, args.mode, source=args.source,
             target=args.target, eval_cfg=config.eval, label=args.label)


def _run_pareto(args):
    cmd_pareto(args.reports, args.output, args.metric, args.k)


def _run_sweep(args):
    config = _config_from_args(args, {"epochs": "train.epochs"})
    cmd_sweep(args.dataset, config, args.output, args.weights, args.metric, args.k)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poe-vae", description="Product-of-experts VAE for multi-domain recommendation")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", default=None, help="RunConfig JSON file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override a config field, e.g. train.epochs=5")
        return p

    p = with_config(sub.add_parser("prepare", help="Raw ratings to a dataset directory"))
    p.add_argument("--inputs", nargs="+", help="One ratings file per domain")
    p.add_argument("--names", nargs="+", help="Domain names")
    p.add_argument("--item-thresholds", dest="item_thresholds", nargs="+", type=int)
    p.add_argument("--rating-threshold", dest="rating_threshold", type=float)
    p.add_argument("--min-user-interactions", dest="min_user_interactions", type=int)
    p.add_argument("--per-domain-user-filter", dest="per_domain_user_filter", action="store_true")
    p.add_argument("--format", dest="input_format", choices=sorted(READERS))
    p.add_argument("--preset", choices=sorted(DATASET_PRESETS))
    p.add_argument("--seed", type=int)
    p.add_argument("--output", required=True)
    p.set_defaults(handler=_run_prepare)

    p = with_config(sub.add_parser("synth", help="Write a synthetic dataset directory"))
    p.add_argument("--seed", type=int)
    p.add_argument("--output", required=True)
    p.set_defaults(handler=_run_synth)

    p = with_config(sub.add_parser("train", help="Train a model on a dataset directory"))
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--domains", nargs="+", type=int, help="Train on a subset of domains")
    p.add_argument("--concat", action="store_true", help="Train the concatenated-domain baseline")
    p.add_argument("--output", required=True)
    p.set_defaults(handler=_run_train)

    p = with_config(sub.add_parser("eval", help="Evaluate a checkpoint or a baseline"))
    p.add_argument("--checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", required=True, choices=EVAL_MODES)
    p.add_argument("--source", type=int)
    p.add_argument("--target", type=int)
    p.add_argument("--k", nargs="+", type=int)
    p.add_argument("--target-ground-truth", dest="target_ground_truth", choices=["held_out", "full"])
    p.add_argument("--source-fraction", dest="source_fraction", choices=["full", "input"])
    p.add_argument("--label")
    p.add_argument("--output", required=True)
    p.set_defaults(handler=_run_eval)

    p = sub.add_parser("pareto", help="Pareto front over evaluation reports")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--metric", choices=["recall", "ndcg"], default="ndcg")
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--output", required=True)
    p.set_defaults(handler=_run_pareto)

    p = with_config(sub.add_parser("sweep", help="Train and evaluate a grid of domain weights"))
    p.add_argument("--dataset", required=True)
    p.add_argument("--weights", nargs="+", type=_parse_weights, required=True, help="Settings such as 1,1 2,1 1,2")
    p.add_argument("--epochs", type=int)
    p.add_argument("--metric", choices=["recall", "ndcg"], default="ndcg")
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--output", required=True)
    p.set_defaults(handler=_run_sweep)
    return parser


def _report_error(payload: Dict[str, Any]):
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    )
    try:
        args.handler(args)
    except ValidationError as e:
        error = config_error_from_validation(e)
        logger.error(f"{args.command} failed: {error.message}")
        _report_error(error.to_dict())
        return 2
    except PoeVaeError as e:
        logger.error(f"{args.command} failed: {e.message}", exc_info=True)
        _report_error(e.to_dict())
        return 2
    except Exception as e:
        logger.error(f"Unexpected error in {args.command}: {e}", exc_info=True)
        _report_error({"error": "internal_error", "message": str(e), "details": {}})
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
