"""Command-line entry point: ``relex {gen-data,train,evaluate,report}``.

A run is described by one declarative YAML or JSON file (``--config``);
flags override individual fields. Exit codes: 0 success (including
partial cell failures), 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from . import dataset as dsmod
from .evaluation import (
    TESTS,
    EvaluationReport,
    SuiteConfig,
    fit_repetition,
    run_suite,
    split_repetition,
    write_analysis_csvs,
)
from .metrics import NumericsConfig, parse_metrics
from .model import NumericalError, TrainConfig, accuracy, load_model, save_model

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO,
              "debug": logging.DEBUG}
TOP_MARKED = 5

log = logging.getLogger("relex")


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config


@dataclass
class DatasetBlock:
    csv: str | None = None
    has_subclass: bool = False
    blobs: dict | None = None
    blob_seed: int = 0
    superclass: bool = False
    superclass_seed: int = 0
    split_fraction: float = 0.5
    standardize: bool = True


@dataclass
class ModelBlock:
    hidden_layers: tuple = ()
    activation: str = "relu"
    l2_penalty: float = 0.0


@dataclass
class SuiteBlock:
    metrics: tuple = ("gc", "gd", "dot@x")
    tests: tuple = ("randomization", "identical_class", "identical_subclass")
    repetitions: int = 10
    test_sample_size: int = 500
    k: int = 10
    master_seed: int = 0


@dataclass
class OutputBlock:
    report: str = "report.json"
    model: str = "model.json"
    analysis_dir: str = "analysis"


@dataclass
class RunConfig:
    dataset: DatasetBlock = field(default_factory=DatasetBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    train: TrainConfig = field(default_factory=TrainConfig)
    suite: SuiteBlock = field(default_factory=SuiteBlock)
    numerics: NumericsConfig = field(default_factory=NumericsConfig)
    output: OutputBlock = field(default_factory=OutputBlock)


_BLOCKS = {f.name: f.default_factory for f in fields(RunConfig)}


def _build(kind, data, where):
    if data is None:
        return kind()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name for f in fields(kind)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return kind(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(doc, base_dir: Path | None = None) -> RunConfig:
    """Validate a parsed config mapping into a :class:`RunConfig`."""
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be a mapping")
    unknown = sorted(set(doc) - set(_BLOCKS))
    if unknown:
        raise ConfigError(f"config: unknown sections {unknown}")
    cfg = RunConfig(**{name: _build(type(make()), doc.get(name), name)
                       for name, make in _BLOCKS.items()})
    ds = cfg.dataset
    if (ds.csv is None) == (ds.blobs is None):
        raise ConfigError("dataset: give exactly one of 'csv' or 'blobs'")
    if ds.csv is not None:
        path = Path(ds.csv)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        if not path.is_file():
            raise ConfigError(f"dataset.csv: no such file: {path}")
        cfg.dataset = replace(ds, csv=str(path))
    else:
        _build(dsmod.BlobConfig, ds.blobs, "dataset.blobs")
    try:
        parse_metrics(list(cfg.suite.metrics))
    except ValueError as exc:
        raise ConfigError(f"suite.metrics: {exc}") from None
    bad = sorted(set(cfg.suite.tests) - set(TESTS))
    if bad:
        raise ConfigError(f"suite.tests: unknown tests {bad}")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from None
    return parse_config(doc, path.parent)


def load_dataset(cfg: RunConfig) -> dsmod.Dataset:
    d = cfg.dataset
    if d.csv is not None:
        ds = dsmod.load_csv(d.csv, d.has_subclass)
    else:
        ds = dsmod.generate_blobs(dsmod.BlobConfig(**d.blobs), d.blob_seed)
    if d.superclass and not ds.has_subclass:
        ds = dsmod.make_superclass_dataset(ds, d.superclass_seed)
    return ds


def suite_config(cfg: RunConfig, threads: int = 1) -> SuiteConfig:
    try:
        return _suite_config(cfg, threads)
    except ValueError as exc:
        raise ConfigError(f"suite: {exc}") from None


def _suite_config(cfg: RunConfig, threads: int) -> SuiteConfig:
    s, m = cfg.suite, cfg.model
    return SuiteConfig(
        metrics=tuple(parse_metrics(list(s.metrics))),
        tests=tuple(s.tests),
        repetitions=s.repetitions,
        test_sample_size=s.test_sample_size,
        train_fraction=cfg.dataset.split_fraction,
        k=s.k,
        master_seed=s.master_seed,
        standardize=cfg.dataset.standardize,
        hidden_layers=tuple(m.hidden_layers),
        activation=m.activation,
        l2_penalty=m.l2_penalty,
        train=cfg.train,
        numerics=cfg.numerics,
        threads=threads,
    )


# --------------------------------------------------------------- rendering


def _fmt_cell(c: dict) -> str:
    if "error" in c:
        return f"error: {c['error']}"
    return f"{c['mean']:.3f} ± {c['std']:.3f}"


def render_report(report: EvaluationReport) -> str:
    """Per test, metrics sorted by descending mean (ties by token); the
    top cells are marked with ``*`` and failed cells follow the ranking."""
    lines = []
    tests = list(dict.fromkeys(c["test"] for c in report.cells))
    width = max([len(c["metric"]) for c in report.cells] + [6])
    for t in tests:
        cells = [c for c in report.cells if c["test"] == t]
        ok = sorted((c for c in cells if "error" not in c), key=lambda c: (-c["mean"], c["metric"]))
        bad = sorted((c for c in cells if "error" in c), key=lambda c: c["metric"])
        lines.append(f"== {t}")
        for rank, c in enumerate(ok):
            mark = "*" if rank < TOP_MARKED else " "
            extra = f"  (degenerate: {c['degenerate_count']})" if c.get("degenerate_count") else ""
            lines.append(f"{mark} {c['metric']:<{width}}  {_fmt_cell(c)}{extra}")
        for c in bad:
            lines.append(f"  {c['metric']:<{width}}  {_fmt_cell(c)}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------- subcommands


def _out_dir(args) -> Path:
    d = Path(args.output or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else None
    if cfg is None:
        raise ConfigError("--config is required for this command")
    if args.seed is not None:
        cfg.suite = replace(cfg.suite, master_seed=args.seed)
    return cfg


def cmd_gen_data(args) -> int:
    cfg = dsmod.BlobConfig(args.classes, args.subclusters, args.dim, args.per_class,
                           args.spread, args.sigma)
    ds = dsmod.generate_blobs(cfg, args.seed if args.seed is not None else 0)
    if args.superclass:
        ds = dsmod.make_superclass_dataset(ds, args.superclass_seed)
    path = _out_dir(args) / args.name
    dsmod.write_csv(ds, path)
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    ds = load_dataset(cfg)
    scfg = replace(suite_config(cfg), tests=("identical_class",))
    tr, te, model, final_loss = fit_repetition(ds, scfg, 0)
    path = _out_dir(args) / cfg.output.model
    meta = {
        "master_seed": scfg.master_seed,
        "repetition": 0,
        "train_fraction": scfg.train_fraction,
        "standardize": scfg.standardize,
        "dataset_digest": ds.digest(),
    }
    save_model(model, path, meta)
    print(f"final_train_loss={final_loss:.6g} train_accuracy={accuracy(model, tr):.4f} "
          f"test_accuracy={accuracy(model, te):.4f}")
    print(path)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    if args.metrics:
        cfg.suite = replace(cfg.suite, metrics=tuple(m for m in args.metrics.split(",") if m))
    if args.tests:
        cfg.suite = replace(cfg.suite, tests=tuple(t for t in args.tests.split(",") if t))
    if args.repetitions is not None:
        cfg.suite = replace(cfg.suite, repetitions=args.repetitions)
    cfg = parse_config(_as_doc(cfg))
    ds = load_dataset(cfg)
    scfg = suite_config(cfg, args.threads)

    hook = None
    if args.model:
        try:
            model, meta = load_model(args.model)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"{args.model}: {exc}") from None
        if meta.get("dataset_digest") not in (None, ds.digest()):
            raise ConfigError(f"{args.model}: trained on a different dataset")
        scfg = replace(scfg, repetitions=1,
                       master_seed=meta.get("master_seed", scfg.master_seed),
                       train_fraction=meta.get("train_fraction", scfg.train_fraction),
                       standardize=meta.get("standardize", scfg.standardize))
        probe = split_repetition(ds, scfg, 0)[0]
        if probe.dim != model.spec.input_dim or probe.class_count != model.spec.class_count:
            raise ConfigError(f"{args.model}: model shape does not match the dataset")
        hook = lambda rep, tr, te: model  # noqa: E731

    report = run_suite(scfg, ds, model_hook=hook)
    out = _out_dir(args)
    path = out / cfg.output.report
    report.save(path)
    sys.stdout.write(render_report(report))
    print(path)
    for p in write_analysis_csvs(report, out / cfg.output.analysis_dir):
        print(p)
    if report.cells and all("error" in c for c in report.cells):
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        report = EvaluationReport.load(args.report)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"{args.report}: {exc}") from None
    sys.stdout.write(render_report(report))
    return EXIT_OK


def _as_doc(cfg: RunConfig) -> dict:
    doc = {name: asdict(getattr(cfg, name)) for name in _BLOCKS}
    return json.loads(json.dumps(doc))


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="YAML or JSON run config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed override")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads (0 = auto)")
    common.add_argument("--output", default=argparse.SUPPRESS, help="output directory")

    p = argparse.ArgumentParser(prog="relex", parents=[common],
                                description="Relevance metrics for similarity-based explanation.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic blob dataset")
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--subclusters", type=int, default=1)
    g.add_argument("--dim", type=int, default=2)
    g.add_argument("--per-class", type=int, default=100)
    g.add_argument("--spread", type=float, default=10.0)
    g.add_argument("--sigma", type=float, default=1.0)
    g.add_argument("--superclass", action="store_true", help="fold classes into two superclasses")
    g.add_argument("--superclass-seed", type=int, default=0)
    g.add_argument("--name", default="data.csv", help="file name inside the output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train one model and save it")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", parents=[common], help="run the evaluation suite")
    e.add_argument("--metrics", help="comma-separated metric tokens")
    e.add_argument("--tests", help="comma-separated test names")
    e.add_argument("--repetitions", type=int)
    e.add_argument("--model", help="evaluate a saved model (one repetition)")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", parents=[common], help="render a saved report")
    r.add_argument("report", help="report JSON file")
    r.set_defaults(func=cmd_report)
    return p


def _setup_logging():
    name = os.environ.get("RELEX_LOG", "warning").strip().lower()
    logging.basicConfig(level=LOG_LEVELS.get(name, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("threads", 1), ("output", None)):
        if not hasattr(args, name):
            setattr(args, name, default)
    if args.threads == 0:
        args.threads = os.cpu_count() or 1
    try:
        return args.func(args)
    except (ConfigError, dsmod.DatasetError) as exc:
        print(f"relex: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError, ArithmeticError) as exc:
        print(f"relex: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
