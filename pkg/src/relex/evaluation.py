"""Minimal-requirement tests for relevance metrics and the repetition protocol.

Test functions take a *cache* (anything with ``.scores(X, y)`` returning
``(scores, degenerate)``, normally a :class:`~relex.metrics.MetricCache`)
and a batch of test instances as a :class:`~relex.dataset.Dataset`. Test
labels used for scoring are always the model's predictions.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import dataset as dsmod
from .dataset import Dataset
from .metrics import MetricCache, MetricId, NumericsConfig, parse_metric, precompute, top_k_indices
from .model import (
    Model,
    ModelSpec,
    TrainConfig,
    accuracy,
    init_random,
    objective,
    per_example_gradients,
    predict,
    residuals,
    train,
)
from .numerics import spearman_rows

log = logging.getLogger(__name__)

TESTS = (
    "randomization",
    "identical_class",
    "identical_subclass",
    "topk_class",
    "topk_subclass",
    "norm_analysis",
    "residual_analysis",
)
SUBCLASS_TESTS = frozenset({"identical_subclass", "topk_subclass"})
# the residual analysis depends on the model only; its single cell is filed under GC
RESIDUAL_CELL_METRIC = "gc"
MIN_SUBCLASS_TESTS = 10


class EvaluationError(RuntimeError):
    pass


class TestResult(NamedTuple):
    value: float
    degenerate: int = 0
    n: int = 0


# ------------------------------------------------------------- the tests


def _top1(cache, X, yhat):
    S, degenerate = cache.scores(X, yhat)
    return top_k_indices(S, 1)[:, 0], degenerate


def model_randomization_test(metric: MetricId, trained: Model, randomized: Model,
                             test_samples: Dataset, train_ds: Dataset,
                             caches: tuple) -> TestResult:
    """Mean Spearman correlation between relevance scores under two models.

    Each model scores with its own predicted labels. Instances whose
    correlation is undefined (a constant score row) are excluded and
    counted in ``degenerate``.
    """
    if trained.spec != randomized.spec:
        raise ValueError("trained and randomized models must share a spec")
    c_trained, c_random = caches
    X = test_samples.X
    S1, d1 = c_trained.scores(X, predict(trained, X))
    S2, d2 = c_random.scores(X, predict(randomized, X))
    rho = spearman_rows(S1, S2)
    ok = ~np.isnan(rho)
    if not ok.any():
        raise EvaluationError(f"{metric}: every test instance gave an undefined correlation")
    return TestResult(float(rho[ok].mean()), int((~ok).sum()), int(ok.sum()))


def topk_identical_class_test(metric: MetricId, model: Model, test_samples: Dataset,
                              train_ds: Dataset, cache, k: int) -> TestResult:
    """Fraction of test instances whose k most relevant training instances
    all carry the predicted class."""
    if not 1 <= k <= len(train_ds):
        raise ValueError("k must lie in 1..N_train")
    X = test_samples.X
    yhat = predict(model, X)
    S, degenerate = cache.scores(X, yhat)
    top = top_k_indices(S, k)
    ok = (train_ds.y[top] == yhat[:, None]).all(axis=1)
    return TestResult(float(ok.mean()), int(degenerate.sum()), len(ok))


def identical_class_test(metric: MetricId, model: Model, test_samples: Dataset,
                         train_ds: Dataset, cache) -> TestResult:
    return topk_identical_class_test(metric, model, test_samples, train_ds, cache, 1)


def topk_identical_subclass_test(metric: MetricId, model: Model, test_samples: Dataset,
                                 train_ds: Dataset, cache, k: int) -> TestResult:
    """Like :func:`topk_identical_class_test` but matching subclasses.

    Every test instance must already be correctly predicted.
    """
    if not (train_ds.has_subclass and test_samples.has_subclass):
        raise ValueError("identical subclass test needs subclass labels")
    if not 1 <= k <= len(train_ds):
        raise ValueError("k must lie in 1..N_train")
    X = test_samples.X
    yhat = predict(model, X)
    if np.any(yhat != test_samples.y):
        raise ValueError("subclass test received incorrectly predicted test instances")
    if len(X) < MIN_SUBCLASS_TESTS:
        raise EvaluationError(
            f"only {len(X)} correctly predicted test instances (need {MIN_SUBCLASS_TESTS})"
        )
    S, degenerate = cache.scores(X, yhat)
    top = top_k_indices(S, k)
    ok = (train_ds.subclass[top] == test_samples.subclass[:, None]).all(axis=1)
    return TestResult(float(ok.mean()), int(degenerate.sum()), len(ok))


def identical_subclass_test(metric: MetricId, model: Model, test_samples: Dataset,
                            train_ds: Dataset, cache) -> TestResult:
    return topk_identical_subclass_test(metric, model, test_samples, train_ds, cache, 1)


def correctly_predicted(model: Model, ds: Dataset) -> Dataset:
    return ds.subset(np.flatnonzero(predict(model, ds.X) == ds.y))


@dataclass(frozen=True)
class NormAnalysis:
    all_norms: np.ndarray
    selected_norms: np.ndarray
    selected_index: np.ndarray
    bin_edges: np.ndarray
    all_counts: np.ndarray
    selected_counts: np.ndarray

    @property
    def median_ratio(self) -> float:
        base = float(np.median(self.all_norms))
        return float(np.median(self.selected_norms)) / base if base > 0 else float("inf")


def _log_bins(values: np.ndarray, bins: int) -> np.ndarray:
    pos = values[values > 0]
    if len(pos) == 0:
        return np.linspace(0.0, 1.0, bins + 1)
    lo, hi = np.log10(pos.min()), np.log10(pos.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    return np.logspace(lo, hi, bins + 1)


def norm_analysis(metric: MetricId, model: Model, test_samples: Dataset,
                  train_ds: Dataset, cache: MetricCache, bins: int = 20) -> NormAnalysis:
    """Feature-map norms of all training instances vs. the top-1 selections."""
    X = test_samples.X
    top, _ = _top1(cache, X, predict(model, X))
    all_norms = np.asarray(cache.phi_norms, dtype=np.float64)
    selected = all_norms[top]
    edges = _log_bins(all_norms, bins)
    clip = lambda v: np.clip(v, edges[0], edges[-1])  # noqa: E731
    all_counts, _ = np.histogram(clip(all_norms), edges)
    sel_counts, _ = np.histogram(clip(selected), edges)
    return NormAnalysis(all_norms, selected, top, edges, all_counts, sel_counts)


@dataclass(frozen=True)
class ResidualAnalysis:
    gc_same: np.ndarray
    gc_diff: np.ndarray
    cos_residual_same: np.ndarray
    cos_residual_diff: np.ndarray
    skipped: int

    @property
    def separation(self) -> float:
        """Mean residual cosine of same-class pairs minus different-class pairs."""
        if len(self.cos_residual_same) == 0:
            return float("nan")
        return float(self.cos_residual_same.mean() - self.cos_residual_diff.mean())


def _row_cos(A, B):
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    den = na * nb
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.where(den > 0, (A * B).sum(1) / np.where(den > 0, den, 1.0), 0.0)
    return np.clip(c, -1.0, 1.0)


def residual_cosine_analysis(model: Model, test_samples: Dataset, train_ds: Dataset,
                             seed: int) -> ResidualAnalysis:
    """Pair each test instance with one random same-class and one
    different-class training instance; record GC and the residual cosine."""
    rng = np.random.default_rng(seed)
    X = test_samples.X
    yhat = predict(model, X)
    same_idx, diff_idx, keep = [], [], []
    skipped = 0
    for t, c in enumerate(yhat):
        same = np.flatnonzero(train_ds.y == c)
        diff = np.flatnonzero(train_ds.y != c)
        if len(same) == 0 or len(diff) == 0:
            skipped += 1
            continue
        same_idx.append(same[rng.integers(len(same))])
        diff_idx.append(diff[rng.integers(len(diff))])
        keep.append(t)
    keep = np.array(keep, dtype=np.int64)
    if len(keep) == 0:
        empty = np.zeros(0)
        return ResidualAnalysis(empty, empty, empty, empty, skipped)
    Xt, yt = X[keep], yhat[keep]
    Gt = per_example_gradients(model, Xt, yt)
    Rt = residuals(model, Xt, yt)
    out = []
    for idx in (np.array(same_idx), np.array(diff_idx)):
        Gi = per_example_gradients(model, train_ds.X[idx], train_ds.y[idx])
        Ri = residuals(model, train_ds.X[idx], train_ds.y[idx])
        out.append((_row_cos(Gt, Gi), _row_cos(Rt, Ri)))
    return ResidualAnalysis(out[0][0], out[1][0], out[0][1], out[1][1], skipped)


# --------------------------------------------------------------- protocol


@dataclass(frozen=True)
class SuiteConfig:
    metrics: tuple = ("gc", "gd", "dot@x")
    tests: tuple = ("randomization", "identical_class", "identical_subclass")
    repetitions: int = 10
    test_sample_size: int = 500
    train_fraction: float = 0.5
    k: int = 10
    master_seed: int = 0
    standardize: bool = True
    hidden_layers: tuple = ()
    activation: str = "relu"
    l2_penalty: float = 0.0
    train: TrainConfig = field(default_factory=TrainConfig)
    numerics: NumericsConfig = field(default_factory=NumericsConfig)
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "metrics", tuple(
            m if isinstance(m, MetricId) else parse_metric(m) for m in self.metrics))
        object.__setattr__(self, "tests", tuple(self.tests))
        object.__setattr__(self, "hidden_layers", tuple(self.hidden_layers))
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.test_sample_size < 1:
            raise ValueError("test_sample_size must be >= 1")
        unknown = set(self.tests) - set(TESTS)
        if unknown:
            raise ValueError(f"unknown tests: {sorted(unknown)}")


# stream identifiers for per-repetition seeds
_SPLIT, _INIT, _TRAIN, _RANDOMIZED, _SAMPLE, _SUPER, _SUB_SPLIT, _SUB_INIT, \
    _SUB_TRAIN, _SUB_SAMPLE, _RESIDUAL = range(1, 12)


def derive_seed(master_seed: int, repetition: int, stream: int) -> int:
    """Counter-based seed: a pure function of (master, repetition, stream)."""
    ss = np.random.SeedSequence([int(master_seed), int(repetition), int(stream)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass
class EvaluationReport:
    meta: dict
    cells: list
    analyses: dict = field(default_factory=dict)  # name -> list of (value, group)

    def cell(self, metric: str, test: str) -> dict:
        for c in self.cells:
            if c["metric"] == metric and c["test"] == test:
                return c
        raise KeyError((metric, test))

    def to_json(self) -> str:
        return json.dumps({"meta": self.meta, "cells": self.cells}, indent=1, sort_keys=False) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EvaluationReport":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(doc, dict) or "cells" not in doc or "meta" not in doc:
            raise ValueError(f"{path}: not an evaluation report")
        return cls(doc["meta"], doc["cells"])


MAIN_STREAMS = (_SPLIT, _INIT, _TRAIN)
SUBCLASS_STREAMS = (_SUB_SPLIT, _SUB_INIT, _SUB_TRAIN)


def split_repetition(ds: Dataset, cfg: SuiteConfig, rep: int, streams=MAIN_STREAMS):
    """The (optionally standardized) train/test split of repetition ``rep``."""
    tr, te = dsmod.split(ds, cfg.train_fraction, derive_seed(cfg.master_seed, rep, streams[0]))
    if cfg.standardize:
        tr, te, _ = dsmod.standardize(tr, te)
    return tr, te


def fit_repetition(ds: Dataset, cfg: SuiteConfig, rep: int, streams=MAIN_STREAMS):
    """Split, standardize and train exactly as repetition ``rep`` of :func:`run_suite`.

    Returns ``(train, test, model, final_loss)``.
    """
    _, init_s, train_s = streams
    tr, te = split_repetition(ds, cfg, rep, streams)
    spec = ModelSpec(tr.dim, tr.class_count, cfg.hidden_layers, cfg.activation, cfg.l2_penalty)
    model0 = init_random(spec, derive_seed(cfg.master_seed, rep, init_s))
    tcfg = TrainConfig(**{**asdict(cfg.train), "seed": derive_seed(cfg.master_seed, rep, train_s)})
    result = train(model0, tr, tcfg)
    return tr, te, result.model, result.final_loss


def _sample(ds: Dataset, size: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    n = min(size, len(ds))
    return ds.subset(np.sort(rng.choice(len(ds), size=n, replace=False)))


def _run_parallel(fn, items, threads):
    if threads == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def run_suite(cfg: SuiteConfig, ds: Dataset, model_hook=None) -> EvaluationReport:
    """Repeat split/train/sample/test ``cfg.repetitions`` times and aggregate.

    Subclass tests run on a superclass relabeling of ``ds`` (drawn per
    repetition) unless ``ds`` already carries subclass labels. The same
    test sample is shared by all metrics within a repetition.
    ``model_hook(rep, train, test) -> Model`` may replace training.
    """
    threads = cfg.threads or (os.cpu_count() or 1)
    started = time.perf_counter()
    need_main = any(t not in SUBCLASS_TESTS for t in cfg.tests)
    need_sub = any(t in SUBCLASS_TESTS for t in cfg.tests)
    metrics = list(dict.fromkeys(cfg.metrics))
    values: dict[tuple, list] = {(m.token, t): [] for m in metrics for t in cfg.tests
                                 if t != "residual_analysis"}
    if "residual_analysis" in cfg.tests:
        values[(RESIDUAL_CELL_METRIC, "residual_analysis")] = []
    degenerate: dict[tuple, int] = {key: 0 for key in values}
    errors: dict[tuple, str] = {}
    analyses: dict[str, list] = {}
    rep_meta = []

    for rep in range(cfg.repetitions):
        info: dict = {"repetition": rep}
        if need_main:
            if model_hook is None:
                tr, te, model, final_loss = fit_repetition(ds, cfg, rep)
            else:
                tr, te = split_repetition(ds, cfg, rep)
                model = model_hook(rep, tr, te)
                final_loss = objective(model, tr.X, tr.y)
            sample = _sample(te, cfg.test_sample_size, derive_seed(cfg.master_seed, rep, _SAMPLE))
            info.update(
                n_train=len(tr), n_test_pool=len(te), n_test=len(sample),
                final_train_loss=final_loss, train_accuracy=accuracy(model, tr),
                test_accuracy=accuracy(model, te), damping={},
            )
            randomized = None
            if "randomization" in cfg.tests:
                randomized = init_random(model.spec, derive_seed(cfg.master_seed, rep, _RANDOMIZED))
            if "residual_analysis" in cfg.tests:
                ra = residual_cosine_analysis(model, sample, tr,
                                              derive_seed(cfg.master_seed, rep, _RESIDUAL))
                rows = analyses.setdefault("residual_analysis", [])
                for name, arr in (("gc_same", ra.gc_same), ("gc_diff", ra.gc_diff),
                                  ("cos_residual_same", ra.cos_residual_same),
                                  ("cos_residual_diff", ra.cos_residual_diff)):
                    rows.extend((float(v), name) for v in arr)
                values[(RESIDUAL_CELL_METRIC, "residual_analysis")].append(ra.separation)
                degenerate[(RESIDUAL_CELL_METRIC, "residual_analysis")] += ra.skipped

            def work(m: MetricId):
                out = {}
                try:
                    cache = precompute(m, model, tr, cfg.numerics)
                except Exception as exc:  # noqa: BLE001 - recorded per cell
                    return {t: exc for t in cfg.tests if t not in SUBCLASS_TESTS}, None
                for t in cfg.tests:
                    if t in SUBCLASS_TESTS or t == "residual_analysis":
                        continue
                    try:
                        if t == "randomization":
                            rc = precompute(m, randomized, tr, cfg.numerics)
                            out[t] = model_randomization_test(m, model, randomized, sample, tr, (cache, rc))
                        elif t == "identical_class":
                            out[t] = identical_class_test(m, model, sample, tr, cache)
                        elif t == "topk_class":
                            out[t] = topk_identical_class_test(m, model, sample, tr, cache, cfg.k)
                        elif t == "norm_analysis":
                            na = norm_analysis(m, model, sample, tr, cache)
                            out[t] = (TestResult(na.median_ratio, 0, len(sample)), na)
                    except Exception as exc:  # noqa: BLE001
                        out[t] = exc
                return out, cache.damping

            for m, (out, damping) in zip(metrics, _run_parallel(work, metrics, threads)):
                if damping is not None:
                    info["damping"][m.token] = damping
                for t, res in out.items():
                    key = (m.token, t)
                    if isinstance(res, Exception):
                        errors.setdefault(key, f"{type(res).__name__}: {res}")
                        continue
                    if t == "norm_analysis":
                        res, na = res
                        rows = analyses.setdefault(f"norm_analysis_{m.token}", [])
                        rows.extend((float(v), "all") for v in na.all_norms)
                        rows.extend((float(v), "selected") for v in na.selected_norms)
                    values[key].append(res.value)
                    degenerate[key] += res.degenerate

        if need_sub:
            base = ds
            if not ds.has_subclass:
                base = dsmod.make_superclass_dataset(ds, derive_seed(cfg.master_seed, rep, _SUPER))
            str_, ste, smodel, sloss = fit_repetition(base, cfg, rep, SUBCLASS_STREAMS)
            pool = correctly_predicted(smodel, ste)
            ssample = _sample(pool, cfg.test_sample_size, derive_seed(cfg.master_seed, rep, _SUB_SAMPLE))
            info.update(sub_n_train=len(str_), sub_n_test=len(ssample),
                        sub_test_accuracy=accuracy(smodel, ste), sub_final_train_loss=sloss)
            info.setdefault("sub_damping", {})

            def sub_work(m: MetricId):
                out = {}
                try:
                    cache = precompute(m, smodel, str_, cfg.numerics)
                except Exception as exc:  # noqa: BLE001
                    return {t: exc for t in cfg.tests if t in SUBCLASS_TESTS}, None
                for t in cfg.tests:
                    if t not in SUBCLASS_TESTS:
                        continue
                    try:
                        kk = 1 if t == "identical_subclass" else cfg.k
                        out[t] = topk_identical_subclass_test(m, smodel, ssample, str_, cache, kk)
                    except Exception as exc:  # noqa: BLE001
                        out[t] = exc
                return out, cache.damping

            for m, (out, damping) in zip(metrics, _run_parallel(sub_work, metrics, threads)):
                if damping is not None:
                    info["sub_damping"][m.token] = damping
                for t, res in out.items():
                    key = (m.token, t)
                    if isinstance(res, Exception):
                        errors.setdefault(key, f"{type(res).__name__}: {res}")
                        continue
                    values[key].append(res.value)
                    degenerate[key] += res.degenerate
        rep_meta.append(info)
        log.info("repetition %d done", rep)

    cells = []
    for (m_token, t), vals in values.items():
        if (m_token, t) in errors:
            cells.append({"metric": m_token, "test": t, "error": errors[(m_token, t)]})
            continue
        vals = [float(v) for v in vals]
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        cells.append({
            "metric": m_token, "test": t, "mean": float(np.mean(vals)), "std": std,
            "values": vals, "degenerate_count": degenerate[(m_token, t)],
        })

    numerics = asdict(cfg.numerics)
    meta = {
        "master_seed": cfg.master_seed,
        "repetitions": cfg.repetitions,
        "test_sample_size": cfg.test_sample_size,
        "train_fraction": cfg.train_fraction,
        "k": cfg.k,
        "standardize": cfg.standardize,
        "model": {"hidden_layers": list(cfg.hidden_layers), "activation": cfg.activation,
                  "l2_penalty": cfg.l2_penalty},
        "train": asdict(cfg.train),
        "numerics": numerics,
        "damping_rule": "0.01 * trace / param_count unless set",
        "test_sample_shared_across_metrics": True,
        "dataset_digest": ds.digest(),
        "dataset_rows": len(ds),
        "seed_scheme": "SeedSequence([master_seed, repetition, stream])",
        "repetitions_detail": rep_meta,
    }
    log.info("suite finished in %.2fs", time.perf_counter() - started)
    return EvaluationReport(meta, cells, analyses)


def write_analysis_csvs(report: EvaluationReport, directory) -> list[Path]:
    """One ``value,group`` CSV per analysis; returns the written paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, rows in sorted(report.analyses.items()):
        path = directory / f"{name.replace('@', '_at_')}.csv"
        with path.open("w", encoding="utf-8") as fh:
            fh.write("value,group\n")
            for v, g in rows:
                fh.write(f"{v!r},{g}\n")
        paths.append(path)
    return paths
