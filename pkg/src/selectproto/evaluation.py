"""Test-time evaluation, repeated-run summaries and post-hoc analyses of trained models."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import MetaDataset, NoiseConfig, corrupt_support_nonempty, sample_episode
from .errors import ContractError, SelectProtoError
from .model import ModelBundle, predict, support_weights
from .training import TrainConfig, TrainHistory, build_bundle, stream_seeds, train

log = logging.getLogger(__name__)


@dataclass
class AccuracyReport:
    accuracies: list[float]
    mean: float
    std: float
    ci95: tuple[float, float]
    config: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=list)

    @classmethod
    def from_accuracies(cls, accs: Sequence[float], config: dict | None = None,
                        seeds: Sequence[int] = ()) -> AccuracyReport:
        a = np.asarray(accs, dtype=np.float64)
        if a.size == 0:
            raise ContractError("no accuracies to summarise")
        mean = float(a.mean())
        std = float(a.std())
        half = 1.96 * std / math.sqrt(len(a))
        return cls([float(x) for x in a], mean, std, (mean - half, mean + half),
                   dict(config or {}), [int(s) for s in seeds])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci95"] = list(self.ci95)
        return d

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def _noise_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))


def evaluate(bundle: ModelBundle, ds: MetaDataset, split: str = "test", n: int = 5, k: int = 5,
             q: int = 15, episodes: int = 600, seed: int = 0,
             noise: NoiseConfig | None = None) -> AccuracyReport:
    """Per-episode query accuracy over ``episodes`` freshly sampled test episodes.

    Supports stay clean unless ``noise`` has a positive rate.
    """
    seeds = stream_seeds(seed, "eval", episodes)
    accs = []
    for s in seeds:
        ep = sample_episode(ds, split, n, k, q, s)
        if noise is not None and noise.rate > 0:
            ep = corrupt_support_nonempty(ep, noise, _noise_rng(s))
        accs.append(float(np.mean(predict(bundle, ep) == ep.query_y)))
    cfg = {"variant": bundle.variant, "split": split, "n": n, "k": k, "q": q,
           "episodes": episodes, "seed": seed,
           "noise": asdict(noise) if noise is not None else None}
    return AccuracyReport.from_accuracies(accs, cfg, seeds)


# ---------------------------------------------------------------- repeated runs


@dataclass
class RunRecord:
    variant: str
    repetition: int
    seed: int
    accuracy: float | None
    error: str | None = None


@dataclass
class RepeatSummary:
    records: list[RunRecord]

    def variants(self) -> list[str]:
        seen: list[str] = []
        for r in self.records:
            if r.variant not in seen:
                seen.append(r.variant)
        return seen

    def accuracies(self, variant: str) -> list[float]:
        return [r.accuracy for r in self.records if r.variant == variant and r.accuracy is not None]

    def rows(self, variant: str) -> list[RunRecord]:
        return [r for r in self.records if r.variant == variant]

    def cell(self, variant: str) -> tuple[float, float] | None:
        accs = self.accuracies(variant)
        if not accs:
            return None
        return float(np.mean(accs)), float(np.std(accs))

    def failures(self) -> list[RunRecord]:
        return [r for r in self.records if r.error is not None]

    def to_dict(self) -> dict:
        return {"records": [asdict(r) for r in self.records],
                "summary": {v: self.cell(v) for v in self.variants()}}


@dataclass
class RunResult:
    accuracy: float
    params: dict[str, np.ndarray]
    history: TrainHistory
    config: dict


def train_and_evaluate(cfg: TrainConfig, ds: MetaDataset, test_episodes: int = 600,
                       test_noise: NoiseConfig | None = None) -> tuple[ModelBundle, TrainHistory, AccuracyReport]:
    bundle = build_bundle(cfg, ds.feature_dim)
    bundle, history = train(bundle, ds, cfg)
    report = evaluate(bundle, ds, "test", cfg.n, cfg.k, cfg.q, test_episodes, cfg.seed, test_noise)
    return bundle, history, report


def _run_one(args) -> RunResult | str:
    cfg, ds_source, test_episodes, test_noise = args
    try:
        ds = ds_source(cfg.seed) if callable(ds_source) else ds_source
        bundle, history, report = train_and_evaluate(cfg, ds, test_episodes, test_noise)
    except SelectProtoError as exc:
        return f"{type(exc).__name__}: {exc}"
    return RunResult(report.mean, {k: t.values.copy() for k, t in bundle.named_parameters().items()},
                     history, cfg.to_dict())


def repeat_runs(
    cfg: TrainConfig,
    ds_source: MetaDataset | Callable[[int], MetaDataset],
    repetitions: int,
    variants: Sequence[str] | None = None,
    *,
    test_episodes: int = 600,
    test_noise: NoiseConfig | None = None,
    jobs: int = 1,
    on_run: Callable[[str, int, RunResult], None] | None = None,
) -> RepeatSummary:
    """Train and evaluate every variant ``repetitions`` times with seeds ``cfg.seed + r``.

    ``ds_source`` is either a fixed dataset or a callable mapping the run seed
    to a dataset. A failed run is recorded with its error and no accuracy.
    """
    if repetitions < 1:
        raise ContractError("repetitions must be >= 1")
    variants = list(variants) if variants else [cfg.variant]
    jobs_list = []
    for v in variants:
        for r in range(repetitions):
            run_cfg = replace(cfg, variant=v, seed=cfg.seed + r,
                              noise=replace(cfg.noise, seed=cfg.noise.seed + r))
            jobs_list.append((v, r, run_cfg))
    args = [(c, ds_source, test_episodes, test_noise) for _, _, c in jobs_list]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, args))
    else:
        results = [_run_one(a) for a in args]
    records = []
    for (v, r, c), res in zip(jobs_list, results):
        if isinstance(res, str):
            log.warning("run %s/%d failed: %s", v, r, res)
            records.append(RunRecord(v, r, c.seed, None, res))
            continue
        records.append(RunRecord(v, r, c.seed, res.accuracy))
        if on_run is not None:
            on_run(v, r, res)
    return RepeatSummary(records)


def format_cell(cell: tuple[float, float] | None) -> str:
    if cell is None:
        return "NA"
    return f"{100 * cell[0]:.2f} ± {100 * cell[1]:.2f}"


def write_grid_csv(path: str | Path, row_label: str, rows: Sequence, variants: Sequence[str],
                   cells: dict) -> None:
    """Summary grid: one row per setting, one column per variant, cells ``mean ± std`` in %."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([row_label, *variants])
        for row in rows:
            w.writerow([row, *(format_cell(cells.get((row, v))) for v in variants)])


# ---------------------------------------------------------------- feature ranking


@dataclass
class FeatureRanking:
    pairs: list[tuple[int, float]]
    informative: list[int] | None = None
    recall_at_m: float | None = None

    def betas(self) -> np.ndarray:
        out = np.empty(len(self.pairs))
        for idx, b in self.pairs:
            out[idx] = b
        return out

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "feature_index", "beta"])
            for rank, (idx, b) in enumerate(self.pairs, start=1):
                w.writerow([rank, idx, repr(b)])


def rank_features(bundle: ModelBundle, informative: Sequence[int] | None = None) -> FeatureRanking:
    """Features sorted by learned selection weight (descending, ties by index).

    With ground-truth ``informative`` columns, ``recall_at_m`` is the share of
    them found in the top ``m = len(informative)`` positions.
    """
    if bundle.selector is None:
        raise ContractError(f"variant {bundle.variant!r} has no feature selection layer")
    beta = bundle.selector.beta().values
    order = np.lexsort((np.arange(len(beta)), -beta))
    pairs = [(int(i), float(beta[i])) for i in order]
    recall = None
    info = None
    if informative is not None:
        info = sorted(int(i) for i in informative)
        m = len(info)
        top = {idx for idx, _ in pairs[:m]}
        recall = len(top.intersection(info)) / m if m else 0.0
    return FeatureRanking(pairs, info, recall)


# ---------------------------------------------------------------- sample weights


@dataclass
class WeightSeparation:
    clean: list[float]
    corrupted: list[float]
    clean_mean: float
    corrupted_mean: float
    separation: float
    edges: list[float]
    clean_counts: list[int]
    corrupted_counts: list[int]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["bucket", "lo", "hi", "clean_count", "corrupted_count"])
            for b in range(len(self.clean_counts)):
                w.writerow([b, repr(self.edges[b]), repr(self.edges[b + 1]),
                            self.clean_counts[b], self.corrupted_counts[b]])

    def to_dict(self) -> dict:
        return asdict(self)


def weight_histogram(bundle: ModelBundle, ds: MetaDataset, noise: NoiseConfig, episodes: int,
                     seed: int, *, split: str = "train", n: int = 5, k: int = 5, q: int = 15,
                     bins: int = 10) -> WeightSeparation:
    """Weighting-net outputs on corrupted episodes, bucketed by whether the label was flipped."""
    if bundle.weighter is None:
        raise ContractError(f"variant {bundle.variant!r} has no sample weighting net")
    clean: list[float] = []
    bad: list[float] = []
    for s in stream_seeds(seed, "eval", episodes):
        ep = sample_episode(ds, split, n, k, q, s)
        if noise.rate > 0:
            ep = corrupt_support_nonempty(ep, noise, _noise_rng(s))
        w = support_weights(bundle, ep)
        clean.extend(w[~ep.noise_mask].tolist())
        bad.extend(w[ep.noise_mask].tolist())
    edges = np.linspace(0.0, 1.0, bins + 1)
    cc, _ = np.histogram(clean, bins=edges)
    bc, _ = np.histogram(bad, bins=edges)
    cm = float(np.mean(clean)) if clean else float("nan")
    bm = float(np.mean(bad)) if bad else float("nan")
    sep = cm - bm if bad and clean else float("nan")
    return WeightSeparation(clean, bad, cm, bm, sep, edges.tolist(), cc.tolist(), bc.tolist())


# ---------------------------------------------------------------- convergence


def convergence_stats(histories: Sequence[TrainHistory], threshold_frac: float) -> list[int]:
    """First logged episode whose val accuracy reaches ``threshold_frac`` of that run's peak."""
    if not 0.0 < threshold_frac <= 1.0:
        raise ContractError("threshold_frac must lie in (0, 1]")
    out = []
    for h in histories:
        if not h.records:
            raise ContractError("empty training history")
        peak = max(r.val_acc for r in h.records)
        target = threshold_frac * peak
        out.append(next(r.episode for r in h.records if r.val_acc >= target))
    return out
