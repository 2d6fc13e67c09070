"""Meta-datasets, synthetic generation, label corruption and episode sampling."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CapacityError, ContractError, IngestionError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
NOISE_MODES = ("all", "other")


@dataclass
class TaskTable:
    task_id: str
    features: np.ndarray
    labels: np.ndarray
    class_names: list[str] | None = None
    feature_names: list[str] | None = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ContractError(
                f"task {self.task_id}: features {self.features.shape} vs labels {self.labels.shape}"
            )
        if self.labels.size:
            counts = np.bincount(self.labels)
            if self.labels.min() < 0 or np.any(counts == 0):
                raise ContractError(f"task {self.task_id}: labels must cover 0..C-1 with no empty class")
        if not np.all(np.isfinite(self.features)):
            raise ContractError(f"task {self.task_id}: non-finite feature values")

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def class_rows(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)


@dataclass
class MetaDataset:
    """Tables plus a disjoint assignment of classes (one table) or tasks (many) to splits."""

    tables: list[TaskTable]
    split: dict[str, list[int]] | None = None
    split_kind: str | None = None
    informative: list[int] | None = None

    @property
    def feature_dim(self) -> int:
        return self.tables[0].feature_dim if self.tables else 0

    @property
    def multi_task(self) -> bool:
        return len(self.tables) > 1

    def units(self, split: str | None) -> list[int]:
        """Class ids (single table) or table ids (multi-task) available to ``split``."""
        if split is None or self.split is None:
            if self.multi_task:
                return list(range(len(self.tables)))
            return list(range(self.tables[0].num_classes))
        if split not in self.split:
            raise ContractError(f"unknown split {split!r}")
        return list(self.split[split])


@dataclass(frozen=True)
class Episode:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    n: int
    k: int
    q: int
    noise_mask: np.ndarray
    seed: int | None = None
    support_ids: np.ndarray | None = None
    query_ids: np.ndarray | None = None
    classes: tuple[int, ...] = ()
    task: int = 0
    clean_support_y: np.ndarray | None = None


@dataclass
class GenConfig:
    num_classes: int = 100
    samples_per_class: int = 100
    informative_dims: int = 20
    irrelevant_dims: int = 100
    class_mean_scale: float = 1.0
    within_class_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("num_classes", "samples_per_class", "informative_dims"):
            if getattr(self, name) < 1:
                raise ContractError(f"GenConfig.{name} must be positive")
        if self.irrelevant_dims < 0 or self.within_class_std <= 0 or self.class_mean_scale <= 0:
            raise ContractError("GenConfig: irrelevant_dims >= 0 and positive scale/std required")


@dataclass
class NoiseConfig:
    rate: float = 0.0
    mode: str = "all"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ContractError(f"noise rate must lie in [0, 1], got {self.rate}")
        if self.mode not in NOISE_MODES:
            raise ContractError(f"noise mode must be one of {NOISE_MODES}, got {self.mode!r}")


# ---------------------------------------------------------------- synthetic data


def class_means(cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    """Class centres at random vertices ``+-class_mean_scale`` of a hypercube on the informative coordinates.

    Every class uses every informative coordinate, so a model that learns to
    ignore the irrelevant columns on training classes transfers to unseen ones.
    """
    signs = rng.choice([-1.0, 1.0], size=(cfg.num_classes, cfg.informative_dims))
    return cfg.class_mean_scale * signs


def generate_synthetic(cfg: GenConfig) -> MetaDataset:
    """One table of Gaussian class clusters padded with class-independent noise columns.

    Column order is shuffled; ``MetaDataset.informative`` lists the columns
    that carry class signal.
    """
    rng = np.random.default_rng(cfg.seed)
    means = class_means(cfg, rng)
    n_rows = cfg.num_classes * cfg.samples_per_class
    labels = np.repeat(np.arange(cfg.num_classes), cfg.samples_per_class)
    informative = means[labels] + cfg.within_class_std * rng.standard_normal((n_rows, cfg.informative_dims))
    irrelevant = rng.standard_normal((n_rows, cfg.irrelevant_dims))
    raw = np.hstack([informative, irrelevant])
    perm = rng.permutation(raw.shape[1])
    features = raw[:, perm]
    # perm[j] is the raw column now at j; raw columns < informative_dims carry signal
    info_cols = sorted(int(j) for j in np.flatnonzero(perm < cfg.informative_dims))
    table = TaskTable("synthetic", features, labels,
                      feature_names=[f"f{j}" for j in range(features.shape[1])])
    return MetaDataset([table], informative=info_cols)


def pad_irrelevant(table: TaskTable, d_irr: int, seed: int) -> TaskTable:
    """Append ``d_irr`` standard-normal columns; existing columns are untouched."""
    if d_irr < 0:
        raise ContractError("d_irr must be >= 0")
    if d_irr == 0:
        return table
    rng = np.random.default_rng(seed)
    extra = rng.standard_normal((table.features.shape[0], d_irr))
    names = None
    if table.feature_names is not None:
        p = table.feature_dim
        names = list(table.feature_names) + [f"f{p + j}" for j in range(d_irr)]
    return replace(table, features=np.hstack([table.features, extra]), feature_names=names)


def pad_dataset(ds: MetaDataset, d_irr: int, seed: int) -> MetaDataset:
    return replace(ds, tables=[pad_irrelevant(t, d_irr, seed + i) for i, t in enumerate(ds.tables)])


def write_synthetic(ds: MetaDataset, cfg: GenConfig, out_dir: str | Path,
                    stem: str = "synthetic") -> tuple[Path, Path]:
    """Write ``<stem>.csv`` (label, f0..f{p-1}) and the ``<stem>.json`` sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = ds.tables[0]
    csv_path = out / f"{stem}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{j}" for j in range(table.feature_dim)])
        for y, row in zip(table.labels, table.features):
            w.writerow([int(y)] + [repr(float(v)) for v in row])
    side = out / f"{stem}.json"
    meta = {"config": asdict(cfg), "seed": cfg.seed, "informative": ds.informative,
            "feature_dim": table.feature_dim, "rows": int(table.features.shape[0])}
    side.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return csv_path, side


def read_synthetic(csv_path: str | Path) -> MetaDataset:
    """Load a dataset written by :func:`write_synthetic` (sidecar optional)."""
    csv_path = Path(csv_path)
    try:
        arr = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise IngestionError(f"{csv_path}: {exc}") from exc
    side = csv_path.with_suffix(".json")
    info = json.loads(side.read_text(encoding="utf-8"))["informative"] if side.exists() else None
    table = TaskTable(csv_path.stem, arr[:, 1:], arr[:, 0].astype(np.int64),
                      feature_names=[f"f{j}" for j in range(arr.shape[1] - 1)])
    return MetaDataset([table], informative=info)


# ---------------------------------------------------------------- CSV meta-datasets


def _read_task_csv(path: Path, task_id: str, label_column: str) -> TaskTable:
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"task {task_id}: cannot open {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file, no header row") from None
        if label_column not in header:
            raise IngestionError(f"{path}: label column {label_column!r} not in header")
        li = header.index(label_column)
        feat_cols = [j for j in range(len(header)) if j != li]
        raw_labels: list[str] = []
        rows: list[list[float]] = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path}:{line_no}: expected {len(header)} cells, got {len(row)}")
            label = row[li].strip()
            if not label:
                raise IngestionError(f"{path}:{line_no}: missing label")
            values = []
            for j in feat_cols:
                try:
                    v = float(row[j])
                except ValueError:
                    raise IngestionError(
                        f"{path}:{line_no}: column {header[j]!r} has non-numeric value {row[j]!r}"
                    ) from None
                if not math.isfinite(v):
                    raise IngestionError(f"{path}:{line_no}: column {header[j]!r} is not finite")
                values.append(v)
            raw_labels.append(label)
            rows.append(values)
    if not rows:
        raise IngestionError(f"{path}: task {task_id} has no samples (empty class set)")
    names = sorted(set(raw_labels), key=_label_key)
    index = {name: i for i, name in enumerate(names)}
    labels = np.array([index[x] for x in raw_labels], dtype=np.int64)
    return TaskTable(task_id, np.array(rows, dtype=np.float64), labels, names,
                     [header[j] for j in feat_cols])


def _label_key(label: str):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


def load_meta_csv(manifest_path: str | Path) -> MetaDataset:
    """Parse ``{"tasks": [{"id", "path", "label_column"}]}`` and every referenced CSV."""
    manifest_path = Path(manifest_path)
    try:
        spec = json.loads(manifest_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IngestionError(f"cannot read manifest {manifest_path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{manifest_path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    tasks = spec.get("tasks") if isinstance(spec, dict) else None
    if not isinstance(tasks, list):
        raise IngestionError(f"{manifest_path}: expected an object with a 'tasks' list")
    if not tasks:
        warnings.warn(f"manifest {manifest_path} lists no tasks", UserWarning, stacklevel=2)
        return MetaDataset([])
    tables = []
    for i, entry in enumerate(tasks):
        try:
            tid, rel, label_col = str(entry["id"]), entry["path"], entry["label_column"]
        except (KeyError, TypeError):
            raise IngestionError(
                f"{manifest_path}: task #{i} needs 'id', 'path' and 'label_column'"
            ) from None
        path = Path(rel)
        if not path.is_absolute():
            path = manifest_path.parent / path
        tables.append(_read_task_csv(path, tid, label_col))
    ref = tables[0].feature_names
    for t in tables[1:]:
        if t.feature_names != ref:
            raise IngestionError(
                f"task {t.task_id}: feature columns differ from task {tables[0].task_id}"
            )
    return MetaDataset(tables)


def save_meta_csv(ds: MetaDataset, out_dir: str | Path, label_column: str = "label") -> Path:
    """Write one CSV per task plus ``manifest.json``; floats round-trip exactly."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for t in ds.tables:
        fname = f"{_safe_name(t.task_id)}.csv"
        names = t.feature_names or [f"f{j}" for j in range(t.feature_dim)]
        cls = t.class_names or [str(c) for c in range(t.num_classes)]
        with open(out / fname, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([label_column, *names])
            for y, row in zip(t.labels, t.features):
                w.writerow([cls[y], *(repr(float(v)) for v in row)])
        entries.append({"id": t.task_id, "path": fname, "label_column": label_column})
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"tasks": entries}, indent=2) + "\n", encoding="utf-8")
    return manifest


def _safe_name(task_id: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in task_id) or "task"


@dataclass
class FilterReport:
    kept: list[str] = field(default_factory=list)
    dropped: list[str] = field(default_factory=list)
    reduced: list[str] = field(default_factory=list)
    counts: dict[str, list[int]] = field(default_factory=dict)


def filter_min_class(ds: MetaDataset, min_per_class: int = 60) -> tuple[MetaDataset, FilterReport]:
    """Keep each task's two largest classes; retain the task iff both reach ``min_per_class``.

    Tasks that had more than two classes are listed in ``report.reduced``.
    Equal-size classes are ranked by class index.
    """
    report = FilterReport()
    kept = []
    for t in ds.tables:
        counts = t.class_counts()
        report.counts[t.task_id] = counts.tolist()
        order = sorted(range(len(counts)), key=lambda c: (-counts[c], c))
        top = sorted(order[:2])
        if len(top) < 2 or min(counts[c] for c in top) < min_per_class:
            report.dropped.append(t.task_id)
            continue
        if len(counts) > 2:
            report.reduced.append(t.task_id)
            rows = np.flatnonzero(np.isin(t.labels, top))
            remap = {c: i for i, c in enumerate(top)}
            names = [t.class_names[c] for c in top] if t.class_names else None
            t = replace(t, features=t.features[rows],
                        labels=np.array([remap[c] for c in t.labels[rows]], dtype=np.int64),
                        class_names=names)
        kept.append(t)
        report.kept.append(t.task_id)
    log.info("filter_min_class: kept %d, dropped %d, reduced %d",
             len(report.kept), len(report.dropped), len(report.reduced))
    return MetaDataset(kept, informative=ds.informative), report


def _partition_sizes(total: int, ratios: Sequence[float]) -> list[int]:
    sizes = [int(math.floor(total * r + 1e-9)) for r in ratios]
    sizes[0] += total - sum(sizes)
    return sizes


def split_classes(ds: MetaDataset, ratios: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0) -> MetaDataset:
    """Disjoint train/val/test assignment of classes (one table) or tasks (several).

    Sizes are floored and the remainder goes to train.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ContractError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    if not ds.tables:
        raise CapacityError("cannot split an empty meta-dataset")
    kind = "tasks" if ds.multi_task else "classes"
    total = len(ds.tables) if ds.multi_task else ds.tables[0].num_classes
    sizes = _partition_sizes(total, ratios)
    for name, size in zip(SPLITS, sizes):
        if size == 0:
            raise CapacityError(f"split {name!r} receives 0 {kind} out of {total}")
    perm = np.random.default_rng(seed).permutation(total)
    split, start = {}, 0
    for name, size in zip(SPLITS, sizes):
        split[name] = sorted(int(u) for u in perm[start:start + size])
        start += size
    return replace(ds, split=split, split_kind=kind)


def standardize(ds: MetaDataset) -> MetaDataset:
    """Zero-mean unit-variance features, with statistics from the train split only."""
    if ds.split is None:
        rows = np.vstack([t.features for t in ds.tables])
    elif ds.split_kind == "tasks":
        rows = np.vstack([ds.tables[i].features for i in ds.split["train"]])
    else:
        t = ds.tables[0]
        rows = t.features[np.isin(t.labels, ds.split["train"])]
    mu = rows.mean(axis=0)
    sd = rows.std(axis=0)
    sd[sd == 0] = 1.0
    return replace(ds, tables=[replace(t, features=(t.features - mu) / sd) for t in ds.tables])


# ---------------------------------------------------------------- episodes


def sample_episode(ds: MetaDataset, split: str | None, n: int, k: int, q: int, seed) -> Episode:
    """Draw an n-way k-shot episode with q queries per class, all without replacement."""
    if min(n, k, q) < 1:
        raise ContractError("n, k and q must be positive")
    rng = np.random.default_rng(seed)
    units = ds.units(split)
    if ds.multi_task:
        if not units:
            raise CapacityError(f"split {split!r} has no tasks")
        task = int(units[rng.integers(len(units))])
        table = ds.tables[task]
        pool = list(range(table.num_classes))
    else:
        task = 0
        table = ds.tables[0]
        pool = units
    if len(pool) < n:
        raise CapacityError(f"{n}-way episode needs {n} classes, split {split!r} has {len(pool)}")
    chosen = [int(c) for c in rng.choice(pool, size=n, replace=False)]
    sup_ids, qry_ids = [], []
    for c in chosen:
        rows = table.class_rows(c)
        if len(rows) < k + q:
            raise CapacityError(
                f"class {c} of task {table.task_id} has {len(rows)} samples, needs k+q={k + q}"
            )
        picked = rng.choice(rows, size=k + q, replace=False)
        sup_ids.append(picked[:k])
        qry_ids.append(picked[k:])
    s_ids = np.concatenate(sup_ids)
    q_ids = np.concatenate(qry_ids)
    s_y = np.repeat(np.arange(n), k)
    q_y = np.repeat(np.arange(n), q)
    return Episode(
        table.features[s_ids], s_y, table.features[q_ids], q_y, n, k, q,
        np.zeros(n * k, dtype=bool), seed if isinstance(seed, int) else None,
        s_ids, q_ids, tuple(chosen), task, s_y.copy(),
    )


def corrupt_support(ep: Episode, noise: NoiseConfig, rng: np.random.Generator | None = None) -> Episode:
    """Resample each support label with probability ``noise.rate``.

    Mode ``"all"`` draws the new label uniformly from all n classes (it may
    coincide with the original); ``"other"`` always picks a different class.
    ``noise_mask`` marks supports whose final label differs from the clean one.
    """
    rng = rng if rng is not None else np.random.default_rng(noise.seed)
    m = len(ep.support_y)
    hit = rng.random(m) < noise.rate
    if noise.mode == "all":
        draw = rng.integers(0, ep.n, size=m)
    elif ep.n > 1:
        draw = (ep.support_y + rng.integers(1, ep.n, size=m)) % ep.n
    else:
        draw = ep.support_y.copy()
    new_y = np.where(hit, draw, ep.support_y).astype(np.int64)
    clean = ep.clean_support_y if ep.clean_support_y is not None else ep.support_y
    return replace(ep, support_y=new_y, noise_mask=new_y != clean, clean_support_y=clean.copy())


def corrupt_support_nonempty(ep: Episode, noise: NoiseConfig, rng: np.random.Generator,
                             max_tries: int = 1000) -> Episode:
    """:func:`corrupt_support`, redrawn until every class keeps at least one support."""
    for _ in range(max_tries):
        out = corrupt_support(ep, noise, rng)
        if np.bincount(out.support_y, minlength=ep.n).min() > 0:
            return out
    raise CapacityError(f"could not corrupt supports without emptying a class in {max_tries} draws")


def validate_episode(ep: Episode) -> None:
    """Raise :class:`ContractError` unless every episode invariant holds."""
    if len(ep.support_y) != ep.n * ep.k or len(ep.query_y) != ep.n * ep.q:
        raise ContractError("support/query sizes differ from n*k and n*q")
    if ep.support_x.shape[0] != len(ep.support_y) or ep.query_x.shape[0] != len(ep.query_y):
        raise ContractError("feature rows and labels disagree")
    clean = ep.clean_support_y if ep.clean_support_y is not None else ep.support_y
    if np.any(np.bincount(clean, minlength=ep.n) != ep.k):
        raise ContractError("support does not hold exactly k clean labels per class")
    if np.any(np.bincount(ep.query_y, minlength=ep.n) != ep.q):
        raise ContractError("query does not hold exactly q labels per class")
    if ep.support_ids is not None and ep.query_ids is not None:
        if np.intersect1d(ep.support_ids, ep.query_ids).size:
            raise ContractError("support and query share samples")
        if len(set(ep.support_ids.tolist())) != len(ep.support_ids):
            raise ContractError("support sampled with replacement")
    if len(ep.noise_mask) != len(ep.support_y) or np.any(ep.noise_mask != (ep.support_y != clean)):
        raise ContractError("noise_mask does not match effective corruption")
