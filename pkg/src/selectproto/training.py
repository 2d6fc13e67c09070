"""Episodic training with joint Adam updates, validation-based model selection and checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from .data import MetaDataset, NoiseConfig, corrupt_support_nonempty, sample_episode
from .errors import CheckpointError, ContractError, NumericError
from .model import ModelBundle, episode_forward, predict

log = logging.getLogger(__name__)

STREAMS = {"data": 0, "episodes": 1, "init": 2, "noise": 3, "val": 4, "eval": 5}


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent named sub-stream of a master seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAMS[name],)))


def stream_seeds(seed: int, name: str, count: int) -> list[int]:
    return [int(s) for s in rng_stream(seed, name).integers(0, 2**63 - 1, size=count)]


@dataclass
class TrainConfig:
    variant: str = "select"
    n: int = 5
    k: int = 5
    q: int = 15
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    total_episodes: int = 10000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_every: int = 200
    val_episodes: int = 100
    seed: int = 0
    early_stop_patience: int = 10
    lr_decay_every: int = 0
    lr_decay: float = 0.5
    hidden: tuple[int, ...] = (64, 32)
    embedding_dim: int = 16
    weight_hidden: int = 100
    distance: str = "sqeuclidean"
    normalize_weights: bool = False

    def __post_init__(self):
        if isinstance(self.noise, dict):
            self.noise = NoiseConfig(**self.noise)
        self.hidden = tuple(self.hidden)
        if self.total_episodes < 1:
            raise ContractError("total_episodes must be >= 1")
        if not 1 <= self.eval_every <= self.total_episodes:
            raise ContractError("eval_every must lie in 1..total_episodes")
        if self.val_episodes < 1:
            raise ContractError("val_episodes must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)


def build_bundle(cfg: TrainConfig, input_dim: int) -> ModelBundle:
    return ModelBundle.build(
        cfg.variant, input_dim, hidden=cfg.hidden, embedding_dim=cfg.embedding_dim,
        weight_hidden=cfg.weight_hidden, distance=cfg.distance,
        normalize_weights=cfg.normalize_weights, seed=rng_stream(cfg.seed, "init"),
    )


@dataclass
class HistoryRecord:
    episode: int
    loss: float
    train_acc: float
    val_acc: float


@dataclass
class TrainHistory:
    records: list[HistoryRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, rec: HistoryRecord) -> None:
        if self.records and rec.episode <= self.records[-1].episode:
            raise ContractError("history episode indices must increase")
        self.records.append(rec)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "loss", "train_acc", "val_acc"])
            for r in self.records:
                w.writerow([r.episode, repr(r.loss), repr(r.train_acc), repr(r.val_acc)])

    def to_list(self) -> list[dict]:
        return [asdict(r) for r in self.records]

    @classmethod
    def from_list(cls, rows: list[dict]) -> TrainHistory:
        return cls([HistoryRecord(**r) for r in rows])


class TrainingDiverged(NumericError):
    def __init__(self, episode: int, seed: int, detail: str = ""):
        super().__init__(f"loss became non-finite at episode {episode} (episode seed {seed}) {detail}".rstrip())
        self.episode = episode
        self.seed = seed


# ---------------------------------------------------------------- checkpoints

MAGIC = b"SPCK"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model, and to continue training bit-for-bit."""

    variant: str
    params: dict[str, np.ndarray]
    config: dict
    episode: int = 0
    rng_state: dict = field(default_factory=dict)
    adam_step: int = 0
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    best_params: dict[str, np.ndarray] = field(default_factory=dict)
    best_val: float = -1.0
    best_episode: int = 0
    stale_checks: int = 0
    history: list[dict] = field(default_factory=list)
    window: list = field(default_factory=lambda: [0.0, 0.0, 0])  # running loss sum, acc sum, count
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_bundle(cls, bundle: ModelBundle, config: TrainConfig | dict) -> Checkpoint:
        cfg = config.to_dict() if isinstance(config, TrainConfig) else dict(config)
        return cls(bundle.variant, {k: t.values.copy() for k, t in bundle.named_parameters().items()},
                   cfg, meta=dict(bundle.meta))

    def to_bundle(self) -> ModelBundle:
        cfg = TrainConfig.from_dict(self.config)
        bundle = build_bundle(cfg, self.params["embed.0.weight"].shape[0])
        named = bundle.named_parameters()
        if set(named) != set(self.params):
            raise CheckpointError(
                f"checkpoint arrays {sorted(self.params)} do not match variant {self.variant!r}"
            )
        for name, t in named.items():
            if t.shape != self.params[name].shape:
                raise CheckpointError(f"{name}: shape {self.params[name].shape} != model {t.shape}")
            t.values[...] = self.params[name]
        return bundle


def _pack_arrays(groups: dict[str, dict[str, np.ndarray]]) -> tuple[dict, bytes]:
    index, blob = {}, io.BytesIO()
    for group, arrays in groups.items():
        entries = []
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            entries.append({"name": name, "shape": list(arr.shape), "offset": blob.tell()})
            blob.write(arr.tobytes())
        index[group] = entries
    return index, blob.getvalue()


def save_checkpoint(ck: Checkpoint, path: str | Path) -> None:
    """Binary layout: magic, u32 version, u64 header length, JSON header,
    little-endian float64 payload, u32 CRC32 of everything before it."""
    groups = {"params": ck.params, "adam_m": ck.adam_m, "adam_v": ck.adam_v, "best_params": ck.best_params}
    index, payload = _pack_arrays(groups)
    header = {
        "variant": ck.variant, "config": ck.config, "episode": ck.episode,
        "rng_state": ck.rng_state, "adam_step": ck.adam_step, "best_val": ck.best_val,
        "best_episode": ck.best_episode, "stale_checks": ck.stale_checks,
        "history": ck.history, "window": ck.window, "meta": ck.meta, "arrays": index,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", ck.version, len(hbytes)) + hbytes + payload
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path: str | Path, expect_variant: str | None = None) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    if len(raw) < 20 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    version, hlen = struct.unpack("<IQ", body[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(body[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    payload = body[16 + hlen:]
    groups: dict[str, dict[str, np.ndarray]] = {}
    for group, entries in header["arrays"].items():
        groups[group] = {}
        for e in entries:
            count = int(np.prod(e["shape"])) if e["shape"] else 1
            end = e["offset"] + 8 * count
            if end > len(payload):
                raise CheckpointError(f"{path}: array {e['name']} runs past end of file")
            arr = np.frombuffer(payload[e["offset"]:end], dtype="<f8").reshape(e["shape"])
            groups[group][e["name"]] = arr.astype(np.float64)
    ck = Checkpoint(
        header["variant"], groups["params"], header["config"], header["episode"],
        header["rng_state"], header["adam_step"], groups["adam_m"], groups["adam_v"],
        groups["best_params"], header["best_val"], header["best_episode"],
        header["stale_checks"], header["history"], header["window"], header["meta"], version,
    )
    if expect_variant is not None and ck.variant != expect_variant:
        raise CheckpointError(f"checkpoint variant {ck.variant!r} does not match requested {expect_variant!r}")
    return ck


# ---------------------------------------------------------------- training loop


def validation_accuracy(bundle: ModelBundle, ds: MetaDataset, cfg: TrainConfig, seeds: list[int]) -> float:
    accs = []
    for s in seeds:
        ep = sample_episode(ds, "val", cfg.n, cfg.k, cfg.q, s)
        accs.append(float(np.mean(predict(bundle, ep) == ep.query_y)))
    return float(np.mean(accs))


def _snapshot(bundle: ModelBundle) -> dict[str, np.ndarray]:
    return {k: t.values.copy() for k, t in bundle.named_parameters().items()}


def _restore(bundle: ModelBundle, params: dict[str, np.ndarray]) -> None:
    for k, t in bundle.named_parameters().items():
        t.values[...] = params[k]


def train(
    bundle: ModelBundle,
    ds: MetaDataset,
    cfg: TrainConfig,
    *,
    resume: Checkpoint | None = None,
    checkpoint_path: str | Path | None = None,
    stop_after: int | None = None,
    on_log: Callable[[HistoryRecord], None] | None = None,
) -> tuple[ModelBundle, TrainHistory]:
    """Train all parameters of ``bundle`` jointly on episodes from the train split.

    Returns the bundle with the parameters of the best validation check
    (earliest on ties). ``bundle`` itself is left at those parameters. When
    ``checkpoint_path`` is given, the latest resumable state is written at
    every validation check. ``stop_after`` halts after that many episodes in
    total, leaving a resumable checkpoint (used to test resume equivalence).
    """
    if bundle.variant != cfg.variant:
        raise ContractError(f"bundle variant {bundle.variant!r} != config variant {cfg.variant!r}")
    if ds.feature_dim != bundle.input_dim:
        raise ContractError(f"dataset has {ds.feature_dim} features, model expects {bundle.input_dim}")
    names = list(bundle.named_parameters())
    params = bundle.parameters()
    adam = dc.AdamState.for_params(params)
    ep_rng = rng_stream(cfg.seed, "episodes")
    noise_rng = rng_stream(cfg.seed, "noise")
    val_seeds = stream_seeds(cfg.seed, "val", cfg.val_episodes)
    history = TrainHistory()
    best_val, best_episode, stale = -1.0, 0, 0
    best_params = _snapshot(bundle)
    start = 0
    loss_sum, acc_sum, window = 0.0, 0.0, 0

    if resume is not None:
        if resume.variant != bundle.variant:
            raise CheckpointError(f"cannot resume {resume.variant!r} checkpoint into a {bundle.variant!r} run")
        _restore(bundle, resume.params)
        adam.step_count = resume.adam_step
        adam.first_moment = [resume.adam_m[k].copy() for k in names]
        adam.second_moment = [resume.adam_v[k].copy() for k in names]
        ep_rng.bit_generator.state = resume.rng_state["episodes"]
        noise_rng.bit_generator.state = resume.rng_state["noise"]
        history = TrainHistory.from_list(resume.history)
        best_val, best_episode, stale = resume.best_val, resume.best_episode, resume.stale_checks
        best_params = {k: v.copy() for k, v in resume.best_params.items()}
        start = resume.episode
        loss_sum, acc_sum, window = resume.window

    def state_checkpoint(episode: int) -> Checkpoint:
        ck = Checkpoint.from_bundle(bundle, cfg)
        ck.episode = episode
        ck.rng_state = {"episodes": ep_rng.bit_generator.state, "noise": noise_rng.bit_generator.state}
        ck.adam_step = adam.step_count
        ck.adam_m = dict(zip(names, adam.first_moment))
        ck.adam_v = dict(zip(names, adam.second_moment))
        ck.best_params = best_params
        ck.best_val, ck.best_episode, ck.stale_checks = best_val, best_episode, stale
        ck.history = history.to_list()
        ck.window = [loss_sum, acc_sum, window]
        return ck

    end = cfg.total_episodes if stop_after is None else min(cfg.total_episodes, stop_after)
    for i in range(start, end):
        lr = cfg.lr
        if cfg.lr_decay_every:
            lr *= cfg.lr_decay ** (i // cfg.lr_decay_every)
        ep_seed = int(ep_rng.integers(0, 2**63 - 1))
        ep = sample_episode(ds, "train", cfg.n, cfg.k, cfg.q, ep_seed)
        if cfg.noise.rate > 0:
            ep = corrupt_support_nonempty(ep, cfg.noise, noise_rng)
        bundle.zero_grad()
        loss, pred = episode_forward(bundle, ep)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(i + 1, ep_seed)
        try:
            dc.backward(loss)
        except NumericError as exc:
            raise TrainingDiverged(i + 1, ep_seed, f"({exc})") from exc
        dc.adam_step(params, adam, lr, cfg.beta1, cfg.beta2, cfg.eps)
        loss_sum += value
        acc_sum += float(np.mean(pred == ep.query_y))
        window += 1

        done = i + 1
        if done % cfg.eval_every == 0 or done == cfg.total_episodes:
            val = validation_accuracy(bundle, ds, cfg, val_seeds)
            rec = HistoryRecord(done, loss_sum / window, acc_sum / window, val)
            history.append(rec)
            loss_sum, acc_sum, window = 0.0, 0.0, 0
            if on_log is not None:
                on_log(rec)
            if val > best_val:
                best_val, best_episode, stale = val, done, 0
                best_params = _snapshot(bundle)
            else:
                stale += 1
            if checkpoint_path is not None:
                save_checkpoint(state_checkpoint(done), checkpoint_path)
            if cfg.early_stop_patience and stale >= cfg.early_stop_patience:
                log.info("early stop at episode %d (best %.4f at %d)", done, best_val, best_episode)
                break
    else:
        if stop_after is not None and end < cfg.total_episodes:
            if checkpoint_path is not None:
                save_checkpoint(state_checkpoint(end), checkpoint_path)
            return bundle, history

    _restore(bundle, best_params)
    return bundle, history


def best_checkpoint(bundle: ModelBundle, cfg: TrainConfig, history: TrainHistory) -> Checkpoint:
    ck = Checkpoint.from_bundle(bundle, cfg)
    ck.history = history.to_list()
    if history.records:
        best = max(history.records, key=lambda r: (r.val_acc, -r.episode))
        ck.best_val, ck.best_episode, ck.episode = best.val_acc, best.episode, history.records[-1].episode
    return ck
