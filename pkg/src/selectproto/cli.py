"""Command-line entry point: ``selectproto {gen,make-meta,train,eval-grid,analyze}``.

Every command resolves its configuration from defaults, an optional JSON file
of flat dotted keys (``--config``) and explicit flags, in that order of
precedence, and writes the resolved snapshot as ``config.json`` next to its
outputs. Re-running a command with ``--config <run>/config.json`` reproduces
its numeric outputs byte for byte.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

from . import data as D
from .errors import ContractError, NumericError, SelectProtoError
from .evaluation import (evaluate, rank_features, repeat_runs, weight_histogram,
                         write_grid_csv)
from .model import DISTANCES, VARIANTS
from .training import (TrainConfig, TrainingDiverged, best_checkpoint, build_bundle,
                       load_checkpoint, save_checkpoint, stream_seeds, train)

log = logging.getLogger("selectproto")

OUT_ENV = "SELECTPROTO_OUT"
EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class InputError(SelectProtoError):
    """Bad flags, config file or paths."""


# ---------------------------------------------------------------- option tables


def _float_list(s) -> list[float]:
    if isinstance(s, (list, tuple)):
        return [float(v) for v in s]
    return [float(v) for v in str(s).split(",") if v.strip()]


def _int_list(s) -> list[int]:
    if isinstance(s, (list, tuple)):
        return [int(v) for v in s]
    return [int(v) for v in str(s).split(",") if v.strip()]


def _str_list(s) -> list[str]:
    if isinstance(s, (list, tuple)):
        return [str(v) for v in s]
    return [v.strip() for v in str(s).split(",") if v.strip()]


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    if str(s).lower() in ("1", "true", "yes", "on"):
        return True
    if str(s).lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _auto_bool(s) -> bool | str:
    return "auto" if str(s).lower() == "auto" else _bool(s)


@dataclass(frozen=True)
class Opt:
    key: str
    flag: str
    type: Callable[[Any], Any]
    default: Any
    help: str
    choices: Sequence[str] | None = None


_gen = D.GenConfig()
GEN_OPTS = [
    Opt("gen.classes", "--classes", int, _gen.num_classes, "number of synthetic classes"),
    Opt("gen.per_class", "--per-class", int, _gen.samples_per_class, "samples per class"),
    Opt("gen.informative", "--informative", int, _gen.informative_dims, "informative feature count"),
    Opt("gen.irrelevant", "--irrelevant", int, _gen.irrelevant_dims, "irrelevant feature count d"),
    Opt("gen.scale", "--scale", float, _gen.class_mean_scale, "class mean scale"),
    Opt("gen.std", "--std", float, _gen.within_class_std, "within-class standard deviation"),
]
DATA_OPTS = [
    Opt("data.path", "--data", str, None,
        "synthetic CSV or meta-dataset manifest; generated from the gen.* keys when unset"),
    Opt("data.split", "--split", _float_list, [0.8, 0.1, 0.1], "train,val,test ratios"),
    Opt("data.standardize", "--standardize", _auto_bool, "auto",
        "standardize features with train-split statistics; auto means on for a manifest, off for a synthetic CSV"),
] + GEN_OPTS

_tc = TrainConfig()
MODEL_OPTS = [
    Opt("train.variant", "--variant", str, _tc.variant, "model variant", VARIANTS),
    Opt("train.n", "--n", int, _tc.n, "ways per episode"),
    Opt("train.k", "--k", int, _tc.k, "shots per class"),
    Opt("train.q", "--q", int, _tc.q, "queries per class"),
    Opt("train.noise", "--noise", float, _tc.noise.rate, "support label noise rate during training"),
    Opt("train.noise_mode", "--noise-mode", str, _tc.noise.mode,
        "draw the corrupted label from all classes or only the other classes", D.NOISE_MODES),
    Opt("train.episodes", "--episodes", int, _tc.total_episodes, "training episodes"),
    Opt("train.lr", "--lr", float, _tc.lr, "Adam learning rate"),
    Opt("train.beta1", "--beta1", float, _tc.beta1, "Adam beta1"),
    Opt("train.beta2", "--beta2", float, _tc.beta2, "Adam beta2"),
    Opt("train.adam_eps", "--adam-eps", float, _tc.eps, "Adam epsilon"),
    Opt("train.eval_every", "--eval-every", int, _tc.eval_every, "episodes between validation checks"),
    Opt("train.val_episodes", "--val-episodes", int, _tc.val_episodes, "episodes per validation check"),
    Opt("train.patience", "--patience", int, _tc.early_stop_patience,
        "validation checks without improvement before stopping (0 disables)"),
    Opt("train.lr_decay_every", "--lr-decay-every", int, _tc.lr_decay_every,
        "multiply lr by --lr-decay every this many episodes (0 disables)"),
    Opt("train.lr_decay", "--lr-decay", float, _tc.lr_decay, "step decay factor"),
    Opt("train.hidden", "--hidden", _int_list, list(_tc.hidden), "embedding hidden layer sizes"),
    Opt("train.embedding_dim", "--embedding-dim", int, _tc.embedding_dim, "embedding size"),
    Opt("train.weight_hidden", "--weight-hidden", int, _tc.weight_hidden, "weighting net hidden size"),
    Opt("train.distance", "--distance", str, _tc.distance, "prototype distance", DISTANCES),
    Opt("train.normalize_weights", "--normalize-weights", _bool, _tc.normalize_weights,
        "divide weighted prototypes by the weight sum instead of the shot count"),
]
EVAL_OPTS = [
    Opt("eval.episodes", "--test-episodes", int, 600, "test episodes per evaluation (0 skips)"),
    Opt("eval.noisy", "--noisy-eval", _bool, False,
        "corrupt test supports at the training noise rate as well"),
]
COMMON_OPTS = [
    Opt("seed", "--seed", int, 0, "master seed"),
]

COMMANDS: dict[str, list[Opt]] = {
    "gen": GEN_OPTS + COMMON_OPTS,
    "make-meta": [
        Opt("meta.manifest", "manifest", str, None, "input manifest JSON"),
        Opt("meta.min_per_class", "--min-per-class", int, 60, "minimum samples per class"),
    ],
    "train": DATA_OPTS + MODEL_OPTS + EVAL_OPTS + COMMON_OPTS + [
        Opt("train.resume", "--resume", str, None, "resume from a training state checkpoint"),
        Opt("train.stop_after", "--stop-after", int, None,
            "stop after this many episodes, leaving a resumable state.ckpt"),
    ],
    "eval-grid": DATA_OPTS + MODEL_OPTS + EVAL_OPTS + COMMON_OPTS + [
        Opt("grid.noise", "--grid-noise", _float_list, [0.0, 0.1, 0.3, 0.5], "noise rates (rows)"),
        Opt("grid.dims", "--grid-dims", _int_list, [],
            "irrelevant dimensions (rows); replaces --irrelevant per cell"),
        Opt("grid.variants", "--grid-variants", _str_list, list(VARIANTS), "variants (columns)"),
        Opt("grid.repetitions", "--repetitions", int, 10, "runs per cell, seeds seed+0..seed+R-1"),
        Opt("jobs", "--jobs", int, 1, "parallel runs (1 keeps everything in-process)"),
    ],
    "analyze": DATA_OPTS + COMMON_OPTS + [
        Opt("analyze.checkpoint", "checkpoint", str, None, "trained checkpoint"),
        Opt("analyze.rank_features", "--rank-features", _bool, False, "export the feature ranking"),
        Opt("analyze.weight_hist", "--weight-hist", _bool, False, "export the sample weight histogram"),
        Opt("analyze.noise", "--noise", float, 0.3, "noise rate for --weight-hist"),
        Opt("analyze.noise_mode", "--noise-mode", str, "all", "noise mode for --weight-hist",
            D.NOISE_MODES),
        Opt("analyze.episodes", "--episodes", int, 200, "episodes sampled for --weight-hist"),
        Opt("analyze.split", "--analysis-split", str, "train", "split sampled for --weight-hist",
            D.SPLITS),
        Opt("analyze.bins", "--bins", int, 10, "histogram buckets on [0, 1]"),
    ],
}

HELP = {
    "gen": "generate a synthetic dataset (CSV plus ground-truth sidecar)",
    "make-meta": "load a CSV meta-dataset manifest and apply the minimum class size filter",
    "train": "train one model and write checkpoint, history and test report",
    "eval-grid": "repeat train+evaluate over a noise or dimension grid",
    "analyze": "export the feature ranking or sample weight histogram of a checkpoint",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selectproto", description="Prototypical networks with feature selection and sample weighting.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress (default: False)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        for o in opts:
            text = f"{o.help} (default: {o.default}; key {o.key})"
            if not o.flag.startswith("-"):
                p.add_argument(o.flag, nargs="?", default=None, help=f"{o.help} (key {o.key})")
                continue
            if o.type in (_bool, _auto_bool):
                p.add_argument(o.flag, dest=o.key, action=argparse.BooleanOptionalAction,
                               default=None, help=text)
            else:
                p.add_argument(o.flag, dest=o.key, type=str, default=None, metavar=o.key.split(".")[-1].upper(),
                               choices=None, help=text)
        p.add_argument("--config", default=None, help="JSON file of dotted keys (default: None)")
        p.add_argument("--out", default=None,
                       help=f"output root for timestamped run dirs (default: ${OUT_ENV} or ./runs)")
        p.add_argument("--run-dir", default=None, help="exact output directory (default: None)")
    return parser


# ---------------------------------------------------------------- config resolution


def _coerce(o: Opt, value):
    if value is None:
        return None
    try:
        v = o.type(value)
    except (TypeError, ValueError) as exc:
        raise InputError(f"{o.key}: cannot parse {value!r} ({exc})") from exc
    if o.choices is not None and v not in o.choices:
        raise InputError(f"{o.key}: {v!r} is not one of {list(o.choices)}")
    return v


def resolve_config(command: str, args: argparse.Namespace, base: dict | None = None) -> dict:
    """Defaults, then ``base``, then the ``--config`` file, then explicit flags."""
    opts = {o.key: o for o in COMMANDS[command]}
    cfg = {k: o.default for k, o in opts.items()}
    layers = [base or {}]
    if args.config:
        try:
            layers.append(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(layers[-1], dict):
            raise InputError(f"{args.config}: expected a JSON object of dotted keys")
        unknown = sorted(set(layers[-1]) - set(opts))
        if unknown:
            raise InputError(f"{args.config}: unknown keys {unknown} for command {command!r}")
    for layer in layers:
        for k, v in layer.items():
            if k in opts:
                cfg[k] = _coerce(opts[k], v)
    for o in opts.values():
        attr = o.key if o.flag.startswith("-") else o.flag
        v = getattr(args, attr, None)
        if v is not None:
            cfg[o.key] = _coerce(o, v)
    return cfg


def run_dir_for(command: str, args: argparse.Namespace) -> Path:
    if args.run_dir:
        path = Path(args.run_dir)
    else:
        root = Path(args.out or os.environ.get(OUT_ENV) or "runs")
        stem = f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
        path, i = root / stem, 1
        while path.exists():
            path, i = root / f"{stem}-{i}", i + 1
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise InputError(f"output directory {path} is not writable")
    return path


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- dataset plumbing


def gen_config(cfg: dict, seed: int, irrelevant: int | None = None) -> D.GenConfig:
    return D.GenConfig(
        num_classes=cfg["gen.classes"], samples_per_class=cfg["gen.per_class"],
        informative_dims=cfg["gen.informative"],
        irrelevant_dims=cfg["gen.irrelevant"] if irrelevant is None else irrelevant,
        class_mean_scale=cfg["gen.scale"], within_class_std=cfg["gen.std"],
        seed=stream_seeds(seed, "data", 1)[0],
    )


@dataclass
class DatasetSpec:
    """Picklable recipe that rebuilds the dataset of a run from its seed."""

    cfg: dict
    irrelevant: int | None = None

    def __call__(self, seed: int) -> D.MetaDataset:
        return load_dataset(self.cfg, seed, self.irrelevant)


def load_dataset(cfg: dict, seed: int, irrelevant: int | None = None) -> D.MetaDataset:
    data_seed = stream_seeds(seed, "data", 1)[0]
    path = cfg.get("data.path")
    if path:
        p = Path(path)
        if not p.exists():
            raise InputError(f"dataset {p} does not exist")
        ds = D.load_meta_csv(p) if p.suffix == ".json" else D.read_synthetic(p)
        if irrelevant:
            ds = D.pad_dataset(ds, irrelevant, data_seed)
    else:
        ds = D.generate_synthetic(gen_config(cfg, seed, irrelevant))
    ds = D.split_classes(ds, tuple(cfg["data.split"]), data_seed)
    std = cfg["data.standardize"]
    if std is True or (std == "auto" and path and Path(path).suffix == ".json"):
        ds = D.standardize(ds)
    return ds


def train_config(cfg: dict, variant: str | None = None, noise: float | None = None) -> TrainConfig:
    episodes = cfg["train.episodes"]
    return TrainConfig(
        variant=variant or cfg["train.variant"], n=cfg["train.n"], k=cfg["train.k"], q=cfg["train.q"],
        noise=D.NoiseConfig(cfg["train.noise"] if noise is None else noise, cfg["train.noise_mode"]),
        total_episodes=episodes, lr=cfg["train.lr"], beta1=cfg["train.beta1"],
        beta2=cfg["train.beta2"], eps=cfg["train.adam_eps"],
        eval_every=min(cfg["train.eval_every"], episodes), val_episodes=cfg["train.val_episodes"],
        seed=cfg["seed"], early_stop_patience=cfg["train.patience"],
        lr_decay_every=cfg["train.lr_decay_every"], lr_decay=cfg["train.lr_decay"],
        hidden=tuple(cfg["train.hidden"]), embedding_dim=cfg["train.embedding_dim"],
        weight_hidden=cfg["train.weight_hidden"], distance=cfg["train.distance"],
        normalize_weights=cfg["train.normalize_weights"],
    )


def _data_keys(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k.startswith(("data.", "gen.")) or k == "seed"}


# ---------------------------------------------------------------- commands


def cmd_gen(cfg: dict, out: Path) -> int:
    gc = gen_config(cfg, cfg["seed"])
    ds = D.generate_synthetic(gc)
    try:
        csv_path, side = D.write_synthetic(ds, gc, out)
    except OSError as exc:
        raise InputError(f"cannot write dataset to {out}: {exc}") from exc
    t = ds.tables[0]
    print(f"classes={t.num_classes} rows={t.features.shape[0]} dims={t.feature_dim} "
          f"informative={gc.informative_dims} path={csv_path}")
    return EXIT_OK


def cmd_make_meta(cfg: dict, out: Path) -> int:
    if not cfg["meta.manifest"]:
        raise InputError("make-meta needs a manifest path")
    ds = D.load_meta_csv(cfg["meta.manifest"])
    filtered, report = D.filter_min_class(ds, cfg["meta.min_per_class"])
    if not filtered.tables:
        log.warning("no task survives the filter (min_per_class=%d)", cfg["meta.min_per_class"])
    manifest = D.save_meta_csv(filtered, out / "meta")
    write_json(out / "report.json", asdict(report))
    print(f"tasks in={len(ds.tables)} kept={len(report.kept)} dropped={len(report.dropped)} "
          f"reduced={len(report.reduced)} manifest={manifest}")
    return EXIT_OK


def cmd_train(cfg: dict, out: Path) -> int:
    tc = train_config(cfg)
    ds = load_dataset(cfg, cfg["seed"])
    bundle = build_bundle(tc, ds.feature_dim)
    resume = None
    if cfg["train.resume"]:
        resume = load_checkpoint(cfg["train.resume"], expect_variant=tc.variant)
        if not resume.rng_state:
            raise InputError(f"{cfg['train.resume']} holds final weights, not a resumable training state")
        mine = {k: v for k, v in tc.to_dict().items() if k != "total_episodes"}
        theirs = {k: v for k, v in resume.config.items() if k != "total_episodes"}
        if mine != theirs:
            diff = sorted(k for k in mine if mine[k] != theirs.get(k))
            raise InputError(f"resume checkpoint was trained with different settings: {diff}")

    def on_log(rec):
        log.info("episode %d loss %.4f train_acc %.4f val_acc %.4f",
                 rec.episode, rec.loss, rec.train_acc, rec.val_acc)

    bundle, history = train(bundle, ds, tc, resume=resume, checkpoint_path=out / "state.ckpt",
                            stop_after=cfg["train.stop_after"], on_log=on_log)
    history.to_csv(out / "history.csv")
    ck = best_checkpoint(bundle, tc, history)
    ck.meta["data"] = _data_keys(cfg)
    save_checkpoint(ck, out / "best.ckpt")
    summary = {"variant": tc.variant, "best_val": ck.best_val, "best_episode": ck.best_episode,
               "logged": len(history)}
    if cfg["eval.episodes"] > 0 and not (cfg["train.stop_after"] and cfg["train.stop_after"] < tc.total_episodes):
        noise = tc.noise if cfg["eval.noisy"] else None
        report = evaluate(bundle, ds, "test", tc.n, tc.k, tc.q, cfg["eval.episodes"], tc.seed, noise)
        report.to_json(out / "report.json")
        summary.update(test_mean=report.mean, test_std=report.std)
    write_json(out / "summary.json", summary)
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in summary.items()))
    return EXIT_OK


def cmd_eval_grid(cfg: dict, out: Path) -> int:
    noises = cfg["grid.noise"] or [cfg["train.noise"]]
    dims = cfg["grid.dims"] or [None]
    variants = cfg["grid.variants"]
    for v in variants:
        if v not in VARIANTS:
            raise InputError(f"grid.variants: unknown variant {v!r}")
    if cfg["grid.repetitions"] < 1:
        raise InputError("grid.repetitions must be >= 1")
    rows, cells, raw = [], {}, []
    failures = 0
    for d in dims:
        for p in noises:
            if d is None:
                row = p
            elif len(noises) == 1:
                row = d
            else:
                row = f"{p}/{d}"
            rows.append(row)
            tc = train_config(cfg, noise=p)
            test_noise = tc.noise if cfg["eval.noisy"] else None
            summary = repeat_runs(tc, DatasetSpec(cfg, d), cfg["grid.repetitions"], variants,
                                  test_episodes=cfg["eval.episodes"], test_noise=test_noise,
                                  jobs=cfg["jobs"])
            for v in variants:
                cells[(row, v)] = summary.cell(v)
            failures += len(summary.failures())
            raw.append({"row": row, "noise": p, "irrelevant": d, **summary.to_dict()})
            log.info("row %s: %s", row, {v: cells[(row, v)] for v in variants})
    if len(dims) > 1 or dims[0] is not None:
        label = "dims" if len(noises) == 1 else "noise/dims"
    else:
        label = "noise"
    write_grid_csv(out / "grid.csv", label, rows, variants, cells)
    write_json(out / "report.json", {"rows": raw})
    if failures:
        log.warning("%d run(s) failed; their cells are marked NA", failures)
    print((out / "grid.csv").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def cmd_analyze(cfg: dict, out: Path) -> int:
    if not (cfg["analyze.rank_features"] or cfg["analyze.weight_hist"]):
        raise InputError("analyze needs --rank-features and/or --weight-hist")
    ck = load_checkpoint(cfg["analyze.checkpoint"])
    bundle = ck.to_bundle()
    result = {"variant": ck.variant}
    ds = None
    if cfg["analyze.weight_hist"] or cfg["data.path"] or "data" in ck.meta:
        ds = load_dataset(cfg, cfg["seed"])
        if ds.feature_dim != bundle.input_dim:
            raise InputError(f"dataset has {ds.feature_dim} features, checkpoint expects {bundle.input_dim}")
    if cfg["analyze.rank_features"]:
        if bundle.selector is None:
            raise ContractError(f"variant {ck.variant!r} has no feature selection layer (theta)")
        ranking = rank_features(bundle, ds.informative if ds is not None else None)
        ranking.to_csv(out / "ranking.csv")
        result["recall_at_m"] = ranking.recall_at_m
    if cfg["analyze.weight_hist"]:
        if bundle.weighter is None:
            raise ContractError(f"variant {ck.variant!r} has no sample weighting net (WeightNet)")
        tc = TrainConfig.from_dict(ck.config)
        noise = D.NoiseConfig(cfg["analyze.noise"], cfg["analyze.noise_mode"])
        sep = weight_histogram(bundle, ds, noise, cfg["analyze.episodes"], cfg["seed"],
                               split=cfg["analyze.split"], n=tc.n, k=tc.k, q=tc.q,
                               bins=cfg["analyze.bins"])
        sep.to_csv(out / "weights.csv")
        result.update(clean_mean=sep.clean_mean, corrupted_mean=sep.corrupted_mean,
                      separation=sep.separation, clean_count=len(sep.clean),
                      corrupted_count=len(sep.corrupted))
    write_json(out / "analysis.json", result)
    print(" ".join(f"{k}={v}" for k, v in result.items()))
    return EXIT_OK


RUNNERS = {"gen": cmd_gen, "make-meta": cmd_make_meta, "train": cmd_train,
           "eval-grid": cmd_eval_grid, "analyze": cmd_analyze}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args.command, args)
        if args.command == "analyze":
            # data settings default to those recorded by the training run
            if not cfg["analyze.checkpoint"]:
                raise InputError("analyze needs a checkpoint path")
            base = load_checkpoint(cfg["analyze.checkpoint"]).meta.get("data")
            cfg = resolve_config(args.command, args, base)
        out = run_dir_for(args.command, args)
        write_json(out / "config.json", cfg)
        return RUNNERS[args.command](cfg, out)
    except TrainingDiverged as exc:
        print(f"error: {exc} (replay with episode seed {exc.seed})", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SelectProtoError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
