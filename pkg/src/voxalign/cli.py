"""Command-line entry point: ``voxalign {gen,make-pairs,train,eval,register,info}``.

Each run is described by one JSON config file (``--config``); command-line
flags override its fields. Every output is written to a temporary file and
renamed into place, so a failing command leaves no partial files behind.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import BadConfig, ShapeMismatch, VoxalignError
from .evaluation import OracleModel, evaluate_pair, rotation_sweep, translation_sweep, write_report
from .geom import TransformParams, invert
from .nets import ArchConfig, build, full_config, normalize_kind, param_count, toy_config
from .synthgen import SynthConfig, gen_phantom, make_pair, sample_rng
from .train import (
    LossConfig,
    PairStream,
    TrainConfig,
    atomic_write,
    load_checkpoint,
    read_curve,
    save_checkpoint,
    stack_pairs,
    train,
    write_curve,
)
from .volume import Volume3, downsample, read_volume, resample_rigid, worker_count, write_volume

log = logging.getLogger("voxalign")

SPLITS = {
    # strategy: (train folder, train contrast variants, test folder)
    "S1": ("A", (False, True), "B"),
    "S2": ("B", (False, True), "A"),
    "S3": ("A", (False,), "B"),
    "S4": ("B", (False,), "A"),
}

# stream ids for sample_rng so the commands never share random draws
_GEN_STREAM = 11
_PAIR_STREAM = 12
_EVAL_STREAM = 13


def folder_of(subject: int) -> str:
    """Subjects alternate between folders, so A and B never share a subject id."""
    return "A" if subject % 2 == 0 else "B"


# ---------------------------------------------------------------------------
# config handling


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise BadConfig(f"{path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise BadConfig(f"{path}: top level must be an object")
    return cfg


def resolve_arch(cfg: dict, args) -> ArchConfig:
    """Architecture from flags (``--arch``, ``--toy``) or the config ``arch`` entry."""
    arch = cfg.get("arch")
    toy = bool(getattr(args, "toy", False) or cfg.get("toy", False))
    kind = getattr(args, "arch", None)
    if kind is not None or isinstance(arch, str) or arch is None:
        kind = normalize_kind(kind or (arch if isinstance(arch, str) else "dnet"))
        return toy_config(kind, int(cfg.get("toy_size", 16))) if toy else full_config(kind)
    return ArchConfig.from_dict(arch)


def resolve_seed(cfg: dict, args) -> int:
    seed = getattr(args, "seed", None)
    return int(seed if seed is not None else cfg.get("seed", 0))


def _write_json(path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _write_jsonl(path, rows) -> None:
    atomic_write(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows).encode())


def read_jsonl(path) -> list:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def _fit_shape(v: Volume3, shape) -> Volume3:
    """Box-downsample ``v`` to ``shape`` when that is an integer reduction."""
    shape = tuple(shape)
    if v.shape == shape:
        return v
    factors = {a // b for a, b in zip(v.shape, shape) if b and a % b == 0}
    if len(factors) != 1 or any(a % b for a, b in zip(v.shape, shape)):
        raise ShapeMismatch(f"cannot bring volume of shape {v.shape} to {shape}")
    return downsample(v, factors.pop())


def split_volumes(manifest_path, split: str, role: str) -> list:
    """Load the volumes of one side of a validation strategy from a phantom manifest."""
    split = split.upper()
    if split not in SPLITS:
        raise BadConfig(f"unknown split {split!r}; choose from {sorted(SPLITS)}")
    train_folder, variants, test_folder = SPLITS[split]
    base = Path(manifest_path).parent
    rows = read_jsonl(manifest_path)
    if role == "train":
        keep = [r for r in rows if r["folder"] == train_folder and bool(r["contrast"]) in variants]
    elif role == "test":
        keep = [r for r in rows if r["folder"] == test_folder]
    else:
        raise BadConfig(f"role must be train or test, got {role!r}")
    return [read_volume(base / r["path"]) for r in keep]


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args, cfg: dict) -> int:
    gen = cfg.get("gen", {})
    n = int(args.n if args.n is not None else gen.get("n", 4))
    shape = tuple(args.shape or gen.get("shape", (16, 16, 16)))
    contrast = bool(args.contrast or gen.get("contrast", False))
    seed = resolve_seed(cfg, args)
    out = Path(args.out or cfg.get("data_dir", "data"))
    if n < 1:
        raise BadConfig("need at least one phantom")
    rows = []
    pending = []
    for subject in range(n):
        folder = folder_of(subject)
        for c in ((False, True) if contrast else (False,)):
            # the same subject stream gives the same geometry with and without contrast
            v = gen_phantom(sample_rng(seed, subject, _GEN_STREAM), shape, contrast=c)
            rel = f"{folder}/subject{subject:04d}_{'c' if c else 'nc'}.vol"
            pending.append((out / rel, v))
            rows.append({"path": rel, "subject": subject, "folder": folder, "contrast": c, "seed": seed})
    for path, v in pending:
        path.parent.mkdir(parents=True, exist_ok=True)
        write_volume(v, path)
    _write_jsonl(out / "manifest.jsonl", rows)
    print(f"wrote {len(rows)} phantoms to {out}")
    return 0


def cmd_make_pairs(args, cfg: dict) -> int:
    pcfg = cfg.get("pairs", {})
    manifest = args.manifest or pcfg.get("manifest")
    if manifest is None:
        raise BadConfig("make-pairs needs --manifest")
    split = args.split or pcfg.get("split", "S1")
    role = args.role or pcfg.get("role", "test")
    n = int(args.n if args.n is not None else pcfg.get("n", 10))
    seed = resolve_seed(cfg, args)
    synth = SynthConfig.from_dict({**cfg.get("synth", {}), "seed": seed})
    out = Path(args.out or pcfg.get("out_dir", "pairs"))
    sources = split_volumes(manifest, split, role)
    if not sources:
        raise BadConfig(f"split {split} has no {role} volumes")
    rows, pending = [], []
    for i in range(n):
        rng = sample_rng(seed, i, _PAIR_STREAM)
        v = sources[int(rng.integers(len(sources)))]
        fixed, moving, theta = make_pair(v, rng, synth)
        f_rel, m_rel = f"pair{i:05d}_fixed.vol", f"pair{i:05d}_moving.vol"
        pending += [(out / f_rel, fixed), (out / m_rel, moving)]
        rows.append({"fixed_path": f_rel, "moving_path": m_rel, "theta_r": theta.theta_r.tolist(),
                     "theta_t": theta.theta_t.tolist(), "seed": seed})
    out.mkdir(parents=True, exist_ok=True)
    for path, v in pending:
        write_volume(v, path)
    _write_jsonl(out / "pairs.jsonl", rows)
    print(f"wrote {n} pairs to {out}")
    return 0


def cmd_train(args, cfg: dict) -> int:
    tcfg = dict(cfg.get("train", {}))
    if args.iterations is not None:
        tcfg["iterations"] = args.iterations
    if args.lr is not None:
        tcfg["lr"] = args.lr
    seed = resolve_seed(cfg, args)
    tcfg.setdefault("seed", seed)
    train_cfg = TrainConfig.from_dict(tcfg)
    loss_cfg = LossConfig(**cfg.get("loss", {}))
    synth = SynthConfig.from_dict({"seed": seed, **cfg.get("synth", {})})
    out = Path(args.out or cfg.get("out_dir", "run"))
    ckpt = Path(args.checkpoint or cfg.get("checkpoint") or out / "model.ckpt")

    start, opt_state = 0, None
    if args.resume:
        model, opt_state, start = load_checkpoint(args.resume)
    else:
        model = build(resolve_arch(cfg, args), seed=seed)
    shape = model.config.input_shape

    data = cfg.get("data", {})
    manifest = args.manifest or data.get("manifest")
    sources = None
    if manifest:
        sources = [_fit_shape(v, shape) for v in split_volumes(manifest, data.get("split", "S1"), "train")]
    stream = PairStream(synth, train_cfg.batch_size, sources=sources, shape=shape, workers=worker_count(),
                        pose_jitter=data.get("pose_jitter"))
    val_set = None
    n_val = int(data.get("val_pairs", 0))
    if n_val:
        vstream = PairStream(SynthConfig.from_dict({**synth.to_dict(), "seed": synth.seed + 1}), 1,
                             sources=sources, shape=shape, pose_jitter=data.get("pose_jitter"))
        val_set = stack_pairs([vstream.sample(i) for i in range(n_val)])

    out.mkdir(parents=True, exist_ok=True)
    model, curves = train(model, stream, train_cfg, loss_cfg, start_iteration=start, opt_state=opt_state,
                          checkpoint_path=ckpt, val_set=val_set, log_every=int(cfg.get("log_every", 0)))
    save_checkpoint(model, model.opt_state, ckpt, iteration=max(start, train_cfg.iterations))
    train_curve, val_curve = out / "train_curve.csv", out / "val_curve.csv"
    prior_train, prior_val = [], []
    if args.resume:
        # keep the history up to the resume point so the files match an uninterrupted run
        if train_curve.exists():
            prior_train = [r for r in read_curve(train_curve) if r.iteration <= start]
        if val_curve.exists():
            prior_val = [r for r in read_curve(val_curve) if r.iteration <= start]
    write_curve(prior_train + curves.train, train_curve)
    write_curve(prior_val + curves.val, val_curve)
    last = curves.train[-1] if curves.train else None
    if last is not None:
        print(f"iteration {last.iteration}: loss {last.loss:.6f} te {last.te_mm:.4f} mm re {last.re_rad:.4f} rad")
    print(f"checkpoint {ckpt}")
    return 0


def _load_model(args, cfg):
    if args.oracle:
        return OracleModel()
    path = args.checkpoint or cfg.get("checkpoint")
    if path is None:
        raise BadConfig("need --checkpoint or --oracle")
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, _, _ = load_checkpoint(path)
    return model


def cmd_eval(args, cfg: dict) -> int:
    ecfg = cfg.get("eval", {})
    model = _load_model(args, cfg)
    seed = resolve_seed(cfg, args)
    if isinstance(model, OracleModel):
        shape = tuple(args.shape or ecfg.get("shape", (32, 32, 32)))
    else:
        shape = model.config.input_shape
    manifest = args.manifest or ecfg.get("manifest")
    if manifest:
        volumes = [_fit_shape(v, shape) for v in split_volumes(manifest, ecfg.get("split", "S1"), "test")]
    else:
        n = int(args.n if args.n is not None else ecfg.get("n", 2))
        volumes = [gen_phantom(sample_rng(seed, i, _EVAL_STREAM), shape) for i in range(n)]
    tau = float(ecfg.get("dsc_tau", 0.3))
    rot = rotation_sweep(model, volumes, dsc_tau=tau)
    trans = translation_sweep(model, volumes, dsc_tau=tau)
    pair_records = None
    pairs = args.pairs or ecfg.get("pairs")
    if pairs:
        base = Path(pairs).parent
        pair_records = []
        for i, row in enumerate(read_jsonl(pairs)):
            gt = TransformParams(np.asarray(row["theta_r"]), np.asarray(row["theta_t"]))
            f = read_volume(base / row["fixed_path"])
            m = read_volume(base / row["moving_path"])
            pair_records.append(evaluate_pair(model, f, m, gt, tau, f"pair-{i:05d}"))
    # everything is computed before the first file is written
    out = Path(args.out or ecfg.get("out_dir", "eval"))
    out.mkdir(parents=True, exist_ok=True)
    summaries = {"rotation": write_report(rot, out / "rotation_sweep.csv"),
                 "translation": write_report(trans, out / "translation_sweep.csv")}
    if pair_records:
        summaries["pairs"] = write_report(pair_records, out / "pairs.csv")
    for name, s in summaries.items():
        print(f"{name}: te {s['te_mm']['mean']:.4f} mm  re {s['re_deg']['mean']:.2f} deg  dsc {s['dsc']['mean']:.4f}")
    return 0


def cmd_register(args, cfg: dict) -> int:
    model = _load_model(args, cfg)
    fixed = read_volume(args.fixed)
    moving = read_volume(args.moving)
    if fixed.shape != moving.shape:
        raise ShapeMismatch(f"fixed {fixed.shape} and moving {moving.shape} differ")
    pred = model.predict(fixed, moving)
    aligned = resample_rigid(moving, invert(pred.to_transform()), out_shape=fixed.shape)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_volume(aligned, out.with_suffix(".vol"))
    _write_json(out.with_suffix(".json"), {"theta_r": pred.theta_r.tolist(), "theta_t": pred.theta_t.tolist()})
    print(f"wrote {out.with_suffix('.json')} and {out.with_suffix('.vol')}")
    return 0


def cmd_info(args, cfg: dict) -> int:
    if args.checkpoint:
        model, _, it = load_checkpoint(args.checkpoint)
        arch = model.config
        count = param_count(model)
        extra = {"iteration": it}
    else:
        arch = resolve_arch(cfg, args)
        count = param_count(build(arch, seed=resolve_seed(cfg, args)))
        extra = {}
    print(json.dumps({"param_count": count, "arch": arch.to_dict(), **extra}, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true")

    arch = argparse.ArgumentParser(add_help=False)
    arch.add_argument("--arch", choices=["me", "se", "sed", "snl-sed", "dnet"], type=str.lower)
    arch.add_argument("--toy", action="store_true", help="use the 16^3 toy preset")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--checkpoint", help="trained model checkpoint")
    model.add_argument("--oracle", action="store_true", help="ground-truth model for harness validation")

    p = argparse.ArgumentParser(prog="voxalign", description="Rigid 3D volume registration by regression.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate phantom volumes and a manifest")
    g.add_argument("--out", help="output directory")
    g.add_argument("--n", type=int, help="number of subjects")
    g.add_argument("--shape", type=int, nargs=3)
    g.add_argument("--contrast", action="store_true", help="also write a contrast-enhanced scan per subject")
    g.set_defaults(func=cmd_gen)

    mp = sub.add_parser("make-pairs", parents=[common], help="synthesize registration pairs from a manifest")
    mp.add_argument("--manifest")
    mp.add_argument("--split", choices=sorted(SPLITS), type=str.upper)
    mp.add_argument("--role", choices=["train", "test"])
    mp.add_argument("--n", type=int)
    mp.add_argument("--out")
    mp.set_defaults(func=cmd_make_pairs)

    t = sub.add_parser("train", parents=[common, arch], help="train a model")
    t.add_argument("--out", help="run directory for checkpoint and curves")
    t.add_argument("--checkpoint", help="checkpoint path (default OUT/model.ckpt)")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--manifest", help="train on the volumes of a phantom manifest")
    t.add_argument("--iterations", type=int)
    t.add_argument("--lr", type=float)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common, model], help="run the sweeps and write reports")
    e.add_argument("--out")
    e.add_argument("--manifest", help="evaluate on the test side of a phantom manifest")
    e.add_argument("--pairs", help="pair manifest (JSONL) to score as well")
    e.add_argument("--n", type=int, help="phantoms to generate when no manifest is given")
    e.add_argument("--shape", type=int, nargs=3, help="phantom shape for --oracle")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("register", parents=[common, model], help="register one moving volume to a fixed one")
    r.add_argument("fixed")
    r.add_argument("moving")
    r.add_argument("--out", required=True, help="output prefix; writes PREFIX.json and PREFIX.vol")
    r.set_defaults(func=cmd_register)

    i = sub.add_parser("info", parents=[common, arch], help="print parameter count and config")
    i.add_argument("--checkpoint")
    i.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (VoxalignError, OSError, KeyError, ValueError) as exc:
        print(f"voxalign {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
