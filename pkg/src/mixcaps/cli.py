"""Command-line entry point: ``mixcaps <subcommand> ...``.

Every subcommand writes JSON lines to stdout.  Failures print one JSON line
``{"error": <class name>, "message": ...}`` to stderr and exit with the
error class's code.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from mixcaps import tensor as T
from mixcaps.checkpoint import load_checkpoint, save_checkpoint
from mixcaps.data import GeneratorParams, generate_dataset, read_dataset, write_dataset
from mixcaps.em import responsibilities, routing_as_moe_report
from mixcaps.errors import ConfigError, GradientCheckError, MixcapsError
from mixcaps.gradcheck import gradient_check
from mixcaps.presets import PRESETS, build_preset
from mixcaps.train import (
    TrainConfig,
    bootstrap_evaluate,
    evaluate,
    gate_correlation,
    noise_sweep,
    parse_config_text,
    split_validation,
    train,
)


def _emit(rec: dict, stream=None) -> None:
    stream = stream or sys.stdout
    stream.write(json.dumps(rec, default=_jsonable) + "\n")
    stream.flush()


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialise {type(x).__name__}")


def _pairs(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _train_config(args) -> TrainConfig:
    mapping = {}
    if getattr(args, "config", None):
        mapping.update(parse_config_text(Path(args.config).read_text()))
    mapping.update(_pairs(args.set))
    return TrainConfig.from_mapping(mapping)


def _generator_params(items) -> GeneratorParams:
    base = GeneratorParams().to_dict()
    for k, v in _pairs(items).items():
        if k not in base:
            raise ConfigError(f"unknown generator parameter {k!r}")
        try:
            base[k] = json.loads(v) if isinstance(base[k], (list, tuple)) else type(base[k])(v)
        except ValueError as exc:
            raise ConfigError(f"bad value for {k}: {v!r}") from exc
    return GeneratorParams.from_dict(base)


def cmd_generate(args) -> None:
    params = _generator_params(args.set)
    ds = generate_dataset(args.n, seed=args.seed, params=params)
    write_dataset(ds, args.out)
    _emit({"event": "generate", "path": str(args.out), "count": len(ds), "seed": args.seed,
           "malignant": int(ds.labels.sum()), "large_regime": int(ds.regimes.sum())})


def cmd_train(args) -> None:
    cfg = _train_config(args)
    ds = read_dataset(args.data)
    train_set, val_set = split_validation(ds, cfg.validation_fraction, np.random.default_rng(cfg.seed))
    res = train(train_set, cfg, validation=val_set, on_log=_emit)
    save_checkpoint(res.checkpoint, args.out)
    _emit({"event": "saved", "path": str(args.out), "steps": res.checkpoint.step})


def cmd_evaluate(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    rep = evaluate(ckpt, read_dataset(args.data), noise_std=args.noise_std, noise_seed=args.noise_seed,
                   threshold=args.threshold)
    _emit({"event": "metrics", **rep.to_dict()})


def cmd_bootstrap(args) -> None:
    cfg = _train_config(args)
    res = bootstrap_evaluate(read_dataset(args.data), cfg, iterations=args.iterations, on_log=_emit)
    _emit({"event": "bootstrap_summary", **res.report.to_dict()})


def cmd_gate_corr(args) -> None:
    out = gate_correlation(load_checkpoint(args.checkpoint), read_dataset(args.data))
    _emit({"event": "gate_correlation", **out})


def cmd_noise_sweep(args) -> None:
    stds = [float(s) for s in args.stds.split(",") if s.strip()]
    for rec in noise_sweep(load_checkpoint(args.checkpoint), read_dataset(args.data), stds, seed=args.seed):
        _emit({"event": "noise", **rec})


def cmd_analyze_routing(args) -> None:
    model = load_checkpoint(args.checkpoint).model
    ds = read_dataset(args.data)
    n = len(ds) if args.limit is None else min(args.limit, len(ds))
    ds = ds.subset(np.arange(n))
    side = ds.side_features() if model.experts[0].config.side_feature_len else None
    out = model.forward(ds.patches, side)
    ok = True
    for k, e in enumerate(out.experts):
        rep = routing_as_moe_report(e.routing, include_couplings=args.couplings)
        ok &= rep.ok
        for rec in rep.records:
            _emit({"expert": k, **rec})
        _emit({"record": "routing_summary", "expert": k, "ok": rep.ok,
               "max_normalisation_error": rep.max_normalisation_error,
               "max_replay_error": rep.max_replay_error})
    if out.g is not None:
        expert_o = np.stack([e.o.data for e in out.experts])
        for r in responsibilities(out.g.data, expert_o, ds.labels, literal=args.literal):
            _emit(r.to_dict())
    if not ok:
        raise MixcapsError("routing trace failed its normalisation or replay checks")


def cmd_gradcheck(args) -> None:
    T.set_default_dtype(np.float64)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint).model
    else:
        model = build_preset(args.preset, seed=args.seed)
    cfg = model.experts[0].config
    rng = np.random.default_rng(args.seed)
    patches = rng.uniform(size=(args.batch, cfg.patch_size, cfg.patch_size, cfg.channels))
    labels = np.arange(args.batch) % cfg.num_classes
    side = rng.uniform(size=(args.batch, cfg.side_feature_len)) if cfg.side_feature_len else None
    batch = (patches, labels) if side is None else (patches, labels, side)
    rep = gradient_check(model, batch, h=args.h, tol=args.tol, seed=args.seed, raise_on_fail=False)
    for b in rep.blocks:
        _emit({"event": "gradcheck_block", **b.to_dict()})
    summary = rep.to_dict()
    summary.pop("blocks")
    summary["parameters"] = T.count_parameters(model.parameters().values())
    _emit({"event": "gradcheck", **summary})
    if not rep.passed:
        raise GradientCheckError(f"blocks over tolerance: {', '.join(rep.failing)}", report=rep)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixcaps", description="Capsule-network mixture of experts")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key=value training config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    g = sub.add_parser("generate", help="write a synthetic dataset file")
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="generator parameter")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model and save a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    with_config(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="metrics of a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--noise-std", type=float, default=0.0)
    e.add_argument("--noise-seed", type=int, default=0)
    e.add_argument("--threshold", type=float, default=0.5)
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bootstrap", help="bootstrap train/evaluate with confidence intervals")
    b.add_argument("--data", required=True)
    b.add_argument("--iterations", type=int)
    with_config(b)
    b.set_defaults(func=cmd_bootstrap)

    c = sub.add_parser("gate-corr", help="correlate gate weight with volume and diameter")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True)
    c.set_defaults(func=cmd_gate_corr)

    n = sub.add_parser("noise-sweep", help="accuracy under additive input noise")
    n.add_argument("--checkpoint", required=True)
    n.add_argument("--data", required=True)
    n.add_argument("--stds", default="0.01,0.1,0.5")
    n.add_argument("--seed", type=int, default=0)
    n.set_defaults(func=cmd_noise_sweep)

    a = sub.add_parser("analyze-routing", help="routing trace audit and expert responsibilities")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--limit", type=int, default=8)
    a.add_argument("--literal", action="store_true", help="score experts by malignant output only")
    a.add_argument("--couplings", action="store_true", help="include coupling matrices in records")
    a.set_defaults(func=cmd_analyze_routing)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every parameter block")
    gc.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    gc.add_argument("--checkpoint")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--batch", type=int, default=2)
    gc.add_argument("--h", type=float, default=1e-5)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except MixcapsError as exc:
        _emit({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        return exc.exit_code
    except OSError as exc:
        _emit({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
