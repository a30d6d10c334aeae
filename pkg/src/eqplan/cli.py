"""Command-line entry point: generate, train, eval, equivariance.

Exit codes: 0 success, 1 validation, 2 I/O, 3 numeric failure, 4 threshold failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import config as cf
from . import evaluate as ev
from . import model as md
from . import train as tr
from .scene import SceneValidationError, generate_synthetic, load_scenes, save_scenes

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC, EXIT_THRESHOLD = 0, 1, 2, 3, 4

log = logging.getLogger("eqplan")


def _config_epilog():
    lines = ["config keys (dotted name = default); set with --set KEY=VALUE or "
             f"env {cf.ENV_PREFIX}SECTION__KEY=VALUE:"]
    lines += [f"  {k} = {json.dumps(v)}" for k, v in cf.flat_defaults()]
    return "\n".join(lines)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON run config; flags override file values")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key, e.g. train.epochs=10")
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="eqplan", description=__doc__, epilog=_config_epilog(),
                                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic scene file", epilog=_config_epilog(),
                       formatter_class=fmt)
    _common(g)
    g.add_argument("--seed", type=int)
    g.add_argument("--scenes", type=int)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train and write checkpoint + history", epilog=_config_epilog(),
                       formatter_class=fmt)
    _common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", help="open-loop metrics report", epilog=_config_epilog(),
                       formatter_class=fmt)
    _common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="per-scene CSV report")
    e.add_argument("--summary", help="aggregate JSON record (default: <out>.summary.json)")

    q = sub.add_parser("equivariance", help="rotation/translation output-stability sweep",
                       epilog=_config_epilog(), formatter_class=fmt)
    _common(q)
    q.add_argument("--checkpoint", help="trained checkpoint; omit for random weights")
    q.add_argument("--scenes", required=True, help="scene file")
    q.add_argument("--scene-index", type=int, default=0)
    q.add_argument("--out", required=True, help="theta,deviation CSV (per-mode)")
    q.add_argument("--plan-out", help="theta,deviation CSV for the selected plan")
    q.add_argument("--break-equivariance", action="store_true",
                   help="debug: skip mean subtraction in the equivariant initialization")
    return parser


def resolve_config(args) -> cf.RunConfig:
    cfg = cf.load(args.config) if args.config else cf.RunConfig()
    cf.apply_env(cfg)
    for item in args.set:
        if "=" not in item:
            raise cf.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cf.set_key(cfg, k.strip(), v.strip())
    return cfg


def _limit_threads(n):
    if n is None:
        return
    try:
        import numba
        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
    except ImportError:
        pass


def cmd_generate(args, cfg: cf.RunConfig):
    if args.seed is not None:
        cfg.data.seed = args.seed
    if args.scenes is not None:
        cfg.data.generator.num_scenes = args.scenes
    cfg.validate()
    ds = generate_synthetic(cfg.data.generator, cfg.data.seed)
    save_scenes(ds, args.out)
    print(f"wrote {len(ds)} scenes (seed {cfg.data.seed}) to {args.out}")
    return EXIT_OK


def _load_data(path, cfg):
    return load_scenes(path, cfg.model.T_p, cfg.model.T_f)


def cmd_train(args, cfg: cf.RunConfig):
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.seed is not None:
        cfg.train.seed = args.seed
    cfg.validate()
    ds = _load_data(args.data, cfg)
    _, history = tr.train(ds, cfg.model, cfg.train, cfg.score_mode, out_dir=args.out_dir,
                          resume=args.resume, run_config=asdict(cfg))
    out = Path(args.out_dir)
    msg = f"trained {len(history)} epoch(s) on {len(ds)} scenes; checkpoint {out / 'checkpoint.npz'}"
    if history:
        msg += f"; final loss {history[-1]['loss']:.4f}"
    print(msg)
    return EXIT_OK


def _model_from_checkpoint(ck, cfg: cf.RunConfig, args):
    # only a model section the user actually changed has to agree with the checkpoint
    if cfg.model != md.ModelConfig():
        if asdict(cfg.model) != asdict(ck["model"]):
            raise cf.ConfigError(f"model config {asdict(cfg.model)} does not match checkpoint "
                                 f"{asdict(ck['model'])}")
    return ck["model"]


def cmd_eval(args, cfg: cf.RunConfig):
    ck = tr.load_checkpoint(args.checkpoint)
    mcfg = _model_from_checkpoint(ck, cfg, args)
    ab = ck["train"].ablation
    ds = load_scenes(args.data, mcfg.T_p, mcfg.T_f)
    if len(ds) == 0:
        raise SceneValidationError(f"{args.data}: no scenes to evaluate")
    rep = ev.evaluate(ds.scenes, ck["params"], mcfg, ck["score_mode"], ab.route_attraction,
                      ab.equivariant_init, r_coll=cfg.eval.r_coll, collide_with=cfg.eval.collide_with)
    rep.write_csv(args.out)
    summary_path = args.summary or str(args.out) + ".summary.json"
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(rep.summary(), fh, indent=2)
        fh.write("\n")
    s = rep.summary()
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in s.items()))
    return EXIT_OK


def cmd_equivariance(args, cfg: cf.RunConfig):
    if args.checkpoint:
        ck = tr.load_checkpoint(args.checkpoint)
        mcfg = _model_from_checkpoint(ck, cfg, args)
        params, score_mode = ck["params"], ck["score_mode"]
        ab = ck["train"].ablation
        route_on, eq_init = ab.route_attraction, ab.equivariant_init
    else:
        cfg.validate()
        mcfg, score_mode = cfg.model, cfg.score_mode
        params = md.init_params(mcfg, cfg.train.seed)
        route_on, eq_init = cfg.train.ablation.route_attraction, cfg.train.ablation.equivariant_init
    if args.break_equivariance:
        eq_init = False
    ds = load_scenes(args.scenes, mcfg.T_p, mcfg.T_f)
    if not 0 <= args.scene_index < len(ds):
        raise SceneValidationError(f"{args.scenes}: scene index {args.scene_index} out of range "
                                   f"({len(ds)} scenes)")
    e = cfg.eval
    thetas = np.arange(e.theta_start, e.theta_stop + 0.5 * e.theta_step, e.theta_step)
    shifts = ev.translation_draws(e.translations, e.translation_seed, e.translation_bound)
    curve = ev.equivariance_sweep(ds.scenes[args.scene_index], params, mcfg, thetas, shifts,
                                  score_mode, route_on, eq_init)
    curve.write_csv(args.out, "mode")
    if args.plan_out:
        curve.write_csv(args.plan_out, "plan")
    worst = curve.max_mode_deviation
    print(f"per-mode deviation: max {worst:.3e} m, mean {curve.mode_deviation.mean():.3e} m; "
          f"plan deviation: max {curve.plan_deviation.max():.3e} m; "
          f"selection flips: {int(curve.flips.sum())}")
    if not worst < e.tolerance:
        print(f"FAIL: per-mode deviation {worst:.3e} m exceeds tolerance {e.tolerance:g} m")
        return EXIT_THRESHOLD
    print("PASS")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "equivariance": cmd_equivariance}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _limit_threads(args.threads)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except tr.NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (cf.ConfigError, SceneValidationError, tr.CheckpointError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
