"""Command-line entry point: ``fairtl <command> ...``.

Exit codes: 0 success, 1 validation error (bad config, file or argument),
2 runtime failure, 3 grid finished with some failed cells.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import harness
from .checkpoint import CheckpointError, read_checkpoint, save_checkpoint
from .data import load_dataset, strip_labels
from .gan import Stage
from .metrics import MetricError
from .numerics import Rng, derive_seed
from .pipeline import debias_pretrained, fixed_noise_gallery, pretrain

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3
_METHODS = {"fairtl": Stage.FAIRTL, "fairtlpp": Stage.FAIRTLPP}

log = logging.getLogger("fairtl")


class UsageError(ValueError):
    pass


def _config(args) -> harness.RunConfig:
    cfg = harness.RunConfig()
    if getattr(args, "config", None):
        cfg, _ = harness.read_config(args.config)
    overrides = {}
    for key in ("seed", "perc"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _pair(args, cfg):
    if getattr(args, "data", None):
        return harness.load_pair(args.data)
    return harness.build_data(cfg)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def cmd_dataset_build(args) -> int:
    cfg = _config(args)
    pair = harness.build_data(cfg)
    paths = harness.save_pair(pair, cfg.spec.joint_cardinality, args.out)
    harness.write_config(cfg, Path(args.out) / "config.ini")
    _emit({k: {"path": str(p), "n": len(getattr(pair, k))} for k, p in paths.items()})
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    pair = _pair(args, cfg)
    data = harness.union(strip_labels(pair.d_bias), strip_labels(pair.d_ref))
    rec = pretrain(data, cfg.arch, dataclasses.replace(cfg.pretrain_stage(derive_seed(cfg.seed, 0, 0, 3)), eval_every=0))
    save_checkpoint(rec.state, args.out, cfg.hash(), cfg.seed, {"command": "pretrain"})
    _emit({"checkpoint": args.out, "epochs": cfg.pretrain_epochs, "runtime_s": rec.runtime_s})
    return EXIT_OK


def _adapt(args, cfg, state, ref) -> int:
    method = _METHODS[args.method]
    stage_cfg = cfg.adapt_stage(method.value, derive_seed(cfg.seed, 0, 0, 4), len(ref),
                                state.discriminator.n_layers, lam=args.lam, lp_epochs=args.lp_epochs)
    stage_cfg = dataclasses.replace(stage_cfg, eval_every=0)
    rec = debias_pretrained(state, ref, method, stage_cfg)
    save_checkpoint(rec.state, args.out, cfg.hash(), cfg.seed, {"command": args.command, "method": method.value})
    _emit({"checkpoint": args.out, "method": method.value, "epochs": stage_cfg.epochs,
           "lp_epochs": stage_cfg.freeze.active_until_epoch if stage_cfg.freeze else 0,
           "lambda": stage_cfg.loss.lam, "runtime_s": rec.runtime_s})
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = _config(args)
    state, _ = read_checkpoint(args.checkpoint)
    pair = _pair(args, cfg)
    return _adapt(args, cfg, state, strip_labels(pair.d_ref))


def cmd_debias(args) -> int:
    # only the checkpoint and the reference file are read
    cfg = _config(args)
    state, _ = read_checkpoint(args.checkpoint)
    ref, _ = load_dataset(args.ref)
    return _adapt(args, cfg, state, strip_labels(ref))


def cmd_eval(args) -> int:
    cfg = _config(args)
    state, manifest = read_checkpoint(args.checkpoint)
    pair = _pair(args, cfg)
    evaluator = harness.build_evaluator(cfg, pair)
    report = evaluator(state, Rng(derive_seed(cfg.seed, 0, 0, 5)))
    _emit({"fd": report.fd, "frechet_sq": report.frechet_sq, "n_samples": report.n_samples,
           "stage": manifest["stage"], "config_hash": report.config_hash})
    return EXIT_OK


def cmd_grid_run(args) -> int:
    cfg, grid_map = harness.read_config(args.config)
    grid = harness.ExperimentGrid.from_mapping(cfg, grid_map)
    result = harness.run_grid(grid, args.out, args.parallelism, force=args.force)
    for c in result.failures:
        log.error("cell %s perc=%s bias=%s seed=%s failed: %s", c.method, c.perc, c.bias_id, c.seed, c.error)
    if not result.rows:
        log.error("every cell failed; no report written")
        return EXIT_RUNTIME
    print(Path(args.out) / "report.csv")
    return EXIT_PARTIAL if result.failures else EXIT_OK


def cmd_layer_study(args) -> int:
    cfg = _config(args)
    study = harness.run_layer_study(cfg, zero_epochs=args.zero_epochs)
    text = harness.layer_study_csv(study)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gallery(args) -> int:
    before, _ = read_checkpoint(args.before)
    after, _ = read_checkpoint(args.after)
    gallery = fixed_noise_gallery(before, after, args.n, Rng(args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gallery.csv").write_text(harness.gallery_csv(gallery))
    (out / "gallery.svg").write_text(harness.gallery_svg(gallery))
    _emit({"n": len(gallery), "z_sha256": gallery.z_hash, "out": str(out)})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fairtl", description="Fair generative models by transfer learning.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, data=True):
        sp.add_argument("--config", help="key/value config file with a [run] section")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--perc", type=float)
        if data:
            sp.add_argument("--data", help="dataset directory from 'dataset build' (default: regenerate)")

    ds = sub.add_parser("dataset", help="dataset utilities").add_subparsers(dest="action", required=True)
    b = ds.add_parser("build", help="write D_bias, D_ref and the evaluation holdout")
    with_config(b, data=False)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_dataset_build)

    sp = sub.add_parser("pretrain", help="train a GAN on D_bias ∪ D_ref")
    with_config(sp)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.set_defaults(func=cmd_pretrain)

    def adapt_flags(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--method", choices=sorted(_METHODS), default="fairtlpp")
        sp.add_argument("--lambda", dest="lam", type=float, help="weight of the adapted discriminator (fairtlpp)")
        sp.add_argument("--lp-epochs", type=int, help="epochs with the two input-nearest D layers frozen (fairtlpp)")
        sp.add_argument("--out", required=True, help="checkpoint path for the adapted model")

    sp = sub.add_parser("adapt", help="adapt a pretrained checkpoint on D_ref")
    with_config(sp)
    adapt_flags(sp)
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("debias", help="adapt a pretrained checkpoint using only a reference dataset file")
    with_config(sp, data=False)
    adapt_flags(sp)
    sp.add_argument("--ref", required=True, help="reference dataset file")
    sp.set_defaults(func=cmd_debias)

    sp = sub.add_parser("eval", help="FD and Fréchet distance of a checkpoint")
    with_config(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_eval)

    grid = sub.add_parser("grid", help="experiment grids").add_subparsers(dest="action", required=True)
    sp = grid.add_parser("run", help="run every cell of a grid and write reports")
    sp.add_argument("--config", required=True, help="config file with [run] and [grid] sections")
    sp.add_argument("--out", required=True)
    sp.add_argument("--parallelism", type=int, default=1)
    sp.add_argument("--force", action="store_true", help="aggregate even if config hashes differ")
    sp.set_defaults(func=cmd_grid_run)

    sp = sub.add_parser("layer-study", help="per-layer weight change after fairTL adaptation")
    with_config(sp, data=False)
    sp.add_argument("--zero-epochs", action="store_true", help="control run with no adaptation epochs")
    sp.add_argument("--out", help="CSV path")
    sp.set_defaults(func=cmd_layer_study)

    sp = sub.add_parser("gallery", help="samples of two checkpoints from shared noise")
    sp.add_argument("--before", required=True)
    sp.add_argument("--after", required=True)
    sp.add_argument("--n", type=int, default=16)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_gallery)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad usage; report it as a validation error
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, TypeError, KeyError, FileNotFoundError, CheckpointError, MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
