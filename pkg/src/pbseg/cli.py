"""``pbseg`` command-line entry point.

Exit codes: 0 success, 1 gradient check failure, 2 non-finite loss,
3 I/O error, 4 config/checkpoint mismatch, 5 invalid configuration.
Data goes to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import bench, flops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import generate_scene, overlay, write_mask_raster, write_ppm
from .gradcheck import SUITE, run_suite
from .losses import LossWeights
from .metrics import metrics
from .model import ConfigError, ModelConfig, PBSeg
from .train import AdamW, NonFiniteLossError, cosine_lr, evaluate, predict_raster, train_step

log = logging.getLogger("pbseg")

EXIT_OK, EXIT_GRADCHECK, EXIT_NONFINITE, EXIT_IO, EXIT_MISMATCH, EXIT_CONFIG = 0, 1, 2, 3, 4, 5

ABLATION_ORDER = [
    (False, False, False),
    (True, False, False),
    (False, True, False),
    (False, False, True),
    (True, True, False),
    (True, False, True),
    (False, True, True),
    (True, True, True),
]


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CommandError(f"output directory {path} is not writable: {exc}", EXIT_IO) from exc
    return path


def _write_json(path: Path, obj) -> None:
    try:
        path.write_text(json.dumps(obj, indent=2) + "\n")
    except OSError as exc:
        raise CommandError(f"cannot write {path}: {exc}", EXIT_IO) from exc


# --------------------------------------------------------------------------
# train / eval
# --------------------------------------------------------------------------

def fit(cfg: RunConfig) -> tuple[PBSeg, list[tuple[int, float, float]]]:
    """Train a fresh model; returns it with the ``(step, loss, lr)`` log."""
    model = PBSeg(cfg.model_config(), seed=cfg.seed)
    opt = AdamW(model.parameters(), weight_decay=cfg.weight_decay)
    weights = LossWeights.from_config(model.config)
    scenes = [generate_scene(s, cfg.height, cfg.width, cfg.classes) for s in cfg.train_seeds()]
    history = []
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        start = (step * cfg.batch) % len(scenes)
        batch = [scenes[(start + i) % len(scenes)] for i in range(cfg.batch)]
        lr = cosine_lr(cfg.lr, step, cfg.steps)
        loss = train_step(model, batch, opt, lr, weights)
        history.append((step, loss, lr))
        if step % 200 == 0 or step == cfg.steps - 1:
            log.info("step %d loss %.4f lr %.2e (%.1fs)", step, loss, lr, time.perf_counter() - t0)
    return model, history


def _eval_scenes(cfg: RunConfig, seeds=None):
    seeds = cfg.eval_seeds() if seeds is None else seeds
    return [generate_scene(s, cfg.height, cfg.width, cfg.classes) for s in seeds]


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    _ensure_dir(out)
    try:
        model, history = fit(cfg)
    except NonFiniteLossError as exc:
        raise CommandError(str(exc), EXIT_NONFINITE) from exc
    try:
        save_checkpoint(
            out / "checkpoint.pbsg",
            {"model": model.config.to_dict(), "run": cfg.to_dict(), "steps": cfg.steps},
            model.state_dict(),
        )
        with open(out / "loss_log.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "lr"])
            for step, loss, lr in history:
                writer.writerow([step, repr(loss), repr(lr)])
    except OSError as exc:
        raise CommandError(f"cannot write training outputs: {exc}", EXIT_IO) from exc
    train_m = metrics(evaluate(model, _eval_scenes(cfg, cfg.train_seeds())))
    heldout = metrics(evaluate(model, _eval_scenes(cfg, cfg.replace(eval_split="heldout").eval_seeds())))
    report = {
        "config": cfg.to_dict(),
        "loss_curve": [loss for _, loss, _ in history],
        "train_metrics": train_m,
        "heldout_metrics": heldout,
    }
    _write_json(out / "report.json", report)
    return report


def load_model(path: Path) -> tuple[PBSeg, dict]:
    try:
        meta, state = load_checkpoint(path)
    except (OSError, CheckpointError) as exc:
        raise CommandError(f"cannot read checkpoint {path}: {exc}", EXIT_IO) from exc
    model = PBSeg(ModelConfig.from_dict(meta["model"]))
    model.load_state_dict(state)
    return model, meta


def cmd_eval(cfg: RunConfig, out: Path, checkpoint: Path, dump_masks: bool = False) -> dict:
    model, _ = load_model(checkpoint)
    mc = model.config
    theirs = (mc.num_classes, mc.height, mc.width)
    ours = (cfg.classes, cfg.height, cfg.width)
    if theirs != ours:
        raise CommandError(f"checkpoint expects (classes, H, W) = {theirs}, config has {ours}", EXIT_MISMATCH)
    _ensure_dir(out)
    scenes = _eval_scenes(cfg)
    result = metrics(evaluate(model, scenes))
    _write_json(out / "eval_metrics.json", result)
    if dump_masks:
        mask_dir = _ensure_dir(out / "masks")
        for s in scenes:
            pred = predict_raster(model, s.image)
            try:
                write_mask_raster(pred, mask_dir / f"pred_{s.seed:05d}.pgm")
                write_ppm(overlay(s.image, pred, cfg.classes), mask_dir / f"overlay_{s.seed:05d}.ppm")
            except OSError as exc:
                raise CommandError(f"cannot write masks: {exc}", EXIT_IO) from exc
    return result


# --------------------------------------------------------------------------
# gradcheck / bench / ablate / gen-data
# --------------------------------------------------------------------------

def cmd_gradcheck(cfg: RunConfig, fault: str | None = None) -> tuple[dict[str, float], list[str]]:
    errors = run_suite(SUITE, seed=cfg.seed, fault=fault)
    failed = [name for name, err in errors.items() if not err < cfg.tolerance]
    return errors, failed


def bench_grid(cfg: RunConfig) -> list[tuple[int, int, int]]:
    return list(itertools.product(cfg.bench_spatial, cfg.bench_queries, cfg.bench_dims))


def cmd_bench(cfg: RunConfig, out: Path) -> dict:
    _ensure_dir(out)
    grid = bench_grid(cfg)
    if not grid:
        raise CommandError("bench grid is empty", EXIT_CONFIG)
    report = flops.flop_report(grid, cfg.bench_heads)
    for point in report["points"]:
        for mech in ("pbca", "standard"):
            counted = flops.instrumented_flops(mech, point["S"], point["L"], point["d"], cfg.bench_heads, cfg.seed)
            point[mech]["instrumented_stage_totals"] = counted
            point[mech]["instrumented_match"] = counted == point[mech]["stage_totals"]
    _write_json(out / "flops.json", report)
    rows = bench.latency_grid(grid, cfg.bench_heads, cfg.bench_repeats, cfg.bench_warmup, cfg.seed)
    try:
        with open(out / "latency.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["S", "L", "d", "mechanism", "median_ms", "p10", "p90"])
            for r in rows:
                writer.writerow([r.S, r.L, r.d, r.mechanism, f"{r.median_ms:.4f}", f"{r.p10:.4f}", f"{r.p90:.4f}"])
    except OSError as exc:
        raise CommandError(f"cannot write latency.csv: {exc}", EXIT_IO) from exc
    report["latency"] = [vars(r) for r in rows]
    return report


def ablation_tag(pbca: bool, cam: bool, dconv: bool) -> str:
    parts = [n for n, on in (("pbca", pbca), ("cam", cam), ("dconv", dconv)) if on]
    return "+".join(parts) if parts else "baseline"


def cmd_ablate(cfg: RunConfig, out: Path) -> list[dict]:
    _ensure_dir(out)
    rows = []
    for pbca, cam, dconv in ABLATION_ORDER:
        tag = ablation_tag(pbca, cam, dconv)
        log.info("ablation run %s", tag)
        run_cfg = cfg.replace(use_pbca=pbca, use_cam=cam, use_dconv=dconv)
        report = cmd_train(run_cfg, out / "ablate" / tag)
        m = report["heldout_metrics"]
        rows.append({"pbca": pbca, "cam": cam, "dconv": dconv, "miou": m["miou"], "mf1": m["mf1"], "oa": m["oa"]})
    _write_json(out / "ablation.json", rows)
    try:
        (out / "ablation.md").write_text(ablation_markdown(rows))
    except OSError as exc:
        raise CommandError(f"cannot write ablation.md: {exc}", EXIT_IO) from exc
    return rows


def ablation_markdown(rows: list[dict]) -> str:
    mark = lambda on: "x" if on else "-"  # noqa: E731
    lines = ["| PBCA | CAM | DConv | mIoU | mF1 | OA |", "|---|---|---|---|---|---|"]
    for r in rows:
        lines.append(
            f"| {mark(r['pbca'])} | {mark(r['cam'])} | {mark(r['dconv'])} "
            f"| {r['miou']:.2f} | {r['mf1']:.2f} | {r['oa']:.2f} |"
        )
    return "\n".join(lines) + "\n"


def cmd_gen_data(cfg: RunConfig, out: Path) -> list[Path]:
    _ensure_dir(out)
    written = []
    for seed in cfg.train_seeds():
        s = generate_scene(seed, cfg.height, cfg.width, cfg.classes)
        img, lab = out / f"scene_{seed:05d}.ppm", out / f"scene_{seed:05d}.pgm"
        try:
            write_ppm(s.image.transpose(1, 2, 0), img)
            write_mask_raster(s.label_raster, lab)
        except OSError as exc:
            raise CommandError(f"cannot write scene {seed}: {exc}", EXIT_IO) from exc
        written += [img, lab]
    return written


# --------------------------------------------------------------------------
# argument handling
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pbseg", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=["train", "eval", "gradcheck", "bench", "ablate", "gen-data"])
    parser.add_argument("--config", type=Path, help="key=value config file (defaults apply to missing keys)")
    parser.add_argument("--out", type=Path, help="output directory (overrides out_dir)")
    parser.add_argument("--checkpoint", type=Path, help="checkpoint for eval (default <out>/checkpoint.pbsg)")
    parser.add_argument("--dump-masks", action="store_true", help="eval: write predicted PGM + overlay PPM per scene")
    parser.add_argument("--tolerance", type=float, help="gradcheck: max relative error (overrides tolerance)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--inject-fault", help=argparse.SUPPRESS)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _limit_threads():
    n = os.environ.get("PBSEG_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.tolerance is not None:
            overrides["tolerance"] = args.tolerance
        if args.out is not None:
            overrides["out_dir"] = str(args.out)
        cfg = cfg.replace(**overrides)
    except (ConfigError, OSError) as exc:
        print(f"pbseg: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.out_dir)
    limiter = _limit_threads()
    try:
        return _dispatch(args, cfg, out)
    except CommandError as exc:
        print(f"pbseg {args.command}: {exc}", file=sys.stderr)
        return exc.code
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


def _dispatch(args, cfg: RunConfig, out: Path) -> int:
    if args.command == "train":
        report = cmd_train(cfg, out)
        print(json.dumps({"heldout_metrics": report["heldout_metrics"], "train_metrics": report["train_metrics"]}))
    elif args.command == "eval":
        print(json.dumps(cmd_eval(cfg, out, args.checkpoint or out / "checkpoint.pbsg", args.dump_masks)))
    elif args.command == "gradcheck":
        t0 = time.perf_counter()
        errors, failed = cmd_gradcheck(cfg, args.inject_fault)
        print(f"{'component':<12} {'max_rel_error':>14}  status")
        for name, err in errors.items():
            print(f"{name:<12} {err:>14.3e}  {'FAIL' if name in failed else 'ok'}")
        print(f"tolerance {cfg.tolerance:g}, {time.perf_counter() - t0:.1f}s", file=sys.stderr)
        if failed:
            print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
            return EXIT_GRADCHECK
    elif args.command == "bench":
        report = cmd_bench(cfg, out)
        for point in report["points"]:
            print(f"S={point['S']} L={point['L']} d={point['d']} flops pbca={point['pbca']['total']} "
                  f"standard={point['standard']['total']} ratio={point['ratio']:.4f}")
        for r in report["latency"]:
            print(f"S={r['S']} L={r['L']} d={r['d']} {r['mechanism']}: median {r['median_ms']:.2f} ms")
    elif args.command == "ablate":
        print(ablation_markdown(cmd_ablate(cfg, out)), end="")
    elif args.command == "gen-data":
        for path in cmd_gen_data(cfg, out):
            print(path)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
