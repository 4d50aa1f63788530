"""Command-line entry point: ``train``, ``reconstruct`` and ``benchmark``."""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint, datagen, dynamics, solvers
from .config import ConfigError, RunConfig, load_config
from .metrics import psnr, ssim
from .regnet import RegularizerParams
from .solvers import DivergenceError

log = logging.getLogger("pmpreg")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

TRAIN_HEADER = ["k", "J", "grad_norm", "peak_stored"]
TIMING_HEADER = ["k", "seconds"]
BENCH_HEADER = ["variant", "T", "peak_stored", "peak_reverse", "seconds", "drift"]
BENCH_VARIANTS = ("basic", "augmented", "memfree", "control_flow")


def build_operator(cfg: RunConfig):
    return datagen.make_operator(
        cfg.operator, cfg.size, cfg.size, seed=cfg.seed, blur_size=cfg.blur_size,
        blur_sigma=cfg.blur_sigma, mask_keep=cfg.mask_keep,
    )


def build_dataset(cfg: RunConfig) -> datagen.Dataset:
    return datagen.make_dataset(
        cfg.n_train, cfg.n_test, cfg.size, cfg.size, build_operator(cfg), cfg.noise_sigma,
        cfg.seed, n_shapes=cfg.n_shapes, lam=cfg.lam, rho=cfg.rho,
    )


def initial_params(cfg: RunConfig) -> RegularizerParams:
    return RegularizerParams.init(cfg.layers, cfg.channels, seed=cfg.seed, scale=cfg.init_scale)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def run_train(cfg: RunConfig):
    """Train and write ``train.csv``, ``timing.csv`` and ``checkpoint.msac``."""
    solver = cfg.solver()
    data = build_dataset(cfg)
    theta0 = initial_params(cfg)
    theta, report = solvers.train(theta0, data.train, solver)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train.csv").write_text(_csv_text(TRAIN_HEADER, report.rows()))
    (out / "timing.csv").write_text(
        _csv_text(TIMING_HEADER, ((k + 1, s) for k, s in enumerate(report.seconds)))
    )
    checkpoint.save(out / "checkpoint.msac", checkpoint.Checkpoint(theta, solver.K, cfg.digest()))
    return theta, report, data


def reconstruct(b, theta, cfg: RunConfig, op=None):
    op = op or build_operator(cfg)
    prob = dynamics.ProblemInstance(op, b, None, lam=cfg.lam, rho=cfg.rho)
    solver = solvers.SolverConfig(tau=cfg.tau)
    return solvers.forward_euler(prob.x0, theta, prob, solver, steps=cfg.T, store=False).x_T


def run_benchmark(cfg: RunConfig) -> str:
    data = build_dataset(cfg)
    theta0 = initial_params(cfg)
    rows = []
    for T in cfg.benchmark_T:
        for variant in BENCH_VARIANTS:
            # plain iterations: a halving retry would distort the timings
            solver = solvers.SolverConfig(T=T, tau=cfg.tau, eta=cfg.eta, K=cfg.benchmark_K,
                                          variant=variant, seed=cfg.seed)
            drift = float("nan")
            if variant == "memfree":
                _, report, drift = solvers.msa_memfree(theta0, data.train, solver)
            else:
                _, report = solvers.train(theta0, data.train, solver)
            # best of K: the least perturbed timing sample
            rows.append((variant, T, max(report.peak_stored), max(report.peak_reverse),
                         min(report.seconds), drift))
            log.info("benchmark %s T=%d: %.3fs", variant, T, rows[-1][4])
    text = _csv_text(BENCH_HEADER, rows)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "benchmark.csv").write_text(text)
    return text


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    t0 = time.perf_counter()
    theta, report, data = run_train(cfg)
    msg = f"J {report.objective[0]:.6g} -> {report.objective[-1]:.6g} over {len(report)} iterations"
    if data.test:
        test = dynamics.stack(data.test)
        x = reconstruct(test.b, theta, cfg, op=test.op)
        gain = np.mean([psnr(x[i], test.x_gt[i]) - psnr(test.b[i], test.x_gt[i]) for i in range(len(x))])
        msg += f"; mean test PSNR gain {gain:.2f} dB"
    print(f"{msg} ({time.perf_counter() - t0:.1f}s)")
    return EXIT_OK


def _cmd_reconstruct(args) -> int:
    cfg = load_config(args.config)
    ckpt = checkpoint.load(args.checkpoint, layers=cfg.layers, channels=cfg.channels)
    b = datagen.read_image(args.input)
    op = build_operator(cfg)
    if op.variant == "mask" and b.shape[-2:] != op.mask_array.shape[-2:]:
        raise dynamics.ShapeError(
            f"image is {b.shape[-2]}x{b.shape[-1]} but the configured mask is {cfg.size}x{cfg.size}"
        )
    x = reconstruct(b, ckpt.theta, cfg, op=op)
    datagen.write_image(args.output, x)
    fields = {"T": cfg.T}
    if args.ground_truth:
        gt = datagen.read_image(args.ground_truth)
        if gt.shape != x.shape:
            raise dynamics.ShapeError(f"ground truth shape {gt.shape} != image shape {x.shape}")
        fields.update(psnr=psnr(x, gt), ssim=ssim(x, gt), psnr_input=psnr(b, gt))
    line = " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in fields.items())
    Path(str(args.output) + ".metrics").write_text(line + "\n")
    print(line)
    return EXIT_OK


def _cmd_benchmark(args) -> int:
    cfg = load_config(args.config)
    sys.stdout.write(run_benchmark(cfg))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pmpreg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", help="train the regularizer with an MSA variant")
    t.add_argument("--config", required=True)
    t.set_defaults(func=_cmd_train)
    r = sub.add_parser("reconstruct", help="run the learned gradient flow on one image")
    r.add_argument("--config", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--input", required=True)
    r.add_argument("--output", required=True)
    r.add_argument("--ground-truth")
    r.set_defaults(func=_cmd_reconstruct)
    b = sub.add_parser("benchmark", help="memory and time per MSA variant")
    b.add_argument("--config", required=True)
    b.set_defaults(func=_cmd_benchmark)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as err:
        print(f"diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, datagen.ImageFormatError, checkpoint.CheckpointError, dynamics.ShapeError) as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
