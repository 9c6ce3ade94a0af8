"""Command-line pipeline: phantom, sinogram and FBP baselines, DIP and
tempered-MFVI training, and the joint temperature/prior-scale search.

Every subcommand is deterministic under --seed, writes a config.txt with the
resolved parameters, and emits CSV/PGM artifacts only.  Exit codes: 0 on
success, 2 for usage or argument errors, 3 for numeric failures during
training, 4 for I/O failures.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from pathlib import Path

import numpy as np

from .autodiff import NumericError
from .bo import SearchBox, bo_loop, default_init_grid
from .data import Image, PgmFormatError, Rng, read_pgm, shepp_logan, write_pgm
from .metrics import calibration_bins, error_map, psnr, write_calibration_csv
from .mfvi import (
    Deterministic,
    DipNetwork,
    FullyTempered,
    PartialLambda,
    TrainConfig,
    TrainingDiverged,
    _deterministic_mean,
    predict,
    train,
    write_history_csv,
)
from .radon import ProjectionGeometry, fbp, radon_forward, write_sinogram_csv

_SCALING_CHOICES = ("sqrt_t", "inv_sqrt_t")


def _thread_cap() -> int:
    raw = os.environ.get("COLDPOST_THREADS")
    if raw is None:
        return sys.maxsize
    cap = int(raw)
    if cap < 1:
        raise ValueError(f"COLDPOST_THREADS must be >= 1, got {raw!r}")
    return cap


def _write_config(out_dir: Path, entries: dict) -> None:
    lines = [f"{key} = {entries[key]}" for key in sorted(entries)]
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n")


def _write_metrics(out_dir: Path, metrics: dict) -> None:
    lines = ["metric,value"]
    lines += [f"{key},{repr(float(value))}" for key, value in metrics.items()]
    (out_dir / "metrics.csv").write_text("\n".join(lines) + "\n")


def _load_reference(args) -> Image:
    """Ground-truth image: a generated phantom, or the --image PGM."""
    if getattr(args, "image", None) is not None:
        return read_pgm(args.image)
    return shepp_logan(args.size)


def _geometry(args, reference: Image) -> ProjectionGeometry:
    return ProjectionGeometry.sparse_view(args.angles, reference.width)


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _base_config(args, reference: Image) -> dict:
    entries = {"subcommand": args.subcommand, "seed": args.seed}
    entries["image_size"] = reference.width
    if getattr(args, "image", None) is not None:
        entries["image"] = args.image
    if hasattr(args, "angles"):
        entries["angles"] = args.angles
    return entries


def _clip_unit(image: Image) -> Image:
    return Image(np.clip(image.pixels, 0.0, 1.0))


def _normalized_with_scale(image: Image) -> tuple:
    """Min-max normalize into [0, 1]; returns (Image, low, high)."""
    low = float(image.pixels.min())
    high = float(image.pixels.max())
    if high > low:
        scaled = (image.pixels - low) / (high - low)
    else:
        scaled = np.zeros_like(image.pixels)
    return Image(scaled), low, high


def cmd_phantom(args) -> None:
    image = shepp_logan(args.size)
    write_pgm(image, args.out)
    _write_config(_out_dir(args), {"subcommand": "phantom", "size": args.size, "out": args.out})
    print(f"phantom: wrote {args.out} ({args.size}x{args.size})")


def cmd_sinogram(args) -> None:
    reference = _load_reference(args)
    sinogram = radon_forward(reference, _geometry(args, reference))
    write_sinogram_csv(sinogram, args.out)
    entries = _base_config(args, reference)
    entries["out"] = args.out
    _write_config(_out_dir(args), entries)
    print(
        f"sinogram: wrote {args.out} "
        f"({sinogram.geometry.num_angles} angles x {sinogram.geometry.num_bins} bins)"
    )


def cmd_fbp(args) -> None:
    reference = _load_reference(args)
    sinogram = radon_forward(reference, _geometry(args, reference))
    reconstruction = fbp(sinogram, reference.width)
    out = _out_dir(args)
    write_pgm(_clip_unit(reconstruction), out / "fbp.pgm")
    quality = psnr(reconstruction.pixels, reference.pixels)
    _write_metrics(out, {"psnr_fbp": quality})
    _write_config(out, _base_config(args, reference))
    print(f"fbp: psnr={quality:.4f} dB")


def _train_config(args, mode) -> TrainConfig:
    return TrainConfig(
        iterations=args.iters,
        learning_rate=args.lr,
        mc_train_samples=args.mc_samples,
        mode=mode,
        history_every=args.history_every,
    )


def _build_network(size: int, seed: int) -> DipNetwork:
    return DipNetwork(size, Rng(seed).split(2))


def cmd_dip(args) -> None:
    reference = _load_reference(args)
    sinogram = radon_forward(reference, _geometry(args, reference))
    net = _build_network(reference.width, args.seed)
    config = _train_config(args, Deterministic())
    params, history = train(net, config, sinogram, phantom=reference, rng=Rng(args.seed))
    mean = Image(_deterministic_mean(net, params))

    out = _out_dir(args)
    write_pgm(_clip_unit(mean), out / "dip.pgm")
    write_history_csv(history, out / "dip_history.csv")
    quality = psnr(mean.pixels, reference.pixels)
    _write_metrics(out, {"psnr_dip": quality})
    entries = _base_config(args, reference)
    entries.update(
        iterations=args.iters,
        learning_rate=args.lr,
        mode="deterministic",
        architecture=net.describe(),
    )
    _write_config(out, entries)
    print(f"dip: psnr={quality:.4f} dB")


def _mfvi_mode(args):
    if args.partial_lambda is not None:
        return PartialLambda(args.partial_lambda, args.prior_sigma)
    return FullyTempered(args.temperature, args.prior_sigma, scaling=args.prior_scaling)


def cmd_mfvi(args) -> None:
    if not args.unsafe and args.partial_lambda is None:
        box = SearchBox()
        if not box.contains(args.temperature, args.prior_sigma):
            raise ValueError(
                f"(T={args.temperature}, sigma={args.prior_sigma}) outside the search box "
                f"T in [{box.t_low}, {box.t_high}], sigma in [{box.sigma_low}, "
                f"{box.sigma_high}]; pass --unsafe to override"
            )
    reference = _load_reference(args)
    sinogram = radon_forward(reference, _geometry(args, reference))
    net = _build_network(reference.width, args.seed)
    mode = _mfvi_mode(args)
    config = _train_config(args, mode)
    params, history = train(net, config, sinogram, phantom=reference, rng=Rng(args.seed))
    mean, variance = predict(net, params, args.mc_samples, Rng(args.seed).split(3))

    out = _out_dir(args)
    write_pgm(_clip_unit(mean), out / "mean.pgm")
    scaled, low, high = _normalized_with_scale(variance)
    write_pgm(scaled, out / "variance.pgm")
    (out / "variance_scale.csv").write_text(
        "min,max\n" + f"{repr(low)},{repr(high)}\n"
    )
    errors = error_map(mean, reference)
    write_pgm(errors, out / "error_map.pgm")
    write_history_csv(history, out / "mfvi_history.csv")
    bins = calibration_bins(errors.pixels**2, variance.pixels)
    write_calibration_csv(bins, out / "calibration.csv")
    quality = psnr(mean.pixels, reference.pixels)
    _write_metrics(out, {"psnr_mfvi": quality, "uce": bins.uce()})
    entries = _base_config(args, reference)
    entries.update(
        iterations=args.iters,
        learning_rate=args.lr,
        mc_samples=args.mc_samples,
        architecture=net.describe(),
    )
    if isinstance(mode, PartialLambda):
        entries.update(mode="partial_lambda", kl_weight=mode.lam, prior_sigma=mode.sigma)
    else:
        entries.update(
            mode="fully_tempered",
            temperature=mode.temperature,
            prior_sigma=mode.sigma,
            prior_scaling=mode.scaling,
        )
    _write_config(out, entries)
    print(f"mfvi: psnr={quality:.4f} dB uce={bins.uce():.6f}")


class _BOObjective:
    """Picklable map (T, sigma) -> PSNR of a tempered training run.

    Every evaluation rebuilds the same phantom, sinogram, and network from
    the stored seed, so the objective is a pure deterministic function of
    (T, sigma) and the whole search is replayable.
    """

    def __init__(self, size, angles, seed, iterations, learning_rate, mc_samples, scaling):
        self.size = size
        self.angles = angles
        self.seed = seed
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.mc_samples = mc_samples
        self.scaling = scaling

    def __call__(self, t: float, sigma: float) -> float:
        reference = shepp_logan(self.size)
        geometry = ProjectionGeometry.sparse_view(self.angles, self.size)
        sinogram = radon_forward(reference, geometry)
        net = _build_network(self.size, self.seed)
        config = TrainConfig(
            iterations=self.iterations,
            learning_rate=self.learning_rate,
            mc_train_samples=self.mc_samples,
            mode=FullyTempered(t, sigma, scaling=self.scaling),
        )
        params, history = train(net, config, sinogram, phantom=reference, rng=Rng(self.seed))
        if history:
            return history[-1].psnr
        return psnr(_deterministic_mean(net, params), reference.pixels)


def cmd_bo(args) -> None:
    if not 1 <= args.batch <= 4:
        raise ValueError(f"--batch must be between 1 and 4, got {args.batch}")
    box = SearchBox(
        t_low=args.t_min, t_high=args.t_max, sigma_low=args.sigma_min, sigma_high=args.sigma_max
    )
    parallel = max(1, min(args.parallel, _thread_cap()))
    reference = _load_reference(args)
    sinogram = radon_forward(reference, _geometry(args, reference))
    out = _out_dir(args)

    fbp_psnr = psnr(fbp(sinogram, reference.width).pixels, reference.pixels)
    net = _build_network(reference.width, args.seed)
    dip_config = _train_config(args, Deterministic())
    dip_params, dip_history = train(
        net, dip_config, sinogram, phantom=reference, rng=Rng(args.seed)
    )
    if dip_history:
        dip_psnr = dip_history[-1].psnr
    else:
        dip_psnr = psnr(_deterministic_mean(net, dip_params), reference.pixels)

    objective = _BOObjective(
        reference.width,
        args.angles,
        args.seed,
        args.iters,
        args.lr,
        args.mc_samples,
        args.prior_scaling,
    )
    state, (t_star, sigma_star) = bo_loop(
        objective,
        box,
        default_init_grid(),
        iterations=args.bo_iterations,
        k=args.batch,
        rng=Rng(args.seed),
        parallel=parallel,
        artifacts_dir=out,
    )
    mfvi_psnr = state.best_psnr

    report = [
        ("fbp", fbp_psnr),
        ("dip", dip_psnr),
        ("mfvi_bo", mfvi_psnr),
    ]
    lines = ["method,psnr"]
    lines += [f"{name},{repr(float(value))}" for name, value in report]
    (out / "report.csv").write_text("\n".join(lines) + "\n")
    _write_metrics(out, {f"psnr_{name}": value for name, value in report})

    entries = _base_config(args, reference)
    entries.update(
        iterations=args.iters,
        learning_rate=args.lr,
        mc_samples=args.mc_samples,
        prior_scaling=args.prior_scaling,
        bo_iterations=args.bo_iterations,
        batch=args.batch,
        parallel=parallel,
        t_min=box.t_low,
        t_max=box.t_high,
        sigma_min=box.sigma_low,
        sigma_max=box.sigma_high,
        gp_noise_prior="Gamma(shape=0.1, rate=100)",
        architecture=net.describe(),
        selected_temperature=t_star,
        selected_sigma=sigma_star,
    )
    _write_config(out, entries)

    print(f"selected: T={t_star:.6e} sigma={sigma_star:.6e}")
    print(f"{'method':<10}{'psnr (dB)':>12}")
    for name, value in report:
        print(f"{name:<10}{value:>12.4f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coldpost",
        description="Sparse-view CT with a temperature-scaled variational deep image prior.",
    )
    subparsers = parser.add_subparsers(dest="subcommand", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="base RNG seed (default 0)")
    common.add_argument("--out-dir", default=".", help="artifact directory (default .)")

    imaging = argparse.ArgumentParser(add_help=False)
    imaging.add_argument("--size", type=int, default=64, help="phantom side length (default 64)")
    imaging.add_argument("--angles", type=int, default=45, help="projection count (default 45)")
    imaging.add_argument("--image", default=None, help="16-bit PGM to use instead of the phantom")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--iters", type=int, default=5000, help="training steps (default 5000)")
    training.add_argument("--lr", type=float, default=3e-3, help="Adam step size (default 3e-3)")
    training.add_argument(
        "--mc-samples",
        type=int,
        default=1,
        help="weight samples per training step and per posterior-predictive estimate",
    )
    training.add_argument(
        "--history-every", type=int, default=50, help="history row stride (default 50)"
    )

    sub = subparsers.add_parser("phantom", parents=[common], help="write the phantom as PGM")
    sub.add_argument("--size", type=int, default=64)
    sub.add_argument("--out", required=True, help="output PGM path")
    sub.set_defaults(func=cmd_phantom)

    sub = subparsers.add_parser(
        "sinogram", parents=[common, imaging], help="project and write the sinogram CSV"
    )
    sub.add_argument("--out", required=True, help="output CSV path")
    sub.set_defaults(func=cmd_sinogram)

    sub = subparsers.add_parser(
        "fbp", parents=[common, imaging], help="filtered back-projection baseline"
    )
    sub.set_defaults(func=cmd_fbp)

    sub = subparsers.add_parser(
        "dip", parents=[common, imaging, training], help="deterministic deep-image-prior run"
    )
    sub.set_defaults(func=cmd_dip)

    sub = subparsers.add_parser(
        "mfvi", parents=[common, imaging, training], help="tempered mean-field VI run"
    )
    sub.add_argument("--temperature", type=float, default=1e-4, help="posterior temperature T")
    sub.add_argument("--prior-sigma", type=float, default=1e-2, help="prior scale sigma")
    sub.add_argument(
        "--prior-scaling",
        choices=_SCALING_CHOICES,
        default="sqrt_t",
        help="how the prior scale responds to T (default sqrt_t)",
    )
    sub.add_argument(
        "--partial-lambda",
        type=float,
        default=None,
        help="use a lambda-weighted KL with an unscaled prior instead of full tempering",
    )
    sub.add_argument(
        "--unsafe",
        action="store_true",
        help="allow (T, sigma) outside the default search box",
    )
    sub.set_defaults(func=cmd_mfvi)

    sub = subparsers.add_parser(
        "bo", parents=[common, imaging, training], help="full temperature/prior-scale search"
    )
    sub.add_argument("--bo-iterations", type=int, default=12, help="BO rounds after init")
    sub.add_argument("--batch", type=int, default=4, help="candidates per round (1-4)")
    sub.add_argument(
        "--parallel",
        type=int,
        default=4,
        help="concurrent candidate trainings (capped by COLDPOST_THREADS)",
    )
    sub.add_argument("--t-min", type=float, default=1e-12)
    sub.add_argument("--t-max", type=float, default=1e-2)
    sub.add_argument("--sigma-min", type=float, default=1e-10)
    sub.add_argument("--sigma-max", type=float, default=1.0)
    sub.add_argument(
        "--prior-scaling", choices=_SCALING_CHOICES, default="sqrt_t"
    )
    sub.set_defaults(func=cmd_bo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except TrainingDiverged as exc:
        print(f"coldpost: training diverged at iteration {exc.iteration}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"coldpost: numeric failure: {exc}", file=sys.stderr)
        return 3
    except PgmFormatError as exc:
        print(f"coldpost: bad PGM: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"coldpost: I/O failure: {exc}", file=sys.stderr)
        return 4
    except (ValueError, RuntimeError) as exc:
        print(f"coldpost: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
