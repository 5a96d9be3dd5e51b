"""Command-line entry points: gen-filters, scatter, train, verify, bench.

Exit codes: 0 on success, 1 when a verification fails or training
diverges, 2 on usage, configuration or format errors.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io, theory
from ._seeding import rng_stream
from .exceptions import DivergenceError, PhaseCollapseError
from .filterbank import build_bank, spectral_stats
from .io import DatasetBatch
from .learn import Model, SGDConfig, train
from .network import NetworkConfig, ScatteringNetwork
from .tensor_ops import conv2d_periodic

log = logging.getLogger("phasecollapse")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def shipped_banks(L=4):
    """Every filter bank the package uses: both block layers at their
    default grids, plus the 15-tap grid of the 32x32 networks."""
    banks = {"first": build_bank(L, "first"), "second": build_bank(L, "second")}
    if banks["second"].grid != 15:
        banks["second@15"] = build_bank(L, "second", grid=15)
    return banks


def _deterministic(enabled):
    if not enabled:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=1)


# ---------------------------------------------------------------------------
# gen-filters


def cmd_gen_filters(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    layers = ("first", "second") if args.layer == "both" else (args.layer,)
    tensors, manifest = {}, ["name,kind,angle,grid,xi_1,xi_2,sigma,l2_norm"]
    for layer in layers:
        bank = build_bank(args.L, layer, grid=args.grid)
        for idx, filt in enumerate(bank.filters):
            name = f"{layer}_{idx}"
            io.write_pgm(out / f"{name}_re.pgm", filt.taps.real)
            io.write_pgm(out / f"{name}_im.pgm", filt.taps.imag)
            io.write_pgm(out / f"{name}_abs.pgm", np.abs(filt.taps))
            tensors[name] = filt.taps
            stats = spectral_stats(filt)
            angle = getattr(filt.params, "angle", 0.0)
            manifest.append(f"{name},{filt.kind},{angle:.12g},{filt.grid},{stats.center_freq[0]:.12g},"
                            f"{stats.center_freq[1]:.12g},{stats.bandwidth:.12g},{np.linalg.norm(filt.taps):.12g}")
    io.write_tensors(out / "filters.pct", tensors)
    (out / "manifest.csv").write_text("\n".join(manifest) + "\n")
    print(f"wrote {len(tensors)} filters to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# scatter


def _network_config(args, in_channels, image_size):
    values = io.read_config(args.config) if args.config else {}
    values = {k: v for k, v in values.items() if k in io.NETWORK_KEYS}
    values.setdefault("in_channels", in_channels)
    values.setdefault("image_size", image_size)
    if args.plain is not None:
        return NetworkConfig.plain(args.plain, **{k: v for k, v in values.items()
                                                  if k in ("L", "in_channels", "image_size", "grid", "seed")})
    if args.config:
        return NetworkConfig(**values)
    return NetworkConfig.desk(in_channels=in_channels, image_size=image_size, seed=args.seed)


def _load_scatter_input(args):
    if args.dataset:
        data = io.load_dataset(args.dataset, args.split, args.data_root)
        if args.n is not None:
            data = data.subset(np.arange(min(args.n, len(data))))
        return data.images, data.labels
    path = Path(args.input)
    if path.suffix == ".pct":
        tensors = io.read_tensors(path)
        images = tensors.get("images")
        if images is None:
            raise PhaseCollapseError(f"{path} has no 'images' tensor")
        images = np.real(images)
        return (images if images.ndim == 4 else images[None]), tensors.get("labels")
    return io.read_pnm(path)[None], None


def cmd_scatter(args):
    if (args.input is None) == (args.dataset is None):
        raise PhaseCollapseError("give exactly one of an input file or --dataset")
    images, labels = _load_scatter_input(args)
    config = _network_config(args, images.shape[1], images.shape[2])
    network = ScatteringNetwork(config)
    chunks = [network.forward(images[s:s + args.batch_size])[0] for s in range(0, len(images), args.batch_size)]
    features = np.concatenate(chunks)
    out = {"features": features}
    if labels is not None:
        out["labels"] = np.asarray(labels, dtype=np.float64)
    io.write_tensors(args.out, out)
    print(f"features {tuple(features.shape)} -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def synthetic_dataset(n, image_size, in_channels, seed, n_classes=4):
    """Oriented-grating toy problem: the class is the grating orientation.

    Random phase, frequency jitter and additive noise make the labels
    invariant to translation, as in the real image tasks.
    """
    rng = rng_stream(seed, "synthetic_dataset", n)
    labels = rng.integers(0, n_classes, n)
    angle = np.pi * labels / n_classes + rng.normal(0, 0.05, n)
    freq = rng.uniform(0.6, 1.2, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    u = np.arange(image_size)
    rows, cols = np.meshgrid(u, u, indexing="ij")
    arg = freq[:, None, None] * (np.cos(angle)[:, None, None] * rows + np.sin(angle)[:, None, None] * cols)
    images = 0.5 + 0.25 * np.cos(arg + phase[:, None, None])
    images = images[:, None] + 0.1 * rng.normal(size=(n, in_channels, image_size, image_size))
    return DatasetBatch(images, labels)


def _training_data(values, args):
    name = values.get("dataset", "cifar10")
    if name == "synthetic":
        size = values.get("image_size", 32)
        channels = values.get("in_channels", 3)
        n_train = values.get("n_train") or 512
        n_test = values.get("n_test") or 128
        return (synthetic_dataset(n_train, size, channels, args.seed),
                synthetic_dataset(n_test, size, channels, args.seed + 1))
    train_set = io.load_dataset(name, "train", args.data_root)
    test_set = io.load_dataset(name, "test", args.data_root)
    if values.get("n_train"):
        train_set = train_set.subset(np.arange(min(values["n_train"], len(train_set))))
    if values.get("n_test"):
        test_set = test_set.subset(np.arange(min(values["n_test"], len(test_set))))
    return train_set, test_set


def cmd_train(args):
    values = io.read_config(args.config)
    train_set, test_set = _training_data(values, args)
    net_values = {k: v for k, v in values.items() if k in io.NETWORK_KEYS}
    net_values.setdefault("in_channels", train_set.images.shape[1])
    net_values.setdefault("image_size", train_set.images.shape[2])
    net_values.setdefault("seed", args.seed)
    if net_values.get("learned", True) is False:
        net_values.setdefault("widths", ())
    config = NetworkConfig(**net_values)
    dtype = np.complex64 if values.get("dtype") == "complex64" else np.complex128
    model = Model(config, max(train_set.n_classes, test_set.n_classes), dtype=dtype)
    sgd = SGDConfig.from_values(values)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = Path(args.metrics) if args.metrics else out / "metrics.csv"
    try:
        report = train(model, train_set, test_set, sgd, seed=config.seed,
                       checkpoint_dir=out, metrics_csv=metrics)
    except DivergenceError as exc:
        print(f"training diverged: {exc}; last good checkpoint: {exc.checkpoint}", file=sys.stderr)
        return EXIT_FAIL
    model.save(out / "final.pct")
    if report.test_err:
        print(f"final test error {report.test_err[-1]:.2f}% after {len(report.test_err)} epochs")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


def run_checks(selected, seed=0, trials=None):
    """Run the selected theory checks; yields :class:`TheoremReport` objects."""
    if "eq1" in selected:
        yield theory.check_fourier_shift_random(trials or 100, seed=seed)
    if "thm1" in selected:
        for name, bank in shipped_banks().items():
            for idx, filt in enumerate(bank.filters):
                r = theory.check_translation_bound(filt, trials or 1000, seed=seed)
                r.name = f"translation_bound[{name}:{idx}]"
                yield r
    if "eq3" in selected:
        for name, bank in shipped_banks().items():
            r = theory.check_modulus_relu(bank.band_pass[0], n_images=trials or 100, seed=seed)
            r.name = f"modulus_relu[{name}]"
            yield r
    if "prox" in selected:
        yield theory.check_prox_random(trials or 10_000, seed=seed)
    if "thm2" in selected:
        for d in (1, 2, 4):
            r = theory.check_entropy_bound(theory.SyntheticEnsemble("complex_gaussian", d, seed=seed),
                                           mc_samples=trials or 100_000)
            r.name = f"entropy_bound[d={d}]"
            yield r
    if "thm3" in selected:
        for d in (2, 4, 8, 16):
            r = theory.check_sparsification_floor(d, trials=trials or 100, seed=seed)
            r.name = f"sparsification_floor[d={d}]"
            yield r


CHECKS = ("eq1", "thm1", "eq3", "prox", "thm2", "thm3")


def cmd_verify(args):
    selected = set(CHECKS) if args.all else {c for c in CHECKS if getattr(args, c)}
    if not selected:
        print("verify: nothing selected; use --all or one of " + ", ".join("--" + c for c in CHECKS),
              file=sys.stderr)
        return EXIT_USAGE
    failed = 0
    for report in run_checks(selected, args.seed, args.trials):
        print(report.line(), flush=True)
        failed += not report.passed
        if args.csv:
            io.append_csv(args.csv, theory.CSV_HEADER, report.csv_row())
    return EXIT_FAIL if failed else EXIT_OK


# ---------------------------------------------------------------------------
# bench


def _time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cmd_bench(args):
    rng = rng_stream(args.seed, "bench")
    rows = []
    taps = build_bank(4).band_pass[0].taps
    for size in args.sizes:
        x = rng.normal(size=(args.batch, size, size))
        for method in ("fft", "direct"):
            sec = _time(lambda: conv2d_periodic(x, taps, method=method), args.repeat)
            rows.append(["conv2d", method, size, args.batch, f"{sec:.6f}"])
    x = rng.normal(size=(args.batch, 3, 32, 32))
    for name, config in (("plain_J3", NetworkConfig.plain(3)), ("desk", NetworkConfig.desk(seed=args.seed))):
        net = ScatteringNetwork(config)
        sec = _time(lambda: net.forward(x), args.repeat)
        rows.append(["forward", name, 32, args.batch, f"{sec:.6f}"])
    for row in rows:
        print("{:<8} {:<9} size={:<4} batch={:<4} {}s".format(*row))
        if args.out:
            io.append_csv(args.out, ("op", "variant", "size", "batch", "seconds"), row)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="phasecollapse", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed for every random stream")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded BLAS/FFT for bit-reproducible runs")
    common.add_argument("--data-root", default=None, help=f"dataset directory (default ${io.DATA_ENV})")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("gen-filters", parents=[common], help="write filter images, manifest and taps")
    p.add_argument("--out", default="filters")
    p.add_argument("--L", type=int, default=4)
    p.add_argument("--grid", type=int, default=None)
    p.add_argument("--layer", choices=("first", "second", "both"), default="both")
    p.set_defaults(func=cmd_gen_filters)

    p = sub.add_parser("scatter", parents=[common], help="compute scattering features")
    p.add_argument("input", nargs="?", help="PGM/PPM image or .pct container with an 'images' tensor")
    p.add_argument("--dataset", choices=("mnist", "cifar10"))
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--n", type=int, default=None, help="number of dataset images")
    p.add_argument("--config", help="network config file (key = value)")
    p.add_argument("--plain", type=int, metavar="J", default=None, help="plain scattering of depth J")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scatter)

    p = sub.add_parser("train", parents=[common], help="train a network from a config file")
    p.add_argument("config")
    p.add_argument("--out", default="run")
    p.add_argument("--metrics", default=None, help="metrics CSV (default OUT/metrics.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", parents=[common], help="run numerical theory checks")
    p.add_argument("--all", action="store_true")
    p.add_argument("--eq1", action="store_true", help="Fourier shift identity")
    p.add_argument("--thm1", action="store_true", help="translation bound for every shipped filter")
    p.add_argument("--eq3", action="store_true", help="modulus from rectified phases")
    p.add_argument("--prox", action="store_true", help="soft threshold as proximal operator")
    p.add_argument("--thm2", action="store_true", help="phase entropy bound")
    p.add_argument("--thm3", action="store_true", help="l1 sparsification floor")
    p.add_argument("--trials", type=int, default=None, help="override the per-check trial count")
    p.add_argument("--csv", default=None, help="append reports to this CSV")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", parents=[common], help="time convolutions and forward passes")
    p.add_argument("--sizes", type=int, nargs="+", default=[16, 32, 64])
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--out", default=None, help="append timings to this CSV")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _deterministic(args.deterministic):
            return args.func(args)
    except (PhaseCollapseError, OSError) as exc:
        print(f"phasecollapse {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
