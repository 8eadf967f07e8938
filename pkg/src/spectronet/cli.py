"""Command-line entry point: ``spectronet {synth,train,clean,calibrate,plot}``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import calib, plots, siamese, synth
from .errors import SamplingError, SpectroNetError, TrainingDivergedError
from .spectra import OXIDES, Dataset, WavelengthMask, load_dataset, mask_dataset, save_dataset, table_lines

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("spectronet")


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {v}")
    return v


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer seed, got {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def archive_config(args: argparse.Namespace, out: Path, name: str) -> Path:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    path = out / f"config_{name}.json"
    path.write_text(json.dumps(cfg, indent=1, sort_keys=True, default=str) + "\n")
    return path


def resolve_mask(args, header: Optional[dict] = None) -> WavelengthMask:
    if getattr(args, "no_mask", False):
        return WavelengthMask(())
    if getattr(args, "mask_bands", None):
        return WavelengthMask.from_file(args.mask_bands)
    if header is not None and "mask_bands" in header.get("meta", {}):
        return WavelengthMask(tuple(tuple(b) for b in header["meta"]["mask_bands"]))
    return WavelengthMask.default()


def _load(args, header: Optional[dict] = None) -> Dataset:
    d = load_dataset(args.data)
    return mask_dataset(d, resolve_mask(args, header))


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    nm = synth.NoiseModel.default(args.grid, args.gain_sigma, args.white_sigma)
    d, truth = synth.gen_dataset(args.targets, args.shots, args.locations, args.grid, nm, args.seed,
                                 n_lines=args.lines)
    save_dataset(d, out)
    write_truth(out / "truth.csv", d, truth)
    archive_config(args, out, "synth")
    print(f"wrote {len(d)} spectra x {d.n_bins} bins for {args.targets} targets to {out}")
    return EXIT_OK


def write_truth(path: Path, d: Dataset, truth: synth.SyntheticTruth):
    """Two stacked spectra tables (signal then noise) tagged by a leading ``table`` column."""
    ids = [s.sample_id for s in d.samples]
    lines = table_lines(d.grid, ids, truth.signal, leading=("table", "signal"))
    lines += table_lines(d.grid, ids, truth.noise, leading=("table", "noise"))[1:]
    path.write_text("\n".join(lines) + "\n")


def read_truth(path) -> dict:
    """{"signal": (n_samples, N), "noise": (n_samples, N), "ids": [...], "grid": (N,)}"""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    ids = header[2:]
    blocks = {"signal": [], "noise": []}
    grid = []
    for row in rows[1:]:
        blocks[row[0]].append([float(v) for v in row[2:]])
        if row[0] == "signal":
            grid.append(float(row[1]))
    return {"ids": ids, "grid": np.array(grid),
            "signal": np.array(blocks["signal"]).T, "noise": np.array(blocks["noise"]).T}


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mask = resolve_mask(args)
    d = mask_dataset(load_dataset(args.data), mask)
    cfg = siamese.TrainConfig(
        batch_size=args.batch, epochs=args.epochs, lr=args.lr, momentum=args.momentum, n_align=args.n_align,
        lambda_rec=args.lambda_rec, lambda_orth=args.lambda_orth, lambda_align=args.lambda_align,
        similarity=args.loss_align, seed=args.seed, squared_rec=args.squared_rec,
        batches_per_epoch=args.batches_per_epoch, max_scale=args.max_scale,
        lr_decay_start=args.lr_decay_start,
    )
    arch = siamese.Arch(args.depth, args.features, args.kernel, args.residual)
    archive_config(args, out, "train")
    model = siamese.SiameseModel(d.n_bins, arch, seed=cfg.seed, max_scale=cfg.max_scale)
    model.meta["mask_bands"] = [list(b) for b in mask.bands]

    def report(st: siamese.EpochStats):
        print(f"epoch {st.epoch + 1}/{cfg.epochs} loss {st.loss:.6f} rec {st.reconstruction:.6f} "
              f"orth {st.orthogonality:.6f} align {st.alignment:.6f}", flush=True)

    try:
        model, trace = siamese.train(d, cfg, arch, model=model, on_epoch=report)
    except SamplingError as exc:
        raise SamplingError(f"{exc}. Training draws each tuple from {2 + cfg.n_align} different targets; "
                            "add targets or lower --n-align.") from None
    siamese.save_checkpoint(model, out / "model.ckpt")
    with (out / "loss_trace.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "reconstruction", "orthogonality", "alignment"])
        for st in trace:
            w.writerow([st.epoch, repr(st.loss), repr(st.reconstruction), repr(st.orthogonality), repr(st.alignment)])
    print(f"checkpoint written to {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_clean(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    header = siamese.read_checkpoint_header(ckpt)
    d = _load(args, header)
    model = siamese.load_checkpoint(ckpt, n_bins=d.n_bins)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    archive_config(args, out, "clean")
    t0 = time.perf_counter()
    cleaned = model.clean_matrix(d.intensity_matrix())
    rate = len(d) / max(time.perf_counter() - t0, 1e-9)
    cleaned_ds = Dataset([s.with_intensities(v) for s, v in zip(d.samples, cleaned)], d.grid, dict(d.labels))
    save_dataset(cleaned_ds, out)
    print(f"cleaned {len(d)} spectra; throughput {rate:.1f} spectra/s")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    header = None
    if args.rep == "cleaned":
        if not args.checkpoint:
            raise argparse.ArgumentTypeError("--rep cleaned requires --checkpoint")
        if not Path(args.checkpoint).is_file():
            raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
        header = siamese.read_checkpoint_header(args.checkpoint)
    d = _load(args, header)
    if args.rep == "cleaned":
        rep_fn = siamese.CleanedRep(siamese.load_checkpoint(args.checkpoint, n_bins=d.n_bins))
    else:
        rep_fn = lambda s: s.intensities  # noqa: E731
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    archive_config(args, out, f"calibrate_{args.rep}")
    cfg = calib.HeadConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch, seed=args.seed,
                           kfold=args.kfold, clamp_nonnegative=args.clamp)
    reps = calib.compute_representations(d, rep_fn)
    oxides = [args.oxide] if args.oxide else list(OXIDES)
    records = []
    for ox in oxides:
        rec = calib.loo_evaluate(d, None, ox, cfg, reps=reps, representation=args.rep)
        records.append(rec)
        print(f"{ox:6s} rmse {rec.rmse:.4f} maxe {rec.maxe:.4f} ({rec.n_rounds} rounds)", flush=True)
    calib.write_results(records, out / f"results_{args.rep}.csv")
    calib.write_summary(records, out / f"summary_{args.rep}.csv")
    return EXIT_OK


def cmd_plot(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    archive_config(args, out, "plot")
    written = 0
    for path in args.results or []:
        results = calib.read_results(path)
        if not results:
            raise SpectroNetError(f"{path}: results file has no rows")
        for ox, cols in results.items():
            r = calib.rmse(cols["prediction"], cols["truth"])
            fig = plots.scatter_figure(cols["truth"], cols["prediction"], ox, r)
            plots.save_svg(fig, out / f"scatter_{Path(path).stem}_{ox}.svg")
            written += 1
    if args.sample:
        if not (args.data and args.cleaned):
            raise argparse.ArgumentTypeError("--sample needs --data and --cleaned")
        raw = load_dataset(args.data)
        cleaned = load_dataset(args.cleaned)
        by_id = {s.sample_id: s for s in raw.samples}
        clean_by_id = {s.sample_id: s for s in cleaned.samples}
        for sid in args.sample:
            if sid not in by_id or sid not in clean_by_id:
                raise SpectroNetError(f"sample {sid!r} not found in both datasets")
            rs, cs = by_id[sid], clean_by_id[sid]
            keep = np.isin(rs.wavelengths, cs.wavelengths)
            fig = plots.overlay_figure(cs.wavelengths, rs.intensities[keep], cs.intensities, title=sid)
            plots.save_svg(fig, out / f"overlay_{sid}.svg")
            written += 1
    print(f"wrote {written} figures to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _mask_flags(p):
    p.add_argument("--mask-bands", type=Path, help="file of 'lo,hi' lines (default: the five standard bands)")
    p.add_argument("--no-mask", action="store_true", help="keep every bin")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spectronet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset with ground truth")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--targets", type=_positive_int, default=64)
    p.add_argument("--shots", type=_positive_int, default=16)
    p.add_argument("--locations", type=_positive_int, default=4)
    p.add_argument("--grid", type=_positive_int, default=512)
    p.add_argument("--lines", type=_positive_int, default=48)
    p.add_argument("--gain-sigma", type=float, default=0.1)
    p.add_argument("--white-sigma", type=float, default=0.03)
    p.add_argument("--seed", type=_seed, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the two-channel model")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=_seed, default=0)
    _mask_flags(p)
    p.add_argument("--epochs", type=_positive_int, default=60)
    p.add_argument("--batch", type=_positive_int, default=512)
    p.add_argument("--batches-per-epoch", type=_positive_int, default=None)
    p.add_argument("--lr", type=_positive_float, default=0.1)
    p.add_argument("--lr-decay-start", type=int, default=None,
                   help="hold lr until this epoch, then cosine-anneal to 0 (default: constant lr)")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--n-align", type=_positive_int, default=1)
    p.add_argument("--loss-align", choices=siamese.SIMILARITIES, default="cosine")
    p.add_argument("--lambda-rec", type=float, default=1.0)
    p.add_argument("--lambda-orth", type=float, default=1.0)
    p.add_argument("--lambda-align", type=float, default=1.0)
    p.add_argument("--squared-rec", action="store_true")
    p.add_argument("--max-scale", action="store_true")
    p.add_argument("--depth", type=_positive_int, default=18)
    p.add_argument("--features", type=_positive_int, default=64)
    p.add_argument("--kernel", type=_positive_int, default=3)
    p.add_argument("--residual", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("clean", help="write cleaned spectra with a trained model")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _mask_flags(p)
    p.set_defaults(func=cmd_clean)

    p = sub.add_parser("calibrate", help="leave-one-standard-out oxide calibration")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--rep", choices=("raw", "cleaned"), default="raw")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--oxide", choices=OXIDES)
    p.add_argument("--kfold", type=_positive_int)
    p.add_argument("--epochs", type=_positive_int, default=200)
    p.add_argument("--batch", type=_positive_int, default=64)
    p.add_argument("--lr", type=_positive_float, default=1.0)
    p.add_argument("--clamp", action="store_true", help="clip predictions at 0 wt%%")
    p.add_argument("--seed", type=_seed, default=0)
    _mask_flags(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("plot", help="render SVG figures")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--results", type=Path, nargs="*")
    p.add_argument("--data", type=Path)
    p.add_argument("--cleaned", type=Path)
    p.add_argument("--sample", action="append")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except argparse.ArgumentTypeError as exc:
        parser.print_usage(sys.stderr)
        print(f"spectronet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (SpectroNetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # configuration rejected by a dataclass validator
        parser.print_usage(sys.stderr)
        print(f"spectronet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
