"""Command-line entry point: ``dpcc <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from dpcc.checkpoint import load_checkpoint, save_checkpoint
from dpcc.codec.bitstream import FRAME_I, pack_sequence, unpack_sequence
from dpcc.codec.networks import CodecModel
from dpcc.codec.pipeline import decode_sequence, encode_sequence
from dpcc.codec.training import make_pairs, train
from dpcc.config import Config, load_config, toy_config
from dpcc.errors import DpccError, UsageError
from dpcc.metrics import RdCurve, RdRow, bd_rate, curves_from_rows, d1_psnr, read_rd_csv, write_rd_csv
from dpcc.ply import read_ply, write_ply
from dpcc.voxel import voxelize

log = logging.getLogger("dpcc")


def list_frames(directory) -> List[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"frame directory not found: {directory}")
    files = sorted(directory.glob("*.ply"))
    if not files:
        raise UsageError(f"no .ply files in {directory}")
    return files


def read_voxels(path) -> np.ndarray:
    """Read a PLY whose coordinates are already integer voxels."""
    pts = read_ply(path)
    coords = np.round(pts)
    if not np.array_equal(coords, pts):
        raise UsageError(f"{path}: coordinates are not integers; run 'dpcc voxelize' first")
    return coords.astype(np.int64)


def read_frames(directory) -> List[np.ndarray]:
    return [read_voxels(p) for p in list_frames(directory)]


def _config_from_args(args) -> Config:
    cfg = load_config(args.config) if args.config else (toy_config() if args.preset == "toy" else Config())
    overrides = {"lam": args.lam, "steps": args.steps, "blocks": args.blocks, "seed": args.seed, "depth": args.depth}
    return cfg.replace(**{k: v for k, v in overrides.items() if v is not None})


def cmd_voxelize(args) -> int:
    coords = voxelize(read_ply(args.input), args.depth)
    write_ply(args.output, coords, binary=args.binary)
    print(f"{len(coords)} voxels at depth {args.depth} -> {args.output}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    pairs = []
    for directory in args.frames:
        frames = read_frames(directory)
        if len(frames) < 2:
            raise UsageError(f"{directory}: training needs at least two consecutive frames")
        pairs += make_pairs(frames, cfg.blocks)
    torch.manual_seed(cfg.seed)
    model = CodecModel(cfg)

    def report(step, terms):
        if args.log_every and (step % args.log_every == 0 or step == cfg.steps - 1):
            print(f"step {step:5d}  J={terms.loss:.4f}  R={terms.rate:.4f} bpp  D={terms.distortion:.4f}", flush=True)

    train(model, pairs, cfg.steps, cfg.lam, cfg.seed, callback=report)
    h = save_checkpoint(model, args.ckpt, cfg)
    print(f"saved {args.ckpt} (hash {h:016x})")
    return 0


def cmd_encode(args) -> int:
    model, cfg, h = load_checkpoint(args.ckpt)
    gop = args.gop if args.gop is not None else cfg.gop
    encoded = encode_sequence(read_frames(args.frames), model, gop)
    blob = pack_sequence([e.bitstream for e in encoded])
    Path(args.output).write_bytes(blob)
    total = sum(e.bitstream.n_full for e in encoded)
    print(f"{len(encoded)} frames, {len(blob)} bytes, {8 * len(blob) / total:.4f} bpp -> {args.output}")
    return 0


def cmd_decode(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    frames = unpack_sequence(Path(args.input).read_bytes())
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    for i, coords in enumerate(decode_sequence(frames, model)):
        write_ply(out / f"frame_{i:04d}.ply", coords, binary=True)
    print(f"decoded {len(frames)} frames -> {out}")
    return 0


def _psnr_job(job):
    ref_path, dec_path, depth = job
    return d1_psnr(read_voxels(ref_path), read_voxels(dec_path), depth)


def cmd_eval(args) -> int:
    refs, decs = list_frames(args.ref), list_frames(args.dec)
    frames = unpack_sequence(Path(args.bits).read_bytes())
    if not len(refs) == len(decs) == len(frames):
        raise UsageError(f"frame counts differ: ref {len(refs)}, dec {len(decs)}, bitstream {len(frames)}")
    jobs = [(r, d, f.depth) for r, d, f in zip(refs, decs, frames)]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            psnrs = list(pool.map(_psnr_job, jobs))
    else:
        psnrs = [_psnr_job(j) for j in jobs]
    label = args.label or Path(args.ref).name
    rows = []
    for i, (bits, psnr) in enumerate(zip(frames, psnrs)):
        bpp = bits.bpp()
        rows.append(RdRow(label, i, "I" if bits.frame_type == FRAME_I else "P",
                          bpp["coords"], bpp["feats"], bpp["total"], psnr))
    write_rd_csv(rows, args.csv, append=args.append)
    mean_bpp = np.mean([r.bpp_total for r in rows])
    mean_psnr = np.mean([r.d1_psnr for r in rows])
    print(f"{label}: {len(rows)} frames, {mean_bpp:.4f} bpp, D1 {mean_psnr:.2f} dB -> {args.csv}")
    if args.plot:
        from dpcc.plotting import plot_frames

        plot_frames(rows, args.plot)
    return 0


def _curve(path) -> RdCurve:
    points = curves_from_rows(read_rd_csv(path))
    try:
        return RdCurve(points.values())
    except ValueError as exc:
        raise UsageError(f"{path}: {exc} (one point per sequence label)") from exc


def cmd_bdrate(args) -> int:
    test, anchor = _curve(args.test), _curve(args.anchor)
    value = bd_rate(test, anchor)
    print(f"{value:.2f}%")
    if args.plot:
        from dpcc.plotting import plot_rd_curves

        plot_rd_curves({Path(args.test).stem: test, Path(args.anchor).stem: anchor}, args.plot,
                       title=f"BD-rate {value:.2f}%")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpcc", description="Learned dynamic point cloud geometry codec.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("voxelize", help="quantize a PLY cloud onto a 2^depth grid")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--depth", type=int, default=10)
    p.add_argument("--binary", action="store_true", help="write binary little-endian PLY")
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("train", help="train a model on consecutive frame pairs")
    p.add_argument("--frames", required=True, nargs="+",
                   help="one or more directories of voxelized .ply frames, each one sequence sorted by name")
    p.add_argument("--ckpt", required=True, help="output checkpoint path")
    p.add_argument("--config", help="INI file with a [dpcc] section")
    p.add_argument("--preset", choices=("default", "toy"), default="default")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--blocks", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="code a frame directory into one bitstream")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--gop", type=int)
    p.add_argument("output")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a bitstream into PLY frames")
    p.add_argument("--ckpt", required=True)
    p.add_argument("input")
    p.add_argument("outdir")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="per-frame rate and D1 PSNR as CSV")
    p.add_argument("--ref", required=True)
    p.add_argument("--dec", required=True)
    p.add_argument("--bits", required=True)
    p.add_argument("--csv", required=True)
    p.add_argument("--label", help="sequence label (default: name of the --ref directory)")
    p.add_argument("--append", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--plot", help="also write a per-frame figure to this path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bdrate", help="BD-rate of one RD CSV against another")
    p.add_argument("--test", required=True)
    p.add_argument("--anchor", required=True)
    p.add_argument("--plot", help="also write the RD curves to this path")
    p.set_defaults(func=cmd_bdrate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DpccError, OSError, ValueError) as exc:
        print(f"dpcc {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
