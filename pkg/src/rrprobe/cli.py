"""Command-line harness: ``rrprobe sample | sigbits | dice | entropy | compare | render``.

Exit codes: 0 success, 2 validation error, 3 pipeline failure (an IEEE
reference run failed). ``RRPROBE_OUTPUT_ROOT`` sets the default root for
sample directories.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Sequence

from .harness import (PipelineFailure, compare_tables, dice_table, entropy_table,
                      load_table, run_samples, run_subjects, sigbits_table, subject_dirs,
                      write_comparison)
from .mca import validate_precision
from .nn import WeightStore
from .pipelines import PIPELINES, PipelineConfig
from .registration import RegistrationConfig
from .render import CMAPS, render_slice
from .volume_io import read_volume

ENV_OUTPUT_ROOT = "RRPROBE_OUTPUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_PIPELINE = 0, 2, 3


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.replace("x", ",").split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def output_root() -> Path:
    return Path(os.environ.get(ENV_OUTPUT_ROOT) or "rrprobe-out")


def _analysis_dir(sampledir: str, out: str | None) -> Path:
    if out:
        return Path(out)
    p = Path(sampledir).resolve()
    return p.with_name(p.name + "_analysis")


def cmd_sample(args) -> int:
    validate_precision(args.t)
    reg = RegistrationConfig(lambda_smooth=args.lambda_smooth, step_size=args.step_size,
                             iterations=args.iterations)
    weights = WeightStore.load(args.weights) if args.weights else None
    outdir = Path(args.outdir) if args.outdir else output_root() / args.pipeline
    common = dict(n=args.n, t=args.t, seed0=args.seed0, jobs=args.jobs,
                  only_inexact=args.only_inexact, weights=weights)
    if args.subject:
        header, image = read_volume(args.subject)
        if header.kind != "image":
            raise ValueError(f"{args.subject} holds a {header.kind} volume, expected image")
        cfg = PipelineConfig(args.pipeline, header.shape, args.n_regions, args.layout_seed,
                             args.weights_seed, registration=reg)
        key = Path(args.subject).with_suffix("").name
        manifest = run_samples(cfg, image, outdir, subject_info={"key": key, "path": str(args.subject)},
                               **common)
        _report_samples(outdir, manifest)
        return EXIT_OK
    cfg = PipelineConfig(args.pipeline, tuple(args.shape), args.n_regions, args.layout_seed,
                         args.weights_seed, registration=reg)
    seeds = [args.subject_seed + k for k in range(args.subjects)]
    run_subjects(cfg, seeds, outdir, jitter=args.jitter, **common)
    for sd in subject_dirs(outdir):
        _report_samples(sd.path, sd.manifest)
    return EXIT_OK


def _report_samples(outdir: Path, manifest: dict) -> None:
    ok = sum(s["status"] == "ok" for s in manifest["samples"])
    print(f"{outdir}: {ok}/{len(manifest['samples'])} runs ok "
          f"(pipeline {manifest['pipeline']}, t={manifest['precision']}, "
          f"config {manifest['config_hash']})")
    for s in manifest["samples"]:
        if s["status"] != "ok":
            print(f"  {s['name']} failed: {s['error']}")


def _regions(args) -> list[int] | None:
    return args.regions if args.regions else None


def cmd_sigbits(args) -> int:
    out = _analysis_dir(args.sampledir, args.out)
    for row in sigbits_table(args.sampledir, args.target, out, args.mode):
        print(f"{row['subject']}\t{row['target']}\t{row['mean_sigbits']:.4f}")
    return EXIT_OK


def cmd_dice(args) -> int:
    out = _analysis_dir(args.sampledir, args.out)
    for row in dice_table(args.sampledir, _regions(args), out, args.include_ieee):
        print(f"{row['subject']}\t{row['region']}\t{row['min_dice']:.6f}")
    return EXIT_OK


def cmd_entropy(args) -> int:
    out = _analysis_dir(args.sampledir, args.out)
    for row in entropy_table(args.sampledir, _regions(args), out, args.include_ieee):
        print(f"{row['subject']}\tmean {row['mean_entropy']:.6g}\tnonzero {row['nonzero_voxels']}")
    return EXIT_OK


def cmd_compare(args) -> int:
    rows = compare_tables(load_table(args.run_a), load_table(args.run_b), args.alpha, args.m_tests)
    if args.out:
        write_comparison(rows, args.out)
    for r in rows:
        if r.t is None:
            print(f"{r.target}\tn={r.n}\tdiff {r.mean_diff:+.4f}\t{r.note}")
            continue
        mark = " *" if r.flagged else ""
        print(f"{r.target}\tn={r.n}\tdiff {r.mean_diff:+.4f}\tt={r.t:.4f}\t"
              f"p={r.p_value:.3g}\tcorrected={r.p_corrected:.3g}{mark}")
    flagged = sum(r.flagged for r in rows)
    print(f"{flagged}/{len(rows)} targets differ at corrected p < {args.alpha}")
    return EXIT_OK


def cmd_render(args) -> int:
    header, data = read_volume(args.volume)
    arr = getattr(data, "labels", data)
    if header.kind == "warp":
        arr = arr[args.component]
    out = Path(args.out) if args.out else Path(args.volume).with_suffix(".png")
    render_slice(arr, out, args.axis, args.index, args.vmin, args.vmax, args.cmap)
    print(out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rrprobe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="run the IEEE reference and N RR samples of a pipeline")
    p.add_argument("--pipeline", required=True, choices=PIPELINES)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--subject", help="input image volume (stem, .raw or .json)")
    src.add_argument("--subject-seed", type=int, default=0, help="synthetic subject seed (default 0)")
    p.add_argument("--subjects", type=int, default=1, help="sweep k synthetic subjects from --subject-seed")
    p.add_argument("--n", type=int, default=10, help="RR samples per subject (default 10)")
    p.add_argument("--t", type=int, default=53, help="virtual precision (default 53)")
    p.add_argument("--seed0", type=int, default=0)
    p.add_argument("--outdir", help=f"default ${ENV_OUTPUT_ROOT}/<pipeline>")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--only-inexact", action="store_true", help="skip perturbing exact results")
    p.add_argument("--shape", type=_ints, default=[32, 32, 32])
    p.add_argument("--n-regions", type=int, default=6)
    p.add_argument("--layout-seed", type=int, default=0)
    p.add_argument("--jitter", type=float, default=1.0)
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--lambda-smooth", type=float, default=0.1)
    p.add_argument("--step-size", type=float, default=1.0)
    p.add_argument("--weights", help="WeightStore directory (overrides --weights-seed)")
    p.add_argument("--weights-seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("sigbits", help="significant-bit maps and per-subject means")
    p.add_argument("sampledir")
    p.add_argument("--target", choices=("image", "warp"), default="warp")
    p.add_argument("--mode", choices=("absolute", "relative"), default="absolute")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sigbits)

    for name, func, text in (("dice", cmd_dice, "minimum pairwise Dice per region"),
                             ("entropy", cmd_entropy, "voxel entropy maps")):
        p = sub.add_parser(name, help=text)
        p.add_argument("sampledir")
        p.add_argument("--regions", type=_ints, help="comma-separated region ids (default all)")
        p.add_argument("--include-ieee", action="store_true",
                       help="count the IEEE run as one more sample (pads small n)")
        p.add_argument("--out")
        p.set_defaults(func=func)

    p = sub.add_parser("compare", help="paired t-tests between two summary CSVs")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--m-tests", type=int, help="Bonferroni family size (default: number of targets)")
    p.add_argument("--out", help="report CSV")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("render", help="PNG of one slice of a volume")
    p.add_argument("volume")
    p.add_argument("--out")
    p.add_argument("--axis", type=int, default=0)
    p.add_argument("--index", type=int)
    p.add_argument("--component", type=int, default=0, help="warp component to show")
    p.add_argument("--vmin", type=float)
    p.add_argument("--vmax", type=float)
    p.add_argument("--cmap", choices=CMAPS, default="gray")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PipelineFailure as exc:
        print(f"pipeline failure: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except (ValueError, TypeError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
