"""Sample directories: run N seeded RR samples plus IEEE, then summarize them.

Layout of one subject's sample directory::

    manifest.json        seeds, precision, pipeline config and its hash
    subject/             input image (+ ground-truth labels for synthetic subjects)
    ieee/                the IEEE reference run
    rr_000/ ... rr_NNN/  one directory per RR sample

Each run directory holds ``warp`` and ``image`` volumes (registration),
``labels`` (segmentation) and ``trace.csv`` for gradient-descent pipelines.
A sweep over several subjects writes one such directory per subject under
the root plus a root ``manifest.json`` listing them.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .mca import RRContext, derive_seed, validate_precision
from .nn import WeightStore
from .pipelines import PipelineConfig, default_weights, run_pipeline
from .segmetrics import LabelVolume, entropy_map, min_pairwise_dice
from .significance import SampleSet, mantissa_bits_for, mean_sigbits, significant_bits
from .stats import DegenerateError, bonferroni, paired_t_test
from .volume_io import VolumeHeader, read_csv, read_volume, synth_subject, write_csv, write_volume

__all__ = [
    "ComparisonRow",
    "PipelineFailure",
    "SampleDir",
    "compare_tables",
    "dice_table",
    "entropy_table",
    "load_table",
    "run_samples",
    "run_subjects",
    "sigbits_map",
    "sigbits_table",
    "subject_dirs",
    "subject_key",
    "write_comparison",
]

MANIFEST = "manifest.json"
TARGETS = ("image", "warp")


class PipelineFailure(RuntimeError):
    """The IEEE reference run of a subject failed."""


def subject_key(seed: int) -> str:
    return f"sub-{int(seed):04d}"


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _weights_digest(weights: WeightStore) -> str:
    h = hashlib.sha256(weights.spec.to_json().encode())
    for name in sorted(weights.tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(weights.tensors[name], dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def _write_result(result, run_dir: Path) -> list[str]:
    files = []
    if result.warp is not None:
        write_volume(VolumeHeader(result.warp.shape, "f64", kind="warp"), result.warp, run_dir / "warp")
        files += ["warp.json", "warp.raw"]
    if result.image is not None:
        write_volume(VolumeHeader(result.image.shape, "f64", kind="image"), result.image, run_dir / "image")
        files += ["image.json", "image.raw"]
    if result.labels is not None:
        header = VolumeHeader(result.labels.shape, "u16", kind="labels",
                              region_table=result.labels.region_table)
        write_volume(header, result.labels, run_dir / "labels")
        files += ["labels.json", "labels.raw"]
    if result.trace is not None:
        result.trace.write_csv(run_dir / "trace.csv")
        files.append("trace.csv")
    return files


def _run_one(cfg: PipelineConfig, subject: np.ndarray, weights: WeightStore | None,
             ctx: RRContext, run_dir: Path) -> dict:
    try:
        result = run_pipeline(cfg, subject, ctx, weights)
    except Exception as exc:  # recorded per sample, the sweep continues
        return {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    return {"status": "ok", "files": _write_result(result, run_dir)}


def run_samples(cfg: PipelineConfig, subject: np.ndarray, outdir: str | os.PathLike, *,
                n: int, t: int, seed0: int = 0, jobs: int = 1, only_inexact: bool = False,
                weights: WeightStore | None = None, subject_labels: LabelVolume | None = None,
                subject_info: dict | None = None) -> dict:
    """IEEE reference plus ``n`` RR samples of one subject into ``outdir``.

    Sample ``i`` uses Philox key ``derive_seed(seed0, i)``, so its outputs do
    not depend on ``jobs`` or execution order. Raises
    :class:`PipelineFailure` (after writing the manifest) if the IEEE run
    fails; failed RR samples are only recorded.
    """
    if n < 2:
        raise ValueError(f"need n >= 2 RR samples, got {n}")
    if jobs < 1:
        raise ValueError("jobs must be >= 1")
    validate_precision(t)
    if weights is None and cfg.pipeline.startswith("cnn"):
        weights = default_weights(cfg)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    subject = np.asarray(subject, dtype=np.float64)
    write_volume(VolumeHeader(subject.shape, "f64", kind="image"), subject, outdir / "subject" / "image")
    subject_files = ["subject/image.json", "subject/image.raw"]
    if subject_labels is not None:
        header = VolumeHeader(subject_labels.shape, "u16", kind="labels",
                              region_table=subject_labels.region_table)
        write_volume(header, subject_labels, outdir / "subject" / "labels")
        subject_files += ["subject/labels.json", "subject/labels.raw"]

    runs = [("ieee", None, RRContext.ieee())]
    for i in range(n):
        seed = derive_seed(seed0, i)
        runs.append((f"rr_{i:03d}", seed, RRContext(t, seed=seed, only_inexact=only_inexact)))
    if jobs == 1:
        outcomes = [_run_one(cfg, subject, weights, ctx, outdir / name) for name, _, ctx in runs]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_one, cfg, subject, weights, ctx, outdir / name)
                       for name, _, ctx in runs]
            outcomes = [f.result() for f in futures]

    samples = []
    for (name, seed, _), outcome in zip(runs, outcomes):
        rec = {"name": name, "seed": seed, **outcome}
        if "files" in rec:
            rec["files"] = [f"{name}/{f}" for f in rec["files"]]
        samples.append(rec)
    manifest = {
        "pipeline": cfg.pipeline,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "precision": t,
        "mantissa_bits": mantissa_bits_for(t),
        "n": n,
        "seed0": seed0,
        "only_inexact": only_inexact,
        "weights": None if weights is None else _weights_digest(weights),
        "subject": {**(subject_info or {}), "files": subject_files},
        "samples": samples,
    }
    _dump(outdir / MANIFEST, manifest)
    if samples[0]["status"] != "ok":
        raise PipelineFailure(f"IEEE reference run failed for {outdir}: {samples[0]['error']}")
    return manifest


def run_subjects(cfg: PipelineConfig, seeds: Sequence[int], root: str | os.PathLike, *,
                 n: int, t: int, seed0: int = 0, jobs: int = 1, only_inexact: bool = False,
                 weights: WeightStore | None = None, jitter: float = 1.0) -> dict:
    """:func:`run_samples` for each synthetic subject seed under ``root``."""
    root = Path(root)
    subjects, failed = [], []
    for s in seeds:
        image, labels = synth_subject(s, cfg.shape, cfg.n_regions, jitter, cfg.layout_seed)
        key = subject_key(s)
        try:
            run_samples(cfg, image, root / key, n=n, t=t, seed0=seed0, jobs=jobs,
                        only_inexact=only_inexact, weights=weights, subject_labels=labels,
                        subject_info={"key": key, "seed": int(s), "jitter": jitter})
        except PipelineFailure as exc:
            failed.append({"key": key, "error": str(exc)})
            continue
        subjects.append(key)
    manifest = {"pipeline": cfg.pipeline, "config_hash": cfg.config_hash(), "subjects": subjects,
                "failed": failed}
    _dump(root / MANIFEST, manifest)
    if failed:
        raise PipelineFailure(f"IEEE run failed for {[f['key'] for f in failed]}")
    return manifest


@dataclass
class SampleDir:
    path: Path
    manifest: dict

    @classmethod
    def open(cls, path: str | os.PathLike) -> "SampleDir":
        path = Path(path)
        try:
            manifest = json.loads((path / MANIFEST).read_text())
        except FileNotFoundError:
            raise FileNotFoundError(f"no {MANIFEST} in {path}") from None
        if "samples" not in manifest:
            raise ValueError(f"{path} is a sweep root, not a sample directory")
        return cls(path, manifest)

    @property
    def key(self) -> str:
        return self.manifest.get("subject", {}).get("key") or self.path.name

    @property
    def mantissa_bits(self) -> int:
        return int(self.manifest["mantissa_bits"])

    def _ok(self, name: str) -> bool:
        return any(s["name"] == name and s["status"] == "ok" for s in self.manifest["samples"])

    def rr_names(self) -> list[str]:
        return [s["name"] for s in self.manifest["samples"]
                if s["name"] != "ieee" and s["status"] == "ok"]

    def load(self, name: str, item: str):
        _, data = read_volume(self.path / name / item)
        return data

    def reference(self, item: str):
        if not self._ok("ieee") or not (self.path / "ieee" / f"{item}.json").exists():
            raise FileNotFoundError(f"missing IEEE reference {item!r} in {self.path}")
        return self.load("ieee", item)

    def samples(self, item: str) -> list:
        return [self.load(name, item) for name in self.rr_names()]


def subject_dirs(path: str | os.PathLike) -> list[SampleDir]:
    """The sample directories under ``path`` (itself, or a sweep's subjects)."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"no {MANIFEST} in {path}") from None
    if "samples" in manifest:
        return [SampleDir(path, manifest)]
    return [SampleDir.open(path / key) for key in manifest["subjects"]]


def sigbits_map(sd: SampleDir, target: str, mode: str = "absolute") -> np.ndarray:
    """Voxel-wise significant bits; warp maps are averaged over components."""
    if target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}, got {target!r}")
    ref = sd.reference(target)
    samples = sd.samples(target)
    sb = significant_bits(SampleSet.from_arrays(samples, ref, sd.mantissa_bits), mode)
    if target == "warp":
        return sb.mean(axis=0)
    return sb.astype(np.float64)


def sigbits_table(path, target: str, out: str | os.PathLike | None = None,
                  mode: str = "absolute") -> list[dict]:
    """Per-subject mean significant bits; writes maps and ``sigbits.csv``."""
    rows = []
    for sd in subject_dirs(path):
        sb = sigbits_map(sd, target, mode)
        if out is not None:
            write_volume(VolumeHeader(sb.shape, "f64", kind="sigbits"), sb,
                         Path(out) / f"{sd.key}_{target}_sigbits")
        rows.append({"subject": sd.key, "target": target, "mean_sigbits": mean_sigbits(sb)})
    if out is not None:
        write_csv(Path(out) / "sigbits.csv", ["subject", "target", "mean_sigbits"],
                  [[r["subject"], r["target"], r["mean_sigbits"]] for r in rows])
    return rows


def _label_runs(sd: SampleDir, include_ieee: bool = False) -> list[LabelVolume]:
    """Every RR sample, optionally padded with the IEEE run, on one region table."""
    ref = sd.reference("labels")
    names, vols = sd.rr_names(), sd.samples("labels")
    if include_ieee:
        names, vols = ["ieee"] + names, [ref] + vols
    for name, v in zip(names, vols):
        if v.region_table != ref.region_table:
            raise ValueError(f"region table of {sd.path / name} differs from the IEEE run")
    if len(vols) < 2:
        raise ValueError(f"{sd.path}: need at least 2 label runs, found {len(vols)}")
    return vols


def _select_regions(table: dict[int, str], regions: Sequence[int] | None) -> list[int]:
    if regions is None:
        return sorted(table)
    unknown = [r for r in regions if r not in table]
    if unknown:
        raise ValueError(f"regions {unknown} not in region table {sorted(table)}")
    return list(regions)


def dice_table(path, regions: Sequence[int] | None = None,
               out: str | os.PathLike | None = None, include_ieee: bool = False) -> list[dict]:
    rows = []
    for sd in subject_dirs(path):
        vols = _label_runs(sd, include_ieee)
        table = vols[0].region_table
        for r in _select_regions(table, regions):
            rows.append({"subject": sd.key, "region": table[r], "min_dice": min_pairwise_dice(vols, r)})
    if out is not None:
        write_csv(Path(out) / "dice.csv", ["subject", "region", "min_dice"],
                  [[r["subject"], r["region"], r["min_dice"]] for r in rows])
    return rows


def entropy_table(path, regions: Sequence[int] | None = None,
                  out: str | os.PathLike | None = None, include_ieee: bool = False) -> list[dict]:
    rows = []
    for sd in subject_dirs(path):
        vols = _label_runs(sd, include_ieee)
        ent = entropy_map(vols, _select_regions(vols[0].region_table, regions))
        if out is not None:
            write_volume(VolumeHeader(ent.shape, "f64", kind="entropy"), ent,
                         Path(out) / f"{sd.key}_entropy")
        rows.append({"subject": sd.key, "mean_entropy": float(ent.mean()),
                     "nonzero_voxels": int(np.count_nonzero(ent))})
    if out is not None:
        write_csv(Path(out) / "entropy.csv", ["subject", "mean_entropy", "nonzero_voxels"],
                  [[r["subject"], r["mean_entropy"], r["nonzero_voxels"]] for r in rows])
    return rows


VALUE_COLUMNS = ("mean_sigbits", "min_dice", "mean_entropy")
TARGET_COLUMNS = ("target", "region")


@dataclass
class ComparisonRow:
    target: str
    n: int
    mean_a: float
    mean_b: float
    t: float | None
    p_value: float | None
    p_corrected: float | None
    flagged: bool
    note: str = ""

    @property
    def mean_diff(self) -> float:
        return self.mean_a - self.mean_b


def _keyed(rows: list[dict], value_col: str, target_col: str | None):
    out: dict[tuple[str, str], float] = {}
    for r in rows:
        key = (r[target_col] if target_col else "all", r["subject"])
        if key in out:
            raise ValueError(f"duplicate row for subject {key[1]!r}, target {key[0]!r}")
        out[key] = float(r[value_col])
    return out


def _columns(rows: list[dict], label: str) -> tuple[str, str | None]:
    if not rows:
        raise ValueError(f"{label} has no rows")
    cols = set(rows[0])
    if "subject" not in cols:
        raise ValueError(f"{label} has no 'subject' column")
    values = [c for c in VALUE_COLUMNS if c in cols]
    if len(values) != 1:
        raise ValueError(f"{label} needs exactly one of {VALUE_COLUMNS}, found columns {sorted(cols)}")
    targets = [c for c in TARGET_COLUMNS if c in cols]
    return values[0], (targets[0] if targets else None)


def compare_tables(rows_a: list[dict], rows_b: list[dict], alpha: float = 0.05,
                   m_tests: int | None = None) -> list[ComparisonRow]:
    """Paired two-tailed t-test of A against B per target, Bonferroni-corrected.

    Rows pair on ``(target, subject)``; every key must appear in both tables.
    ``m_tests`` defaults to the number of targets. Zero-variance targets are
    reported with a note and never flagged.
    """
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    col_a = _columns(rows_a, "run A")
    col_b = _columns(rows_b, "run B")
    if col_a != col_b:
        raise ValueError(f"tables measure different things: {col_a} vs {col_b}")
    a = _keyed(rows_a, *col_a)
    b = _keyed(rows_b, *col_b)
    unmatched = sorted(set(a) ^ set(b))
    if unmatched:
        listed = ", ".join(f"{s}/{t}" for t, s in unmatched)
        raise ValueError(f"unmatched subject keys: {listed}")
    targets = sorted({t for t, _ in a})
    m = len(targets) if m_tests is None else int(m_tests)
    results = []
    for target in targets:
        subjects = sorted(s for t, s in a if t == target)
        xa = [a[(target, s)] for s in subjects]
        xb = [b[(target, s)] for s in subjects]
        mean_a, mean_b = math.fsum(xa) / len(xa), math.fsum(xb) / len(xb)
        try:
            res = paired_t_test(xa, xb)
        except DegenerateError as exc:
            results.append(ComparisonRow(target, len(xa), mean_a, mean_b, None, None, None, False, str(exc)))
            continue
        p_corr = bonferroni([res.p_value], m)[0]
        results.append(ComparisonRow(target, len(xa), mean_a, mean_b, res.t, res.p_value, p_corr,
                                     p_corr < alpha))
    return results


def write_comparison(rows: list[ComparisonRow], path: str | os.PathLike) -> None:
    write_csv(path, ["target", "n", "mean_a", "mean_b", "mean_diff", "t", "p_value", "p_corrected",
                     "flagged", "note"],
              [[r.target, r.n, r.mean_a, r.mean_b, r.mean_diff,
                "" if r.t is None else r.t, "" if r.p_value is None else r.p_value,
                "" if r.p_corrected is None else r.p_corrected, str(r.flagged).lower(), r.note]
               for r in rows])


def load_table(path: str | os.PathLike) -> list[dict]:
    return read_csv(path)
