"""Reconstruction metrics and report assembly.

NMSE is reference-normalized squared error; PSNR uses the reference maximum
as its peak (common MRI practice). Both are reference-anchored and therefore
deliberately asymmetric in their arguments. Reports mirror the usual
quantitative-comparison tables: one mean +/- std row per (method, dataset),
with the best entries flagged.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, asdict

import numpy as np

__all__ = ["MetricRow", "nmse", "psnr", "assemble_report", "write_report"]

PSNR_CAP_DB = 99.0  # stands in for +inf when rec == ref

REPORT_COLUMNS = ["method", "dataset", "n", "nmse_mean", "nmse_std", "psnr_mean", "psnr_std"]


@dataclass
class MetricRow:
    method: str
    dataset: str
    n: int
    nmse_mean: float
    nmse_std: float
    psnr_mean: float
    psnr_std: float
    best_nmse: bool = False
    best_psnr: bool = False


def nmse(ref: np.ndarray, rec: np.ndarray) -> float:
    ref = np.asarray(ref, dtype=np.float64)
    rec = np.asarray(rec, dtype=np.float64)
    if ref.shape != rec.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {rec.shape}")
    denom = float(np.sum(ref**2))
    if denom == 0.0:
        raise ValueError("reference norm is zero")
    return float(np.sum((rec - ref) ** 2)) / denom


def psnr(ref: np.ndarray, rec: np.ndarray) -> float:
    ref = np.asarray(ref, dtype=np.float64)
    rec = np.asarray(rec, dtype=np.float64)
    if ref.shape != rec.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {rec.shape}")
    mse = float(np.mean((rec - ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    peak = float(ref.max())
    return 10.0 * np.log10(peak**2 / mse)


def assemble_report(runs: list) -> list:
    """Aggregate per-method results into table rows.

    ``runs`` is a list of dicts {"method", "dataset", "pairs": [(ref, rec), ...]}.
    Returns MetricRow items (best NMSE/PSNR flagged per dataset); raises on
    empty input or mismatched pairs.
    """
    if not runs:
        raise ValueError("no runs to report")
    rows = []
    per_image: dict[tuple, dict] = {}
    for run in runs:
        pairs = run["pairs"]
        if not pairs:
            raise ValueError(f"run {run['method']!r} has no image pairs")
        nm = [nmse(ref, rec) for ref, rec in pairs]
        ps = [psnr(ref, rec) for ref, rec in pairs]
        rows.append(
            MetricRow(
                method=run["method"],
                dataset=run["dataset"],
                n=len(pairs),
                nmse_mean=float(np.mean(nm)),
                nmse_std=float(np.std(nm)),
                psnr_mean=float(np.mean(ps)),
                psnr_std=float(np.std(ps)),
            )
        )
        per_image[(run["method"], run["dataset"])] = {"nmse": nm, "psnr": ps}
    for dataset in {r.dataset for r in rows}:
        group = [r for r in rows if r.dataset == dataset]
        min(group, key=lambda r: r.nmse_mean).best_nmse = True
        max(group, key=lambda r: r.psnr_mean).best_psnr = True
    for row in rows:
        row._per_image = per_image[(row.method, row.dataset)]  # carried to the JSON mirror
    return rows


def write_report(out_prefix, rows: list) -> None:
    """CSV (fixed column set) plus a JSON mirror with per-image values."""
    csv_path = str(out_prefix) + ".csv"
    tmp = csv_path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow(
                [row.method, row.dataset, row.n,
                 f"{row.nmse_mean:.6f}", f"{row.nmse_std:.6f}",
                 f"{row.psnr_mean:.4f}", f"{row.psnr_std:.4f}"]
            )
    os.replace(tmp, csv_path)

    payload = []
    for row in rows:
        entry = asdict(row)
        entry["per_image"] = getattr(row, "_per_image", None)
        payload.append(entry)
    json_path = str(out_prefix) + ".json"
    tmp = json_path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    os.replace(tmp, json_path)
