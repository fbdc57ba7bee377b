"""Report files: deterministic CSV and JSON writers."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

FILES = {
    "flip_offsets": "flip_offsets.csv",
    "memory_usage": "memory_usage.csv",
    "relocation_heatmap": "relocation_heatmap.csv",
    "table3": "table3.csv",
    "defense_verdicts": "defense_verdicts.json",
    "outcome": "outcome.json",
    "config": "config.yaml",
    "candidates": "candidates.tsv",
    "calibration": "calibration.json",
}


def _default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, (set, frozenset, tuple)):
        return sorted(obj) if isinstance(obj, (set, frozenset)) else list(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _round(obj, digits: int = 9):
    if isinstance(obj, float):
        return round(obj, digits)
    if isinstance(obj, dict):
        return {str(k): _round(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v, digits) for v in obj]
    return obj


def write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(_round(doc), fh, indent=2, sort_keys=True, default=_default)
        fh.write("\n")


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def usage_histogram(samples: dict, bin_percent: float = 1.0) -> list[tuple]:
    """(method, bin lower edge %, count) for every nonempty bin, sorted."""
    rows = []
    for method in sorted(samples):
        values = np.asarray(samples[method], float) * 100
        bins = np.floor(values / bin_percent).astype(int)
        for b, c in zip(*np.unique(bins, return_counts=True)):
            rows.append((method, f"{b * bin_percent:.2f}", int(c)))
    return rows


def write_memory_usage(path, samples: dict, bin_percent: float = 1.0) -> None:
    write_rows(path, ["method", "usage_percent", "runs"], usage_histogram(samples, bin_percent))


def write_heatmap(path, frames: np.ndarray, n_frames: int, bins: int) -> None:
    edges = np.linspace(0, n_frames, bins + 1).astype(np.int64)
    counts, _ = np.histogram(frames, bins=edges)
    write_rows(path, ["bin", "first_frame", "last_frame", "placements"],
               [(i, int(edges[i]), int(edges[i + 1]) - 1, int(c)) for i, c in enumerate(counts)])


def out_path(directory, name: str) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    return d / FILES[name]
