"""Continuous annotation of long records with a trained downstream model.

Windows of 1024 samples slide across the record at a configurable stride;
each window gets the model's estimate (probability for binary tasks,
physical-unit values for regression). An optional centered moving average
smooths each output column. Episodes are extracted from probability tracks
by a run-length rule.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path

import numpy as np
import torch

from .curate import CLIP_THRESHOLD_MV
from .downstream import TASKS, DownstreamModel
from .encoder import INPUT_SAMPLES
from .errors import ConfigurationError, DomainError
from .synth import SAMPLE_RATE_HZ

TASK_COLUMNS = {
    "age": ("age_years",),
    "sex": ("sex_prob",),
    "afib": ("afib_prob",),
    "intervals": ("qrs_ms", "qt_ms", "pr_ms", "ventricular_rate_bpm"),
}


@dataclasses.dataclass
class AnnotationTrack:
    record_id: str
    task: str
    stride: int
    smoothing: int
    times_s: np.ndarray       # (n,) window start times
    values: np.ndarray        # (n, d) raw per-window estimates
    smoothed: np.ndarray      # (n, d); equals values when smoothing == 1
    flags: np.ndarray         # (n,) bool, True = window overlaps clipped samples

    @property
    def columns(self) -> tuple[str, ...]:
        return TASK_COLUMNS[self.task]


def window_offsets(n_samples: int, stride: int,
                   window: int = INPUT_SAMPLES) -> np.ndarray:
    """Start indices of every full window; empty when the record is shorter
    than one window."""
    if stride < 1:
        raise DomainError("stride must be >= 1")
    if n_samples < window:
        return np.zeros(0, dtype=np.int64)
    return np.arange(0, n_samples - window + 1, stride, dtype=np.int64)


def moving_average(values: np.ndarray, width: int) -> np.ndarray:
    """Centered moving average per column; the window shrinks at the edges,
    so every smoothed value stays inside the local min/max envelope."""
    if width < 1 or width % 2 == 0:
        raise ConfigurationError("smoothing width must be a positive odd integer")
    if width == 1:
        return values.copy()
    half = width // 2
    n = len(values)
    out = np.empty_like(values, dtype=np.float64)
    csum = np.concatenate([np.zeros((1,) + values.shape[1:]),
                           np.cumsum(values, axis=0)])
    for i in range(n):
        lo, hi = max(0, i - half), min(n, i + half + 1)
        out[i] = (csum[hi] - csum[lo]) / (hi - lo)
    return out


def annotate(samples: np.ndarray, model: DownstreamModel, *,
             record_id: str = "record", stride: int = INPUT_SAMPLES,
             smoothing: int = 1, batch_size: int = 256,
             clip_threshold_mv: float = CLIP_THRESHOLD_MV) -> AnnotationTrack:
    """Run the model across a (n_leads, n) record."""
    task = TASKS[model.task_name]
    offsets = window_offsets(samples.shape[1], stride)
    times = offsets / float(SAMPLE_RATE_HZ)
    model.eval()
    values = np.zeros((len(offsets), task.output_dim))
    flags = np.zeros(len(offsets), dtype=bool)
    with torch.no_grad():
        for lo in range(0, len(offsets), batch_size):
            idx = offsets[lo:lo + batch_size]
            windows = np.stack([samples[:, o:o + INPUT_SAMPLES] for o in idx])
            flags[lo:lo + len(idx)] = (np.abs(windows) > clip_threshold_mv) \
                .any(axis=(1, 2))
            out = model(torch.from_numpy(windows.astype(np.float32))).numpy()
            if task.kind == "binary":
                out = 1.0 / (1.0 + np.exp(-out))
            else:
                out = np.maximum(out, 1e-6)  # interval estimates stay positive
            values[lo:lo + len(idx)] = out
    smoothed = moving_average(values, smoothing)
    return AnnotationTrack(
        record_id=record_id, task=model.task_name, stride=stride,
        smoothing=smoothing, times_s=times, values=values,
        smoothed=smoothed, flags=flags)


def detect_transitions(values: np.ndarray, times_s: np.ndarray, *,
                       threshold: float = 0.5, min_run: int = 3,
                       window_s: float = INPUT_SAMPLES / SAMPLE_RATE_HZ
                       ) -> list[tuple[float, float]]:
    """Episodes from a probability track.

    A run of >= min_run consecutive above-threshold windows opens an episode;
    runs separated by a below-threshold gap shorter than min_run windows are
    bridged. Returns [(onset_s, offset_s)], offsets at the end of the last
    above-threshold window.
    """
    if min_run < 1:
        raise DomainError("min_run must be >= 1")
    v = np.asarray(values, float).reshape(-1)
    if v.shape != np.asarray(times_s).shape:
        raise DomainError("values/times length mismatch")
    on = v >= threshold
    runs = []
    i = 0
    while i < len(on):
        if on[i]:
            j = i
            while j + 1 < len(on) and on[j + 1]:
                j += 1
            runs.append([i, j])
            i = j + 1
        else:
            i += 1
    merged = []
    for run in runs:
        if merged and run[0] - merged[-1][1] - 1 < min_run:
            merged[-1][1] = run[1]
        else:
            merged.append(run)
    episodes = []
    for a, b in merged:
        if b - a + 1 >= min_run:
            episodes.append((float(times_s[a]), float(times_s[b] + window_s)))
    return episodes


def write_track(track: AnnotationTrack, csv_path, sidecar_path=None) -> None:
    """CSV of per-window values plus a JSON sidecar describing the run."""
    csv_path = Path(csv_path)
    cols = track.columns
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = ["time_s"] + list(cols)
        if track.smoothing > 1:
            header += [f"{c}_smoothed" for c in cols]
        header.append("clipped")
        writer.writerow(header)
        for i in range(len(track.times_s)):
            row = [f"{track.times_s[i]:.6f}"]
            row += [f"{v:.6g}" for v in track.values[i]]
            if track.smoothing > 1:
                row += [f"{v:.6g}" for v in track.smoothed[i]]
            row.append(int(track.flags[i]))
            writer.writerow(row)
    sidecar_path = Path(sidecar_path) if sidecar_path else \
        csv_path.with_suffix(".json")
    sidecar = {
        "record_id": track.record_id,
        "task": track.task,
        "stride": track.stride,
        "window_samples": INPUT_SAMPLES,
        "sample_rate_hz": SAMPLE_RATE_HZ,
        "smoothing": track.smoothing,
        "columns": list(cols),
        "n_windows": int(len(track.times_s)),
        "n_flagged": int(track.flags.sum()),
    }
    sidecar_path.write_text(json.dumps(sidecar, indent=2) + "\n",
                            encoding="utf-8")


def read_track(csv_path) -> dict:
    """Load a written track back into arrays (times, columns, flags)."""
    with open(csv_path, "r", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader]
    data = np.asarray(rows, dtype=float)
    return {"header": header, "times_s": data[:, 0],
            "values": data[:, 1:-1], "clipped": data[:, -1].astype(bool)}
