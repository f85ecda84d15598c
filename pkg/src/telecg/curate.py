"""Telemetry curation: hour blocks, clipping mask, and least-noisy segments.

Each record is cut into hour blocks. Samples beyond +-60 mV on any lead mask
that time index on every lead. Candidate 60 s windows (1 s stride) that touch
no masked sample are scored by their spectral energy outside the 0.75-40 Hz
passband, and the lowest-scoring window of each block is kept.

The noise score uses the plain DFT energy convention: for each lead,
sum over out-of-band bins k of |X_k|^2 / N over the full (two-sided)
spectrum, DC included in the low band, bins exactly at the band edges
excluded. A unit-amplitude bin-aligned 50 Hz sinusoid on one lead scores
N/2 = 3600 for a 60 s window.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
import scipy.fft

from .errors import DataError, DomainError
from .segio import read_waveform, write_jsonl, write_waveform
from .synth import SAMPLE_RATE_HZ, RecordPlan, WaveformRecord, labels_at, read_sidecar

BLOCK_S = 3600
SEGMENT_S = 60
BLOCK_SAMPLES = BLOCK_S * SAMPLE_RATE_HZ
SEGMENT_SAMPLES = SEGMENT_S * SAMPLE_RATE_HZ

CLIP_THRESHOLD_MV = 60.0
LOW_CUT_HZ = 0.75
HIGH_CUT_HZ = 40.0

_SCORE_CHUNK = 256


@dataclasses.dataclass
class HourBlock:
    patient_id: str
    record_id: str
    block_index: int
    start_s: float
    samples: np.ndarray  # (n_leads, length) float32
    mask: np.ndarray     # (length,) bool, True = unusable time index
    partial: bool


@dataclasses.dataclass
class Segment:
    patient_id: str
    record_id: str
    segment_id: str
    block_index: int
    offset_s: float          # from record start
    quality_score: float
    samples: np.ndarray      # (n_leads, SEGMENT_SAMPLES) float32
    labels: dict | None = None


def split_hour_blocks(record: WaveformRecord) -> list[HourBlock]:
    """Cut a record into hour blocks; a short trailing block is flagged partial."""
    n = record.samples.shape[1]
    if n == 0:
        raise DataError(f"record {record.record_id} is empty")
    blocks = []
    for bi, start in enumerate(range(0, n, BLOCK_SAMPLES)):
        chunk = record.samples[:, start:start + BLOCK_SAMPLES]
        blocks.append(HourBlock(
            patient_id=record.patient_id,
            record_id=record.record_id,
            block_index=bi,
            start_s=start / record.sample_rate_hz,
            samples=chunk,
            mask=np.zeros(chunk.shape[1], dtype=bool),
            partial=chunk.shape[1] < BLOCK_SAMPLES,
        ))
    return blocks


def apply_clip_mask(block: HourBlock,
                    threshold_mv: float = CLIP_THRESHOLD_MV) -> HourBlock:
    """Mask every time index where any lead exceeds +-threshold_mv."""
    if threshold_mv <= 0:
        raise DomainError("threshold_mv must be positive")
    exceeded = np.abs(block.samples) > threshold_mv
    return dataclasses.replace(block, mask=block.mask | exceeded.any(axis=0))


def noise_score(samples, sample_rate_hz: float = float(SAMPLE_RATE_HZ)):
    """Out-of-band spectral energy, summed over leads.

    Accepts (n_leads, n) or any (..., n_leads, n) stack; returns a float or
    an array over the leading axes.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim < 2 or x.shape[-1] < 2:
        raise DomainError(f"need (..., n_leads, n_samples), got shape {x.shape}")
    n = x.shape[-1]
    spec = scipy.fft.rfft(x, axis=-1)
    power = spec.real ** 2 + spec.imag ** 2
    freqs = scipy.fft.rfftfreq(n, d=1.0 / sample_rate_hz)
    # two-sided weights through the one-sided transform
    weights = np.full(freqs.shape, 2.0)
    weights[0] = 1.0
    if n % 2 == 0:
        weights[-1] = 1.0
    out_of_band = (freqs < LOW_CUT_HZ) | (freqs > HIGH_CUT_HZ)
    weighted = power[..., out_of_band] @ weights[out_of_band]
    score = weighted.sum(axis=-1) / n
    return float(score) if score.ndim == 0 else score


def candidate_scores(block: HourBlock, stride_s: int = 1):
    """(offsets_s, scores) for every stride-aligned window; NaN where masked."""
    if stride_s < 1:
        raise DomainError("stride_s must be >= 1")
    length = block.samples.shape[1]
    if length < SEGMENT_SAMPLES:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    stride_n = stride_s * SAMPLE_RATE_HZ
    offsets = np.arange(0, length - SEGMENT_SAMPLES + 1, stride_n, dtype=np.int64)

    bad = np.concatenate([[0], np.cumsum(block.mask.astype(np.int64))])
    n_masked = bad[offsets + SEGMENT_SAMPLES] - bad[offsets]
    valid = n_masked == 0

    scores = np.full(len(offsets), np.nan)
    windows = np.lib.stride_tricks.sliding_window_view(
        block.samples, SEGMENT_SAMPLES, axis=1)  # (leads, positions, window)
    valid_idx = np.nonzero(valid)[0]
    for lo in range(0, len(valid_idx), _SCORE_CHUNK):
        idx = valid_idx[lo:lo + _SCORE_CHUNK]
        batch = windows[:, offsets[idx], :].transpose(1, 0, 2)
        scores[idx] = noise_score(batch)
    return offsets // SAMPLE_RATE_HZ, scores


def select_best_segment(block: HourBlock, stride_s: int = 1,
                        labels_plan: RecordPlan | None = None) -> Segment | None:
    """Lowest-scoring clean window of the block; earliest offset wins ties.

    Returns None when no stride-aligned window avoids the mask.
    """
    offsets_s, scores = candidate_scores(block, stride_s)
    if len(offsets_s) == 0 or np.all(np.isnan(scores)):
        return None
    best = int(np.nanargmin(scores))  # first index at the minimum
    start = int(offsets_s[best]) * SAMPLE_RATE_HZ
    seg_samples = np.array(block.samples[:, start:start + SEGMENT_SAMPLES],
                           dtype=np.float32)
    offset_in_record = block.start_s + float(offsets_s[best])
    labels = None
    if labels_plan is not None:
        labels = labels_at(labels_plan, offset_in_record + SEGMENT_S / 2.0)
    return Segment(
        patient_id=block.patient_id,
        record_id=block.record_id,
        segment_id=f"{block.record_id}-b{block.block_index:03d}",
        block_index=block.block_index,
        offset_s=offset_in_record,
        quality_score=float(scores[best]),
        samples=seg_samples,
        labels=labels,
    )


def curate_record(record: WaveformRecord, plan: RecordPlan | None = None,
                  threshold_mv: float = CLIP_THRESHOLD_MV,
                  stride_s: int = 1) -> list[Segment]:
    """All per-block best segments of one record (blocks may yield none)."""
    segments = []
    for block in split_hour_blocks(record):
        block = apply_clip_mask(block, threshold_mv)
        seg = select_best_segment(block, stride_s, labels_plan=plan)
        if seg is not None:
            segments.append(seg)
    return segments


def manifest_row(seg: Segment, path: str, partial: bool) -> dict:
    return {
        "patient_id": seg.patient_id,
        "record_id": seg.record_id,
        "segment_id": seg.segment_id,
        "path": path,
        "block_index": seg.block_index,
        "offset_s": seg.offset_s,
        "partial_block": partial,
        "quality_score": seg.quality_score,
        "labels": seg.labels,
    }


def build_dataset(entries, out_dir, threshold_mv: float = CLIP_THRESHOLD_MV,
                  stride_s: int = 1) -> tuple[list[dict], list[tuple[str, str]]]:
    """Curate a batch of (record_path, sidecar_path) pairs to segment files.

    Returns (manifest rows, per-record failures). A failing record is
    reported and skipped; it never aborts the batch. The manifest is written
    to out_dir/manifest.jsonl.
    """
    out_dir = Path(out_dir)
    seg_dir = out_dir / "segments"
    seg_dir.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    failures: list[tuple[str, str]] = []
    for record_path, sidecar_path in entries:
        try:
            samples, rate = read_waveform(record_path)
            side = read_sidecar(sidecar_path)
            plan = side["plan"]
            record = WaveformRecord(
                record_id=Path(record_path).stem,
                patient_id=plan.profile.patient_id,
                samples=samples,
                sample_rate_hz=rate,
            )
            blocks = split_hour_blocks(record)
            partial_by_index = {b.block_index: b.partial for b in blocks}
            for block in blocks:
                block = apply_clip_mask(block, threshold_mv)
                seg = select_best_segment(block, stride_s, labels_plan=plan)
                if seg is None:
                    continue
                seg_path = seg_dir / f"{seg.segment_id}.ecgt"
                write_waveform(seg_path, seg.samples, record.sample_rate_hz)
                rows.append(manifest_row(seg, str(seg_path),
                                         partial_by_index[seg.block_index]))
        except (OSError, DataError) as exc:
            failures.append((str(record_path), str(exc)))
    write_jsonl(out_dir / "manifest.jsonl", rows)
    return rows, failures
