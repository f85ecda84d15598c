"""Result tables and embedding exports.

Everything here is a deterministic function of its input rows: rows are
sorted before writing so re-running a report reproduces byte-identical CSVs.
"""

from __future__ import annotations

import csv
import sys
from pathlib import Path

import numpy as np

from .encoder import center_crop
from .errors import DomainError
from .pretrain import (SegmentStore, encode_windows, load_pretrain_checkpoint,
                       make_split)
from .seeding import derive_rng


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return Path(path)


def _warn(msg):
    print(f"warning: {msg}", file=sys.stderr)


def emit_report(results_rows, pretrain_rows, out_dir) -> list[Path]:
    """Write the four summary CSVs; empty inputs still produce headers."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    if not pretrain_rows:
        _warn("no pretraining log rows; pretrain_curves.csv will be empty")
    curve_rows = [
        [r["epoch"], f"{r['lr']:.10g}",
         "" if r.get("train_infonce") is None else f"{r['train_infonce']:.8g}",
         f"{r['val_infonce']:.8g}", f"{r['val_ntxent']:.8g}",
         "" if r.get("retrieval_score") is None else f"{r['retrieval_score']:.6g}"]
        for r in sorted(pretrain_rows, key=lambda r: r["epoch"])
    ]
    written.append(_write_csv(
        out_dir / "pretrain_curves.csv",
        ["epoch", "lr", "train_infonce", "val_infonce", "val_ntxent",
         "retrieval_score"], curve_rows))

    if not results_rows:
        _warn("no downstream result rows; summary CSVs will be empty")
    key = lambda r: (r["task"], r["variant"], r["mode"], r["fraction"], r["seed"])
    ordered = sorted(results_rows, key=key)

    written.append(_write_csv(
        out_dir / "metric_by_model_size.csv",
        ["task", "variant", "backbone_params", "mode", "fraction", "seed",
         "selection_metric", "val_loss"],
        [[r["task"], r["variant"], r["backbone_params"], r["mode"],
          r["fraction"], r["seed"], f"{r['selection_metric']:.8g}",
          f"{r['val_loss']:.8g}"] for r in ordered]))

    written.append(_write_csv(
        out_dir / "improvement_by_label_fraction.csv",
        ["task", "variant", "backbone_params", "mode", "fraction", "seed",
         "percent_improvement"],
        [[r["task"], r["variant"], r["backbone_params"], r["mode"],
          r["fraction"], r["seed"], f"{r['percent_improvement']:.6g}"]
         for r in ordered if r.get("percent_improvement") is not None]))

    by_cell: dict[tuple, dict] = {}
    for r in ordered:
        cell = by_cell.setdefault(
            (r["task"], r["variant"], r["fraction"], r["seed"]), {})
        cell[r["mode"]] = r["selection_metric"]
    probe_rows = [
        [task, variant, fraction, seed,
         f"{cell['linear_probe']:.8g}", f"{cell['from_scratch']:.8g}"]
        for (task, variant, fraction, seed), cell in sorted(by_cell.items())
        if "linear_probe" in cell and "from_scratch" in cell
    ]
    written.append(_write_csv(
        out_dir / "probe_vs_scratch.csv",
        ["task", "variant", "fraction", "seed", "probe_metric",
         "scratch_metric"], probe_rows))
    return written


def export_embeddings(checkpoint_path, manifest_rows, out_path, *,
                      n: int = 64, seed: int = 0,
                      val_fraction: float = 0.1) -> dict:
    """Backbone embeddings of sampled held-out segments, as CSV."""
    if n < 1:
        raise DomainError("n must be >= 1")
    store = SegmentStore(manifest_rows)
    split = make_split(store.patient_ids(), val_fraction, seed)
    state, _, _, _, _ = load_pretrain_checkpoint(checkpoint_path)
    rows = [r for pid in split.val for r in store.by_patient[pid]]
    rng = derive_rng(seed, "export")
    if n >= len(rows):
        if n > len(rows):
            _warn(f"requested {n} segments but only {len(rows)} are held out; "
                  "exporting all of them")
        picked = rows
    else:
        idx = rng.choice(len(rows), n, replace=False)
        picked = [rows[i] for i in sorted(idx)]
    windows = np.stack([center_crop(store.load(r)) for r in picked])
    embs = encode_windows(state.query, windows)
    header = ["patient_id", "segment_id"] + [f"e{i}" for i in range(embs.shape[1])]
    _write_csv(out_path, header,
               [[r["patient_id"], r["segment_id"]]
                + [f"{v:.8g}" for v in emb] for r, emb in zip(picked, embs)])
    return {"requested": n, "written": len(picked), "dim": int(embs.shape[1])}
