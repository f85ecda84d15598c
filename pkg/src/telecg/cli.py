"""Command-line harness tying the pipeline stages together.

Every command takes an output directory that it owns exclusively for the
duration of the run (a .lock file enforces this) and leaves behind a
run_manifest.json recording the command, configuration, and seed, so any
artifact can be traced back to the run that produced it.

Exit codes: 0 success, 2 configuration errors, 3 data errors, 4 numerical
failures, 1 anything else.
"""

from __future__ import annotations

import contextlib
import dataclasses
import datetime
import functools
import json
import os
import sys
from pathlib import Path

import click

from . import __version__
from .annotate import annotate as run_annotate
from .annotate import detect_transitions, write_track
from .config import RunConfig, load_config
from .curate import build_dataset
from .downstream import (TASKS, run_experiment_grid, save_downstream,
                         train_head)
from .encoder import EncoderSpec
from .errors import (ConfigurationError, DataError, NumericalError,
                     TelecgError)
from .pretrain import SegmentStore, make_split, pretrain_loop
from .report import emit_report, export_embeddings
from .segio import read_jsonl, read_waveform, write_jsonl
from .synth import synthesize_cohort


@contextlib.contextmanager
def _owned_dir(out_dir: Path):
    """Exclusive ownership of an output directory via a lock file."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(
            f"{out_dir} is locked by another run (remove {lock} if stale)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out_dir
    finally:
        with contextlib.suppress(OSError):
            os.unlink(lock)


def _write_run_manifest(out_dir: Path, command: str, cfg: RunConfig | None,
                        extra: dict | None = None):
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "version": __version__,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "config": cfg.to_dict() if cfg is not None else None,
    }
    if extra:
        manifest.update(extra)
    (out_dir / "run_manifest.json").write_text(
        json.dumps(manifest, indent=2, default=str) + "\n", encoding="utf-8")


def _guard(fn):
    """Map package errors onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigurationError as exc:
            click.echo(f"configuration error: {exc}", err=True)
            sys.exit(2)
        except DataError as exc:
            click.echo(f"data error: {exc}", err=True)
            sys.exit(3)
        except NumericalError as exc:
            click.echo(f"numerical error: {exc}", err=True)
            sys.exit(4)
        except TelecgError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    return wrapper


_config_opts = [
    click.option("--config", "config_path", type=click.Path(exists=True),
                 default=None, help="YAML config file."),
    click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                 help="Dotted config override; wins over the file."),
]


def _with_config(fn):
    for opt in reversed(_config_opts):
        fn = opt(fn)
    return fn


@click.group()
@click.version_option(__version__)
def main():
    """Synthetic ECG telemetry: generate, curate, pretrain, evaluate, annotate."""


@main.command()
@click.option("-o", "--out", "out_dir", required=True, type=click.Path())
@click.option("--patients", type=int, default=None)
@click.option("--hours", type=float, default=None)
@click.option("--seed", type=int, default=None)
@_with_config
@_guard
def synth(out_dir, patients, hours, seed, config_path, overrides):
    """Render a cohort of telemetry records with ground-truth sidecars."""
    cfg = load_config(config_path, overrides)
    n = patients if patients is not None else cfg.synth.patients
    dur_h = hours if hours is not None else cfg.synth.hours
    run_seed = seed if seed is not None else cfg.seed
    if n < 1 or dur_h <= 0:
        raise ConfigurationError("--patients/--hours must be positive")
    with _owned_dir(Path(out_dir)) as out:
        index = synthesize_cohort(out, cfg.synth.cohort, n, dur_h * 3600.0,
                                  run_seed)
        _write_run_manifest(out, "synth", cfg, {"seed": run_seed,
                                                "records": len(index)})
    click.echo(f"wrote {len(index)} records under {out_dir}")


@main.command()
@click.option("--records", "records_dir", required=True, type=click.Path(exists=True),
              help="Directory produced by `telecg synth`.")
@click.option("-o", "--out", "out_dir", required=True, type=click.Path())
@_with_config
@_guard
def curate(records_dir, out_dir, config_path, overrides):
    """Select the least-noisy clean minute of every record hour."""
    cfg = load_config(config_path, overrides)
    index_path = Path(records_dir) / "records_index.jsonl"
    if not index_path.exists():
        raise DataError(f"{index_path} not found")
    entries = [(row["path"], row["sidecar"]) for row in read_jsonl(index_path)]
    with _owned_dir(Path(out_dir)) as out:
        rows, failures = build_dataset(entries, out,
                                       cfg.curate.clip_threshold_mv,
                                       cfg.curate.stride_s)
        for path, msg in failures:
            click.echo(f"warning: skipped {path}: {msg}", err=True)
        _write_run_manifest(out, "curate", cfg,
                            {"segments": len(rows), "failures": len(failures)})
    if not rows:
        raise DataError("curation produced no segments")
    click.echo(f"curated {len(rows)} segments ({len(failures)} records failed)")


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("-o", "--out", "out_dir", required=True, type=click.Path())
@click.option("--resume", "resume_from", type=click.Path(exists=True), default=None)
@click.option("--no-retrieval", is_flag=True, default=False,
              help="Skip the per-epoch retrieval probe (cheaper).")
@_with_config
@_guard
def pretrain(manifest, out_dir, resume_from, no_retrieval, config_path, overrides):
    """Patient-contrastive pretraining over a curated manifest."""
    cfg = load_config(config_path, overrides)
    store = SegmentStore(read_jsonl(manifest))
    settings = cfg.pretrain.to_settings()
    split = make_split(store.patient_ids(), settings.val_fraction, cfg.seed)
    spec = EncoderSpec.from_variant(cfg.encoder.variant)
    with _owned_dir(Path(out_dir)) as out:
        _write_run_manifest(out, "pretrain", cfg, {"seed": cfg.seed,
                                                   "variant": cfg.encoder.variant})
        summary = pretrain_loop(store, split, spec, settings, seed=cfg.seed,
                                out_dir=out, resume_from=resume_from,
                                compute_retrieval=not no_retrieval)
    click.echo(f"pretraining done: best val loss "
               f"{summary['best_val_infonce']:.4f} over "
               f"{summary['epochs_done']} epochs")


def _downstream_common(cfg, manifest, task):
    if task not in TASKS:
        raise ConfigurationError(f"unknown task {task!r}")
    store = SegmentStore(read_jsonl(manifest))
    split = make_split(store.patient_ids(), cfg.pretrain.val_fraction, cfg.seed)
    return store, split


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--task", required=True)
@click.option("--fraction", type=float, default=1.0)
@click.option("--seed", type=int, default=None)
@click.option("-o", "--out", "out_dir", required=True, type=click.Path())
@_with_config
@_guard
def probe(manifest, checkpoint, task, fraction, seed, out_dir, config_path, overrides):
    """Linear probe of a pretrained encoder on one task."""
    cfg = load_config(config_path, overrides)
    run_seed = seed if seed is not None else cfg.seed
    store, split = _downstream_common(cfg, manifest, task)
    with _owned_dir(Path(out_dir)) as out:
        result = train_head(store, split, task, mode="linear_probe",
                            fraction=fraction,
                            hyper=cfg.downstream.hyper_for(task, "linear_probe"),
                            pretrained_path=checkpoint, seed=run_seed)
        save_downstream(out / f"probe_{task}.ckpt", result,
                        result.model.backbone.spec)
        write_jsonl(out / "metrics.jsonl", result.history)
        _write_run_manifest(out, "probe", cfg, {
            "task": task, "fraction": fraction, "seed": run_seed,
            "best_epoch": result.best_epoch,
            "selection_metric": result.best_metric})
    click.echo(f"probe {task}: best {result.best_metric:.4f} "
               f"at epoch {result.best_epoch}")


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--task", required=True)
@click.option("--fraction", type=float, default=1.0)
@click.option("--seed", type=int, default=None)
@click.option("-o", "--out", "out_dir", required=True, type=click.Path())
@_with_config
@_guard
def finetune(manifest, checkpoint, task, fraction, seed, out_dir, config_path, overrides):
    """Linear probe followed by full fine-tuning on one task."""
    cfg = load_config(config_path, overrides)
    run_seed = seed if seed is not None else cfg.seed
    store, split = _downstream_common(cfg, manifest, task)
    with _owned_dir(Path(out_dir)) as out:
        probe_result = train_head(
            store, split, task, mode="linear_probe", fraction=fraction,
            hyper=cfg.downstream.hyper_for(task, "linear_probe"),
            pretrained_path=checkpoint, seed=run_seed)
        ft_result = train_head(
            store, split, task, mode="fine_tune", fraction=fraction,
            hyper=cfg.downstream.hyper_for(task, "fine_tune"),
            probe_result=probe_result, seed=run_seed)
        spec = probe_result.model.backbone.spec
        save_downstream(out / f"probe_{task}.ckpt", probe_result, spec)
        save_downstream(out / f"finetune_{task}.ckpt", ft_result, spec)
        write_jsonl(out / "metrics.jsonl", probe_result.history
                    + ft_result.history)
        _write_run_manifest(out, "finetune", cfg, {
            "task": task, "fraction": fraction, "seed": run_seed,
            "probe_metric": probe_result.best_metric,
            "finetune_metric": ft_result.best_metric})
    click.echo(f"finetune {task}: probe {probe_result.best_metric:.4f} -> "
               f"fine-tuned {ft_result.best_metric:.4f}")


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", "checkpoints", multiple=True, required=True,
              metavar="VARIANT=PATH", help="Pretrained checkpoint per variant.")
@click.option("--tasks", default="age", help="Comma-separated task list.")
@click.option("--fractions", default="1.0")
@click.option("--modes", default="from_scratch,linear_probe,fine_tune")
@click.option("--seeds", default="0")
@click.option("-o", "--out", "out_dir", required=True, type=click.Path())
@_with_config
@_guard
def grid(manifest, checkpoints, tasks, fractions, modes, seeds, out_dir,
         config_path, overrides):
    """Cross product of variants x tasks x label fractions x modes x seeds."""
    cfg = load_config(config_path, overrides)
    ckpts = {}
    for item in checkpoints:
        if "=" not in item:
            raise ConfigurationError(f"--checkpoint {item!r} is not VARIANT=PATH")
        name, _, path = item.partition("=")
        if not Path(path).exists():
            raise DataError(f"checkpoint {path} not found")
        ckpts[name] = path
    store, split = _downstream_common(cfg, manifest, "age")
    task_list = [t.strip() for t in tasks.split(",") if t.strip()]
    mode_list = [m.strip() for m in modes.split(",") if m.strip()]
    try:
        fraction_list = [float(f) for f in fractions.split(",") if f.strip()]
        seed_list = [int(s) for s in seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"bad --fractions/--seeds: {exc}")
    hyper_overrides = {(t, m): cfg.downstream.hyper_for(t, m)
                       for t in task_list for m in mode_list if t in TASKS}
    with _owned_dir(Path(out_dir)) as out:
        rows = run_experiment_grid(
            store, split, checkpoints=ckpts, tasks=task_list,
            fractions=fraction_list, modes=mode_list, seeds=seed_list,
            hyper_overrides=hyper_overrides, out_path=out / "results.jsonl")
        _write_run_manifest(out, "grid", cfg, {"cells": len(rows)})
    click.echo(f"grid: {len(rows)} result rows -> {out_dir}/results.jsonl")


@main.command(name="annotate")
@click.option("--record", "record_path", required=True, type=click.Path(exists=True))
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("-o", "--out", "out_dir", required=True, type=click.Path())
@_with_config
@_guard
def annotate_cmd(record_path, model_path, out_dir, config_path, overrides):
    """Slide a trained model across a record; write the annotation track."""
    from .downstream import load_downstream

    cfg = load_config(config_path, overrides)
    samples, _rate = read_waveform(record_path)
    model, meta = load_downstream(model_path)
    record_id = Path(record_path).stem
    with _owned_dir(Path(out_dir)) as out:
        track = run_annotate(samples, model, record_id=record_id,
                             stride=cfg.annotate.stride,
                             smoothing=cfg.annotate.smoothing,
                             batch_size=cfg.annotate.batch_size)
        write_track(track, out / f"{record_id}_{track.task}.csv")
        if TASKS[track.task].kind == "binary":
            episodes = detect_transitions(
                track.smoothed[:, 0], track.times_s,
                threshold=cfg.annotate.threshold, min_run=cfg.annotate.min_run)
            (out / f"{record_id}_{track.task}_episodes.json").write_text(
                json.dumps([{"onset_s": a, "offset_s": b} for a, b in episodes],
                           indent=2) + "\n", encoding="utf-8")
        _write_run_manifest(out, "annotate", cfg, {
            "record": str(record_path), "model": str(model_path),
            "task": track.task, "windows": int(len(track.times_s))})
    click.echo(f"annotated {len(track.times_s)} windows ({track.task})")


@main.command()
@click.option("--results", "results_path", type=click.Path(exists=True), default=None)
@click.option("--pretrain-log", "pretrain_log", type=click.Path(exists=True), default=None)
@click.option("-o", "--out", "out_dir", required=True, type=click.Path())
@_guard
def report(results_path, pretrain_log, out_dir):
    """Summarize grid results and pretraining curves as CSV tables."""
    results_rows = read_jsonl(results_path) if results_path else []
    pretrain_rows = read_jsonl(pretrain_log) if pretrain_log else []
    with _owned_dir(Path(out_dir)) as out:
        written = emit_report(results_rows, pretrain_rows, out)
        _write_run_manifest(out, "report", None,
                            {"files": [str(p) for p in written]})
    click.echo(f"wrote {len(written)} tables to {out_dir}")


@main.command(name="export-embeddings")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("-n", "--count", type=int, default=64)
@click.option("--seed", type=int, default=0)
@click.option("-o", "--out", "out_path", required=True, type=click.Path())
@_guard
def export_embeddings_cmd(checkpoint, manifest, count, seed, out_path):
    """Write backbone embeddings for sampled held-out segments."""
    info = export_embeddings(checkpoint, read_jsonl(manifest), out_path,
                             n=count, seed=seed)
    click.echo(f"exported {info['written']} embeddings (dim {info['dim']}) "
               f"to {out_path}")


if __name__ == "__main__":
    main()
