import csv
import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from telecg import __version__
from telecg.cli import main
from telecg.downstream import load_downstream
from telecg.segio import read_jsonl, write_jsonl

# Reproduce the shared unit split (both sexes and rhythm classes in val) when
# a command needs a patient split: seed 5, val fraction 0.3.
SPLIT_SETS = ["--set", "seed=5", "--set", "pretrain.val_fraction=0.3"]


def invoke(args):
    runner = CliRunner()
    result = runner.invoke(main, args, catch_exceptions=False)
    return result


def fast_hyper_sets(task, mode, epochs=1, batch=16):
    return ["--set", f"downstream.hyper.{task}.{mode}.epochs={epochs}",
            "--set", f"downstream.hyper.{task}.{mode}.batch_size={batch}"]


@pytest.fixture(scope="module")
def cli_probe_age(tmp_path_factory, unit_corpus, tiny_pretrain):
    out = tmp_path_factory.mktemp("cli_probe_age")
    result = invoke(
        ["probe", "--manifest", str(unit_corpus["manifest_path"]),
         "--checkpoint", str(tiny_pretrain["last"]), "--task", "age",
         "-o", str(out)] + SPLIT_SETS + fast_hyper_sets("age", "linear_probe"))
    assert result.exit_code == 0, result.output
    return {"out": out, "ckpt": out / "probe_age.ckpt", "result": result}


def test_version_and_help():
    assert __version__ in invoke(["--version"]).output
    listing = invoke(["--help"]).output
    for command in ("synth", "curate", "pretrain", "probe", "finetune",
                    "grid", "annotate", "report", "export-embeddings"):
        assert command in listing


def test_synth_then_curate_chain(tmp_path):
    records = tmp_path / "records"
    result = invoke(["synth", "-o", str(records), "--patients", "2",
                     "--hours", "1", "--seed", "3"])
    assert result.exit_code == 0, result.output
    assert "wrote 2 records" in result.output
    index = read_jsonl(records / "records_index.jsonl")
    assert len(index) == 2
    assert not (records / ".lock").exists()
    manifest = json.loads((records / "run_manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["seed"] == 3 and manifest["records"] == 2
    assert manifest["config"]["synth"]["patients"] == 20   # config untouched

    curated = tmp_path / "curated"
    result = invoke(["curate", "--records", str(records), "-o", str(curated)])
    assert result.exit_code == 0, result.output
    assert "curated 2 segments (0 records failed)" in result.output
    rows = read_jsonl(curated / "manifest.jsonl")
    assert len(rows) == 2
    assert {r["patient_id"] for r in rows} == {r["patient_id"] for r in index}


def test_curate_without_index_exits_3(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    result = invoke(["curate", "--records", str(empty),
                     "-o", str(tmp_path / "out")])
    assert result.exit_code == 3
    assert "records_index.jsonl not found" in result.output


def test_locked_directory_exits_3(tmp_path):
    out = tmp_path / "busy"
    out.mkdir()
    (out / ".lock").write_text("1234")
    result = invoke(["report", "-o", str(out)])
    assert result.exit_code == 3
    assert "locked" in result.output
    assert (out / ".lock").exists()           # a foreign lock is left alone


def test_bad_overrides_exit_2(tmp_path):
    out = str(tmp_path / "o")
    assert invoke(["synth", "-o", out, "--set", "nonsense=1"]).exit_code == 2
    assert invoke(["synth", "-o", out, "--set", "seed"]).exit_code == 2
    result = invoke(["synth", "-o", out, "--patients", "0"])
    assert result.exit_code == 2
    assert "configuration error" in result.output


def test_pretrain_command(tmp_path, unit_corpus):
    out = tmp_path / "pre"
    result = invoke(
        ["pretrain", "--manifest", str(unit_corpus["manifest_path"]),
         "-o", str(out), "--no-retrieval"] + SPLIT_SETS + [
         "--set", "pretrain.queue_size=64", "--set", "pretrain.batch_size=4",
         "--set", "pretrain.val_batch_size=8",
         "--set", "pretrain.momentum=0.99",
         "--set", "pretrain.total_epochs=1", "--set", "pretrain.warmup_epochs=0"])
    assert result.exit_code == 0, result.output
    assert "pretraining done" in result.output
    assert (out / "last.ckpt").exists() and (out / "best.ckpt").exists()
    metrics = read_jsonl(out / "metrics.jsonl")
    assert [m["epoch"] for m in metrics] == [0]
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["variant"] == "resnet18" and manifest["seed"] == 5


def test_probe_command_artifacts(cli_probe_age, unit_split):
    out = cli_probe_age["out"]
    assert "probe age: best" in cli_probe_age["result"].output
    model, meta = load_downstream(cli_probe_age["ckpt"])
    assert meta["task"] == "age" and meta["mode"] == "linear_probe"
    history = read_jsonl(out / "metrics.jsonl")
    assert len(history) == 1 and history[0]["epoch"] == 0
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["task"] == "age" and manifest["seed"] == 5
    assert manifest["best_epoch"] == history[0]["epoch"]
    assert not (out / ".lock").exists()


def test_probe_unknown_task_exits_2(tmp_path, unit_corpus, tiny_pretrain):
    result = invoke(["probe", "--manifest", str(unit_corpus["manifest_path"]),
                     "--checkpoint", str(tiny_pretrain["last"]),
                     "--task", "bmi", "-o", str(tmp_path / "x")])
    assert result.exit_code == 2
    assert "unknown task" in result.output


def test_finetune_command(tmp_path, unit_corpus, tiny_pretrain):
    out = tmp_path / "ft"
    result = invoke(
        ["finetune", "--manifest", str(unit_corpus["manifest_path"]),
         "--checkpoint", str(tiny_pretrain["last"]), "--task", "age",
         "-o", str(out)] + SPLIT_SETS
        + fast_hyper_sets("age", "linear_probe")
        + fast_hyper_sets("age", "fine_tune"))
    assert result.exit_code == 0, result.output
    assert "finetune age: probe" in result.output
    for name in ("probe_age.ckpt", "finetune_age.ckpt"):
        model, meta = load_downstream(out / name)
        assert meta["task"] == "age"
    history = read_jsonl(out / "metrics.jsonl")
    # probe history (1 epoch) + fine-tune history (probe row at -1, 1 epoch)
    assert [h["epoch"] for h in history] == [0, -1, 0]
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert {"probe_metric", "finetune_metric"} <= set(manifest)


def test_grid_command(tmp_path, unit_corpus, tiny_pretrain):
    out = tmp_path / "grid"
    result = invoke(
        ["grid", "--manifest", str(unit_corpus["manifest_path"]),
         "--checkpoint", f"resnet18={tiny_pretrain['last']}",
         "--tasks", "age", "--fractions", "1.0",
         "--modes", "from_scratch,linear_probe", "--seeds", "0",
         "-o", str(out)] + SPLIT_SETS
        + fast_hyper_sets("age", "from_scratch")
        + fast_hyper_sets("age", "linear_probe"))
    assert result.exit_code == 0, result.output
    rows = read_jsonl(out / "results.jsonl")
    assert {r["mode"] for r in rows} == {"from_scratch", "linear_probe"}
    assert all(r["variant"] == "resnet18" for r in rows)
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["cells"] == len(rows) == 2


def test_grid_checkpoint_argument_errors(tmp_path, unit_corpus):
    base = ["grid", "--manifest", str(unit_corpus["manifest_path"]),
            "-o", str(tmp_path / "g")]
    assert invoke(base + ["--checkpoint", "resnet18"]).exit_code == 2
    assert invoke(base + ["--checkpoint", "resnet18=/no/such.ckpt"]).exit_code == 3
    bad = invoke(base + ["--checkpoint", f"resnet18={unit_corpus['manifest_path']}",
                         "--fractions", "abc"])
    assert bad.exit_code == 2


def test_annotate_command_regression(tmp_path, unit_corpus, cli_probe_age):
    record = unit_corpus["index"][0]["path"]
    record_id = Path(record).stem
    out = tmp_path / "ann"
    result = invoke(["annotate", "--record", str(record),
                     "--model", str(cli_probe_age["ckpt"]), "-o", str(out),
                     "--set", "annotate.stride=8192"])
    assert result.exit_code == 0, result.output
    assert "(age)" in result.output
    track_path = out / f"{record_id}_age.csv"
    with open(track_path, newline="", encoding="utf-8") as fh:
        table = list(csv.reader(fh))
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["windows"] == len(table) - 1 > 0
    assert not (out / f"{record_id}_age_episodes.json").exists()
    assert (out / f"{record_id}_age.json").exists()       # sidecar metadata


def test_annotate_command_binary_emits_episodes(tmp_path, unit_corpus,
                                                tiny_pretrain):
    probe_out = tmp_path / "probe_afib"
    result = invoke(
        ["probe", "--manifest", str(unit_corpus["manifest_path"]),
         "--checkpoint", str(tiny_pretrain["last"]), "--task", "afib",
         "-o", str(probe_out)] + SPLIT_SETS
        + fast_hyper_sets("afib", "linear_probe"))
    assert result.exit_code == 0, result.output

    record = unit_corpus["index"][0]["path"]
    record_id = Path(record).stem
    out = tmp_path / "ann"
    result = invoke(["annotate", "--record", str(record),
                     "--model", str(probe_out / "probe_afib.ckpt"),
                     "-o", str(out), "--set", "annotate.stride=8192",
                     "--set", "annotate.smoothing=3"])
    assert result.exit_code == 0, result.output
    episodes = json.loads(
        (out / f"{record_id}_afib_episodes.json").read_text())
    assert isinstance(episodes, list)
    for ep in episodes:
        assert set(ep) == {"onset_s", "offset_s"}
        assert ep["offset_s"] > ep["onset_s"]


def test_report_command(tmp_path, tiny_pretrain):
    results = tmp_path / "results.jsonl"
    write_jsonl(results, [
        {"task": "age", "variant": "resnet18", "backbone_params": 242528,
         "mode": mode, "fraction": 1.0, "seed": 0, "selection_metric": 5.0,
         "val_loss": 2.0, "percent_improvement": None}
        for mode in ("from_scratch", "linear_probe")])
    out = tmp_path / "rep"
    result = invoke(["report", "--results", str(results),
                     "--pretrain-log", str(tiny_pretrain["metrics"]),
                     "-o", str(out)])
    assert result.exit_code == 0, result.output
    assert "wrote 4 tables" in result.output
    for name in ("pretrain_curves.csv", "metric_by_model_size.csv",
                 "improvement_by_label_fraction.csv", "probe_vs_scratch.csv"):
        assert (out / name).exists()

    bare = invoke(["report", "-o", str(tmp_path / "rep_empty")])
    assert bare.exit_code == 0
    assert "no downstream result rows" in bare.output


def test_export_embeddings_command(tmp_path, unit_corpus, tiny_pretrain):
    out_path = tmp_path / "emb.csv"
    result = invoke(["export-embeddings",
                     "--checkpoint", str(tiny_pretrain["last"]),
                     "--manifest", str(unit_corpus["manifest_path"]),
                     "-n", "2", "--seed", "1", "-o", str(out_path)])
    assert result.exit_code == 0, result.output
    assert "exported 2 embeddings (dim 128)" in result.output
    with open(out_path, newline="", encoding="utf-8") as fh:
        table = list(csv.reader(fh))
    assert len(table) == 3 and len(table[0]) == 2 + 128
