"""Supervised evaluation of encoders under label scarcity.

Three training modes share one loop:

- from_scratch: a freshly initialized backbone plus linear head, all trained;
- linear_probe: a pretrained backbone frozen (parameters and normalization
  statistics), only the linear head trained;
- fine_tune: starts from the *completed* probe solution and unfreezes
  everything.

Regression heads carry a fixed affine output scaling taken from the training
subset's label statistics; the head stays linear in the features while the
optimizer works in standardized units, which keeps the short desk-scale
schedules well-conditioned. Label subsets are nested: a patient included at
one fraction is included at every larger fraction of the same seed.
"""

from __future__ import annotations

import copy
import dataclasses
import math
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import metrics as M
from .encoder import (EncoderSpec, ResNet1d, build_encoder, center_crop,
                      load_state_from_tensors, param_count, random_crop,
                      state_to_tensors)
from .errors import (ConfigurationError, DataError, DomainError,
                     NumericalError)
from .pretrain import PatientSplit, SegmentStore, load_pretrain_checkpoint
from .seeding import derive_int, derive_rng
from .segio import read_checkpoint, write_checkpoint


@dataclasses.dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str                   # "regression" | "binary"
    output_dim: int
    label_keys: tuple[str, ...]
    loss_name: str              # "mse" | "bce" | "std_mae"
    selection_metric: str       # "mae" | "auroc" | "mape"
    selection_mode: str         # "min" | "max"


TASKS = {
    "age": TaskSpec("age", "regression", 1, ("age_years",), "mse", "mae", "min"),
    "sex": TaskSpec("sex", "binary", 1, ("sex",), "bce", "auroc", "max"),
    "intervals": TaskSpec(
        "intervals", "regression", 4,
        ("qrs_ms", "qt_ms", "pr_ms", "ventricular_rate_bpm"),
        "std_mae", "mape", "min"),
    "afib": TaskSpec("afib", "binary", 1, ("afib",), "bce", "auroc", "max"),
}

MODES = ("from_scratch", "linear_probe", "fine_tune")


@dataclasses.dataclass(frozen=True)
class Hyper:
    batch_size: int
    epochs: int
    lr: float
    milestone: int
    warmup: int

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.lr <= 0:
            raise ConfigurationError("bad downstream hyperparameters")
        if self.milestone < 0 or self.warmup < 0:
            raise ConfigurationError("milestone/warmup must be >= 0")


# per-task, per-mode defaults
DOWNSTREAM_DEFAULTS: dict[tuple[str, str], Hyper] = {
    ("age", "from_scratch"): Hyper(512, 60, 5e-3, 20, 5),
    ("age", "linear_probe"): Hyper(1024, 15, 1e-1, 5, 0),
    ("age", "fine_tune"): Hyper(1024, 30, 1e-4, 20, 0),
    ("sex", "from_scratch"): Hyper(512, 60, 5e-3, 20, 5),
    ("sex", "linear_probe"): Hyper(1024, 15, 1e-1, 5, 0),
    ("sex", "fine_tune"): Hyper(1024, 30, 1e-4, 20, 0),
    ("intervals", "from_scratch"): Hyper(256, 60, 5e-3, 20, 5),
    ("intervals", "linear_probe"): Hyper(512, 15, 2e-1, 5, 0),
    ("intervals", "fine_tune"): Hyper(512, 45, 2e-4, 20, 0),
    ("afib", "from_scratch"): Hyper(128, 60, 2e-3, 20, 5),
    ("afib", "linear_probe"): Hyper(128, 15, 1e-1, 5, 0),
    ("afib", "fine_tune"): Hyper(128, 50, 1e-4, 20, 0),
}


def default_hyper(task: str, mode: str) -> Hyper:
    try:
        return DOWNSTREAM_DEFAULTS[(task, mode)]
    except KeyError:
        raise ConfigurationError(f"no defaults for task {task!r} mode {mode!r}")


def downstream_lr(epoch: int, hyper: Hyper) -> float:
    """Linear warmup from a tenth of the base rate, one 10x step cut after."""
    lr = hyper.lr
    if hyper.warmup > 0 and epoch < hyper.warmup:
        lr *= 0.1 + 0.9 * epoch / hyper.warmup
    if epoch >= hyper.milestone:
        lr *= 0.1
    return lr


def make_label_subset(train_ids, fraction: float, seed: int) -> tuple[str, ...]:
    """Patient-level labelled subset; prefixes of one permutation, so subsets
    are nested across fractions for a fixed seed."""
    if not 0.0 < fraction <= 1.0:
        raise DomainError(f"fraction must be in (0, 1], got {fraction}")
    ids = sorted(set(train_ids))
    count = round(fraction * len(ids))
    if count == 0:
        raise DomainError(
            f"fraction {fraction} of {len(ids)} patients selects nobody")
    perm = derive_rng(seed, "subset").permutation(len(ids))
    return tuple(sorted(ids[i] for i in perm[:count]))


def targets_from_labels(task: TaskSpec, labels: dict) -> np.ndarray:
    if labels is None:
        raise DomainError("segment has no labels")
    try:
        return np.asarray([float(labels[k]) for k in task.label_keys])
    except KeyError as exc:
        raise DomainError(f"labels missing key {exc}") from exc


def label_stats(targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-target mean/std of a (n, d) label matrix; std floored at 1e-6."""
    t = np.asarray(targets, float)
    if t.ndim != 2 or t.shape[0] == 0:
        raise DomainError(f"need (n, d) targets, got {t.shape}")
    return t.mean(axis=0), np.maximum(t.std(axis=0), 1e-6)


def task_loss(task: TaskSpec, preds: torch.Tensor, targets: torch.Tensor,
              stats=None) -> torch.Tensor:
    """Training criterion. Regression in physical units (MSE for age,
    per-target std-normalized MAE for intervals); logit BCE for binary."""
    if preds.shape != targets.shape:
        raise DomainError(f"preds {tuple(preds.shape)} vs targets {tuple(targets.shape)}")
    if task.loss_name == "mse":
        return nn.functional.mse_loss(preds, targets)
    if task.loss_name == "bce":
        return nn.functional.binary_cross_entropy_with_logits(preds, targets)
    if task.loss_name == "std_mae":
        if stats is None:
            raise DomainError("std_mae loss needs training label statistics")
        std = torch.as_tensor(stats[1], dtype=preds.dtype)
        return ((preds - targets).abs() / std).mean()
    raise ConfigurationError(f"unknown loss {task.loss_name!r}")


def task_metrics(task: TaskSpec, preds: np.ndarray, targets: np.ndarray) -> dict:
    out = {}
    if task.kind == "binary":
        probs = 1.0 / (1.0 + np.exp(-preds.reshape(-1)))
        y = targets.reshape(-1).astype(int)
        out["auroc"] = M.auroc(probs, y)
        out["f1"] = M.f1(probs, y)
    else:
        out["mae"] = M.mae(preds, targets)
        out["mape"] = M.mape(preds, targets)
        out["r2"] = M.r2(preds, targets)
    out["selection"] = out[task.selection_metric]
    return out


class DownstreamModel(nn.Module):
    """Backbone plus one linear head; regression outputs are de-standardized
    through fixed (non-trained) affine buffers."""

    def __init__(self, backbone: ResNet1d, task: TaskSpec,
                 freeze_backbone: bool = False):
        super().__init__()
        self.backbone = backbone
        self.task_name = task.name
        self.head = nn.Linear(backbone.spec.chan_out, task.output_dim)
        self.register_buffer("out_mean", torch.zeros(task.output_dim))
        self.register_buffer("out_std", torch.ones(task.output_dim))
        self.freeze_backbone = freeze_backbone
        self._apply_freeze()

    def _apply_freeze(self):
        for p in self.backbone.parameters():
            p.requires_grad_(not self.freeze_backbone)
        if self.freeze_backbone:
            self.backbone.eval()

    def set_output_scaling(self, mean, std):
        with torch.no_grad():
            self.out_mean.copy_(torch.as_tensor(mean, dtype=torch.float32))
            self.out_std.copy_(torch.as_tensor(std, dtype=torch.float32))

    def unfreeze(self):
        self.freeze_backbone = False
        self._apply_freeze()

    def train(self, mode: bool = True):
        super().train(mode)
        if self.freeze_backbone:
            self.backbone.eval()  # frozen stats stay frozen
        return self

    def forward(self, x):
        if self.freeze_backbone:
            with torch.no_grad():
                h = self.backbone(x)
        else:
            h = self.backbone(x)
        return self.head(h) * self.out_std + self.out_mean


@dataclasses.dataclass
class DownstreamResult:
    task: str
    mode: str
    fraction: float
    seed: int
    model: DownstreamModel
    best_epoch: int
    best_row: dict
    history: list[dict]
    stats: tuple[np.ndarray, np.ndarray]
    subset: tuple[str, ...]

    @property
    def best_metric(self) -> float:
        return self.best_row["selection"]

    @property
    def best_val_loss(self) -> float:
        return self.best_row["val_loss"]


def _load_backbone(pretrained_path) -> ResNet1d:
    state, _, _, _, _ = load_pretrain_checkpoint(pretrained_path)
    return state.query.backbone


def _eval_rows(model, store, rows, task, stats, batch_size=256):
    model.eval()
    preds, targets = [], []
    with torch.no_grad():
        for lo in range(0, len(rows), batch_size):
            chunk = rows[lo:lo + batch_size]
            x = torch.from_numpy(np.stack(
                [center_crop(store.load(r)) for r in chunk]).astype(np.float32))
            preds.append(model(x).numpy())
            targets.append(np.stack(
                [targets_from_labels(task, r["labels"]) for r in chunk]))
    preds = np.concatenate(preds)
    targets = np.concatenate(targets)
    loss = task_loss(task, torch.from_numpy(preds),
                     torch.from_numpy(targets), stats).item()
    row = {"val_loss": loss}
    row.update(task_metrics(task, preds, targets))
    return row


def _better(a, b, mode):
    if b is None:
        return True
    return a < b if mode == "min" else a > b


def train_head(store: SegmentStore, split: PatientSplit, task_name: str, *,
               mode: str, fraction: float = 1.0, hyper: Hyper | None = None,
               encoder_spec: EncoderSpec | None = None,
               pretrained_path=None, probe_result: "DownstreamResult | None" = None,
               seed: int = 0) -> DownstreamResult:
    """Train one downstream model and keep its best-validation-epoch state."""
    if task_name not in TASKS:
        raise ConfigurationError(f"unknown task {task_name!r}")
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}")
    task = TASKS[task_name]
    hyper = hyper or default_hyper(task_name, mode)

    subset = make_label_subset(split.train, fraction, seed)
    train_rows_by_pid = {pid: store.by_patient[pid] for pid in subset}
    all_train_rows = [r for pid in subset for r in train_rows_by_pid[pid]]
    val_rows = [r for pid in sorted(split.val) for r in store.by_patient[pid]]
    if not val_rows:
        raise DomainError("validation set has no segments")
    if task.kind == "binary":
        classes = {int(targets_from_labels(task, r["labels"])[0]) for r in val_rows}
        if len(classes) < 2:
            raise DataError(
                f"validation set has a single {task_name} class; "
                "AUROC-based model selection is undefined")

    stats = label_stats(np.stack(
        [targets_from_labels(task, r["labels"]) for r in all_train_rows]))

    if mode == "from_scratch":
        if encoder_spec is None:
            raise ConfigurationError("from_scratch needs an encoder spec")
        backbone = build_encoder(
            encoder_spec, derive_int(seed, "ds-init", task_name)).backbone
        model = DownstreamModel(backbone, task)
    elif mode == "linear_probe":
        if pretrained_path is None:
            raise ConfigurationError("linear_probe needs a pretraining checkpoint")
        model = DownstreamModel(_load_backbone(pretrained_path), task,
                                freeze_backbone=True)
        head_gen = torch.Generator().manual_seed(
            derive_int(seed, "ds-head", task_name) & 0x7FFFFFFFFFFFFFFF)
        with torch.no_grad():
            bound = 1.0 / math.sqrt(model.head.in_features)
            model.head.weight.uniform_(-bound, bound, generator=head_gen)
            model.head.bias.uniform_(-bound, bound, generator=head_gen)
    else:  # fine_tune
        if probe_result is None:
            raise ConfigurationError("fine_tune starts from a completed linear_probe")
        model = copy.deepcopy(probe_result.model)
        model.unfreeze()

    if task.kind == "regression":
        model.set_output_scaling(*stats)

    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=hyper.lr)

    history = []
    best_state, best_row, best_epoch = None, None, None

    if mode == "fine_tune":
        # the starting point (= the probe solution) competes as epoch -1
        row = _eval_rows(model, store, val_rows, task, stats)
        row.update({"epoch": -1, "lr": None, "train_loss": None})
        history.append(row)
        best_state = copy.deepcopy(model.state_dict())
        best_row, best_epoch = row, -1

    for epoch in range(hyper.epochs):
        lr = downstream_lr(epoch, hyper)
        for g in optimizer.param_groups:
            g["lr"] = lr
        rng = derive_rng(seed, "ds-epoch", task_name, mode, epoch)
        picked = []
        for pid in subset:
            rows = train_rows_by_pid[pid]
            picked.append(rows[int(rng.integers(len(rows)))])
        order = rng.permutation(len(picked))
        picked = [picked[i] for i in order]

        model.train()
        train_losses = []
        for lo in range(0, len(picked), hyper.batch_size):
            chunk = picked[lo:lo + hyper.batch_size]
            x = torch.from_numpy(np.stack(
                [random_crop(store.load(r), rng) for r in chunk]).astype(np.float32))
            y = torch.from_numpy(np.stack(
                [targets_from_labels(task, r["labels"]) for r in chunk])
                .astype(np.float32))
            preds = model(x)
            loss = task_loss(task, preds, y, stats)
            if not torch.isfinite(loss):
                raise NumericalError(
                    f"non-finite {task_name}/{mode} loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            train_losses.append(loss.item())

        row = _eval_rows(model, store, val_rows, task, stats)
        row.update({"epoch": epoch, "lr": lr,
                    "train_loss": float(np.mean(train_losses))})
        history.append(row)
        if _better(row["selection"], best_row["selection"] if best_row else None,
                   task.selection_mode):
            best_state = copy.deepcopy(model.state_dict())
            best_row, best_epoch = row, epoch

    model.load_state_dict(best_state)
    return DownstreamResult(
        task=task_name, mode=mode, fraction=fraction, seed=seed, model=model,
        best_epoch=best_epoch, best_row=best_row, history=history,
        stats=stats, subset=subset)


def percent_improvement(scratch_val_loss: float, other_val_loss: float) -> float:
    """Positive when the pretrained run beats from-scratch (lower loss)."""
    if scratch_val_loss == 0:
        raise DomainError("scratch loss of 0 makes relative improvement undefined")
    return 100.0 * (scratch_val_loss - other_val_loss) / scratch_val_loss


def save_downstream(path, result: DownstreamResult,
                    encoder_spec: EncoderSpec) -> None:
    tensors, ints = state_to_tensors(result.model)
    meta = {
        "kind": "downstream",
        "task": result.task,
        "mode": result.mode,
        "fraction": result.fraction,
        "seed": result.seed,
        "best_epoch": result.best_epoch,
        "best_row": result.best_row,
        "spec": encoder_spec.to_dict(),
        "int_state": ints,
    }
    write_checkpoint(path, meta, tensors)


def load_downstream(path) -> tuple[DownstreamModel, dict]:
    meta, tensors = read_checkpoint(path)
    if meta.get("kind") != "downstream":
        raise DomainError(f"{path} is not a downstream checkpoint")
    spec = EncoderSpec.from_dict(meta["spec"])
    task = TASKS[meta["task"]]
    model = DownstreamModel(ResNet1d(spec), task)
    load_state_from_tensors(model, tensors, meta.get("int_state", {}))
    return model, meta


def run_experiment_grid(store: SegmentStore, split: PatientSplit, *,
                        checkpoints: dict[str, str], tasks, fractions, modes,
                        seeds, hyper_overrides=None, out_path=None) -> list[dict]:
    """Cross product of encoder variants, tasks, label fractions, modes, and
    seeds. Scratch baselines are trained per variant architecture so relative
    improvements compare equals; fine-tuning reuses the probe of its cell.
    """
    hyper_overrides = hyper_overrides or {}
    rows = []
    for variant, ckpt_path in checkpoints.items():
        meta, _ = read_checkpoint(ckpt_path)
        spec = EncoderSpec.from_dict(meta["spec"])
        n_params = param_count(build_encoder(spec, 0), include_head=False)
        for task_name in tasks:
            for fraction in fractions:
                for seed in seeds:
                    cell = {}
                    probe = None
                    for mode in MODES:
                        if mode not in modes and not (
                                mode == "linear_probe" and "fine_tune" in modes):
                            continue
                        hyper = hyper_overrides.get(
                            (task_name, mode), default_hyper(task_name, mode))
                        result = train_head(
                            store, split, task_name, mode=mode,
                            fraction=fraction, hyper=hyper, encoder_spec=spec,
                            pretrained_path=ckpt_path, probe_result=probe,
                            seed=seed)
                        if mode == "linear_probe":
                            probe = result
                        cell[mode] = result
                    scratch = cell.get("from_scratch")
                    for mode, result in cell.items():
                        if mode not in modes:
                            continue
                        improvement = None
                        if scratch is not None and mode != "from_scratch":
                            improvement = percent_improvement(
                                scratch.best_val_loss, result.best_val_loss)
                        rows.append({
                            "variant": variant,
                            "backbone_params": n_params,
                            "task": task_name,
                            "mode": mode,
                            "fraction": fraction,
                            "seed": seed,
                            "best_epoch": result.best_epoch,
                            "selection_metric": result.best_metric,
                            "val_loss": result.best_val_loss,
                            "metrics": {k: v for k, v in result.best_row.items()
                                        if k not in ("epoch", "lr", "train_loss")},
                            "percent_improvement": improvement,
                        })
    if out_path is not None:
        from .segio import write_jsonl
        write_jsonl(out_path, rows)
    return rows
