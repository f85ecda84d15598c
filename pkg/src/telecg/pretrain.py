"""Patient-contrastive pretraining with a momentum key encoder and a FIFO
queue of negatives.

Positive pairs are random crops drawn from two different curated segments of
the same patient (the same segment twice only when a patient has a single
segment). One epoch visits one segment per training patient. The optimized
loss is the queue-based contrastive softmax (positive similarity in the
denominator); the pairwise in-batch variant is computed on a fixed-size
validation batch for monitoring only.
"""

from __future__ import annotations

import copy
import dataclasses
import math
from pathlib import Path

import numpy as np
import torch

from .encoder import (ContrastiveEncoder, EncoderSpec, build_encoder,
                      center_crop, load_state_from_tensors, random_crop,
                      state_to_tensors)
from .errors import ConfigurationError, DomainError, NumericalError
from .seeding import derive_int, derive_rng
from .segio import append_jsonl, read_checkpoint, read_waveform, write_checkpoint

NORM_TOLERANCE = 1e-4


# ---------------------------------------------------------------------------
# losses


def contrastive_softmax_loss(pos_sim: torch.Tensor, neg_sims: torch.Tensor,
                             temperature: float) -> torch.Tensor:
    """-log softmax of the positive among {positive} + negatives.

    pos_sim: (...,) raw similarity of each anchor to its positive.
    neg_sims: (..., K) similarities to K >= 0 negatives.
    Adding a constant to every similarity of an anchor leaves its loss
    unchanged; with no negatives the loss is exactly zero.
    """
    if temperature <= 0:
        raise DomainError("temperature must be positive")
    logits = torch.cat([pos_sim.unsqueeze(-1), neg_sims], dim=-1) / temperature
    return torch.logsumexp(logits, dim=-1) - logits[..., 0]


def _check_unit(name: str, t: torch.Tensor) -> None:
    if t.numel() == 0:
        return
    norms = t.norm(dim=-1)
    err = (norms - 1.0).abs().max().item()
    if err > NORM_TOLERANCE:
        raise DomainError(f"{name} must be L2-normalized (max deviation {err:.3g})")


def info_nce(query: torch.Tensor, key_pos: torch.Tensor, queue: torch.Tensor,
             temperature: float) -> torch.Tensor:
    """Queue-based contrastive loss.

    query/key_pos: (d,) or (B, d) unit vectors; queue: (K, d) unit rows,
    K may be zero. Returns a scalar for vector input, per-sample losses
    (B,) for batched input; the training loop averages over the batch.
    """
    if query.shape != key_pos.shape:
        raise DomainError(f"query {tuple(query.shape)} vs key {tuple(key_pos.shape)}")
    if queue.ndim != 2 or queue.shape[-1] != query.shape[-1]:
        raise DomainError(f"queue shape {tuple(queue.shape)} incompatible")
    _check_unit("query", query.detach())
    _check_unit("key", key_pos.detach())
    _check_unit("queue", queue.detach())
    pos = (query * key_pos).sum(dim=-1)
    negs = query @ queue.transpose(0, 1)
    if query.ndim == 1:
        negs = negs.reshape(-1)
        return contrastive_softmax_loss(pos, negs, temperature)
    return contrastive_softmax_loss(pos, negs, temperature)


def nt_xent(embeddings: torch.Tensor, temperature: float) -> torch.Tensor:
    """Pairwise in-batch contrastive loss over 2N embeddings.

    Row i pairs with row i+N (and vice versa); similarities are cosine, so
    inputs need not be pre-normalized. Mean over all 2N ordered anchors.
    """
    if temperature <= 0:
        raise DomainError("temperature must be positive")
    if embeddings.ndim != 2 or embeddings.shape[0] < 2 or embeddings.shape[0] % 2:
        raise DomainError(f"need an even batch of >= 2 rows, got {tuple(embeddings.shape)}")
    two_n = embeddings.shape[0]
    n = two_n // 2
    z = torch.nn.functional.normalize(embeddings, dim=-1)
    sims = z @ z.transpose(0, 1) / temperature
    sims.fill_diagonal_(float("-inf"))
    targets = torch.cat([torch.arange(n, two_n), torch.arange(0, n)])
    return torch.nn.functional.cross_entropy(sims, targets.to(sims.device))


# ---------------------------------------------------------------------------
# schedule


@dataclasses.dataclass(frozen=True)
class ScheduleSpec:
    initial_lr: float = 0.000625
    final_lr: float = 1e-6
    warmup_epochs: int = 5
    total_epochs: int = 500

    def __post_init__(self):
        if not 0 < self.final_lr <= self.initial_lr:
            raise ConfigurationError("need 0 < final_lr <= initial_lr")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigurationError("need 0 <= warmup_epochs < total_epochs")


def lr_schedule(epoch: int, spec: ScheduleSpec) -> float:
    """Linear warmup from a tenth of the peak, then half-cosine decay."""
    if not 0 <= epoch <= spec.total_epochs:
        raise DomainError(f"epoch {epoch} outside [0, {spec.total_epochs}]")
    if spec.warmup_epochs > 0 and epoch < spec.warmup_epochs:
        return spec.initial_lr * (0.1 + 0.9 * epoch / spec.warmup_epochs)
    t = (epoch - spec.warmup_epochs) / (spec.total_epochs - spec.warmup_epochs)
    return spec.final_lr + (spec.initial_lr - spec.final_lr) \
        * (1.0 + math.cos(math.pi * t)) / 2.0


# ---------------------------------------------------------------------------
# momentum state


@torch.no_grad()
def momentum_update(query: torch.nn.Module, key: torch.nn.Module,
                    momentum: float) -> None:
    """key <- momentum * key + (1 - momentum) * query, including running stats."""
    if not 0.0 <= momentum <= 1.0:
        raise DomainError(f"momentum must be in [0, 1], got {momentum}")
    q_params = dict(query.named_parameters())
    k_params = dict(key.named_parameters())
    if q_params.keys() != k_params.keys():
        raise DomainError("query/key parameter structures differ")
    for name, qp in q_params.items():
        kp = k_params[name]
        if kp.shape != qp.shape:
            raise DomainError(f"shape mismatch for {name!r}")
        kp.mul_(momentum).add_(qp, alpha=1.0 - momentum)
    k_bufs = dict(key.named_buffers())
    for name, qb in query.named_buffers():
        kb = k_bufs[name]
        if qb.dtype.is_floating_point:
            kb.mul_(momentum).add_(qb, alpha=1.0 - momentum)
        else:
            kb.copy_(qb)


@dataclasses.dataclass
class MocoState:
    query: ContrastiveEncoder
    key: ContrastiveEncoder
    queue: torch.Tensor  # (K, d), unit rows
    cursor: int
    momentum: float
    temperature: float


def init_moco(spec: EncoderSpec, queue_size: int, momentum: float,
              temperature: float, seed: int) -> MocoState:
    """Fresh state: key starts as a copy of the query; queue holds random
    unit vectors so early losses are well-defined."""
    if queue_size < 1:
        raise ConfigurationError("queue_size must be >= 1")
    query = build_encoder(spec, derive_int(seed, "init"))
    key = copy.deepcopy(query)
    for p in key.parameters():
        p.requires_grad_(False)
    rng = derive_rng(seed, "queue")
    d = spec.head_dims[-1]
    q = rng.standard_normal((queue_size, d))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return MocoState(query=query, key=key,
                     queue=torch.from_numpy(q.astype(np.float32)),
                     cursor=0, momentum=momentum, temperature=temperature)


def enqueue(state: MocoState, keys: torch.Tensor) -> None:
    """Overwrite the oldest rows with fresh keys; cursor wraps modulo K."""
    k_total = state.queue.shape[0]
    batch = keys.shape[0]
    if batch == 0 or k_total % batch:
        raise DomainError(f"batch size {batch} must divide queue size {k_total}")
    if keys.shape[1] != state.queue.shape[1]:
        raise DomainError("key dimensionality does not match the queue")
    idx = (state.cursor + torch.arange(batch)) % k_total
    state.queue[idx] = keys.detach()
    state.cursor = int((state.cursor + batch) % k_total)


# ---------------------------------------------------------------------------
# data plumbing


@dataclasses.dataclass(frozen=True)
class PatientSplit:
    train: tuple[str, ...]
    val: tuple[str, ...]


def make_split(patient_ids, val_fraction: float = 0.1,
               seed: int = 0) -> PatientSplit:
    """Disjoint patient-level split; deterministic in (ids, fraction, seed)."""
    ids = sorted(set(patient_ids))
    if len(ids) < 2:
        raise DomainError("need at least 2 patients to split")
    if not 0.0 < val_fraction < 1.0:
        raise DomainError("val_fraction must be in (0, 1)")
    n_val = max(1, round(val_fraction * len(ids)))
    if n_val >= len(ids):
        n_val = len(ids) - 1
    perm = derive_rng(seed, "split").permutation(len(ids))
    val = tuple(sorted(ids[i] for i in perm[:n_val]))
    train = tuple(sorted(ids[i] for i in perm[n_val:]))
    return PatientSplit(train=train, val=val)


class SegmentStore:
    """Manifest-backed access to curated segment arrays, with an LRU cache."""

    def __init__(self, manifest_rows, cache_size: int = 8192):
        self.rows = list(manifest_rows)
        if not self.rows:
            raise DomainError("manifest is empty")
        self.by_patient: dict[str, list[dict]] = {}
        for row in self.rows:
            self.by_patient.setdefault(row["patient_id"], []).append(row)
        for rows in self.by_patient.values():
            rows.sort(key=lambda r: r["segment_id"])
        self._cache: dict[str, np.ndarray] = {}
        self._cache_size = cache_size

    def patient_ids(self) -> list[str]:
        return sorted(self.by_patient)

    def load(self, row: dict) -> np.ndarray:
        path = row["path"]
        arr = self._cache.get(path)
        if arr is None:
            arr, _ = read_waveform(path)
            if len(self._cache) >= self._cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[path] = arr
        return arr


def sample_epoch(store: SegmentStore, patient_ids, seed: int,
                 epoch: int) -> list[tuple[str, dict]]:
    """One uniformly chosen segment per patient, in shuffled patient order."""
    rng = derive_rng(seed, "epoch", epoch)
    picked = []
    for pid in sorted(patient_ids):
        rows = store.by_patient.get(pid)
        if not rows:
            raise DomainError(f"patient {pid} has no curated segments")
        picked.append((pid, rows[int(rng.integers(len(rows)))]))
    order = rng.permutation(len(picked))
    return [picked[i] for i in order]


def positive_pair(primary: np.ndarray, alternates, rng) -> tuple[np.ndarray, np.ndarray]:
    """Query crop from the primary segment, key crop from a different segment
    of the same patient when one exists."""
    q_view = random_crop(primary, rng)
    key_seg = alternates[int(rng.integers(len(alternates)))] if alternates else primary
    k_view = random_crop(key_seg, rng)
    return q_view, k_view


def _pair_batch(store, items, rng):
    q_views, k_views = [], []
    for pid, row in items:
        primary = store.load(row)
        others = [store.load(r) for r in store.by_patient[pid]
                  if r["segment_id"] != row["segment_id"]]
        q_view, k_view = positive_pair(primary, others, rng)
        q_views.append(q_view)
        k_views.append(k_view)
    q = torch.from_numpy(np.stack(q_views).astype(np.float32))
    k = torch.from_numpy(np.stack(k_views).astype(np.float32))
    return q, k


def encode_windows(model, windows: np.ndarray, batch_size: int = 128,
                   project: bool = False) -> np.ndarray:
    """Eval-mode embeddings for (n, leads, len) windows."""
    model.eval()
    outs = []
    with torch.no_grad():
        for lo in range(0, len(windows), batch_size):
            x = torch.from_numpy(windows[lo:lo + batch_size].astype(np.float32))
            outs.append((model(x) if project else model.embed(x)).numpy())
    return np.concatenate(outs, axis=0)


def patient_retrieval_score(model: ContrastiveEncoder, store: SegmentStore,
                            patient_ids, n_patients: int, n_segments: int,
                            seed: int, epoch: int = 0) -> float:
    """Fraction of windows whose cosine nearest neighbour shares the patient."""
    rng = derive_rng(seed, "retrieval", epoch)
    ids = sorted(patient_ids)
    if len(ids) > n_patients:
        ids = [ids[i] for i in rng.choice(len(ids), n_patients, replace=False)]
    windows, owners = [], []
    for pid in ids:
        rows = store.by_patient[pid]
        take = rng.choice(len(rows), n_segments, replace=len(rows) < n_segments)
        for ri in take:
            windows.append(center_crop(store.load(rows[int(ri)])))
            owners.append(pid)
    embs = encode_windows(model, np.stack(windows))
    embs = embs / np.maximum(np.linalg.norm(embs, axis=1, keepdims=True), 1e-12)
    sims = embs @ embs.T
    np.fill_diagonal(sims, -np.inf)
    nearest = sims.argmax(axis=1)
    owners = np.asarray(owners)
    return float((owners[nearest] == owners).mean())


# ---------------------------------------------------------------------------
# training loop


@dataclasses.dataclass(frozen=True)
class PretrainSettings:
    queue_size: int = 38912
    temperature: float = 0.1
    batch_size: int = 256
    val_batch_size: int = 512
    momentum: float = 0.999
    weight_decay: float = 0.0001
    val_fraction: float = 0.1
    retrieval_patients: int = 10
    retrieval_segments: int = 20
    lr_scale: float = 1.0       # optional halving for the deepest variants
    grad_accum_steps: int = 1
    schedule: ScheduleSpec = dataclasses.field(default_factory=ScheduleSpec)

    def __post_init__(self):
        if self.queue_size % self.batch_size:
            raise ConfigurationError(
                f"batch_size {self.batch_size} must divide queue_size {self.queue_size}")
        if self.batch_size < 2 or self.val_batch_size < 2 or self.val_batch_size % 2:
            raise ConfigurationError("batch sizes must be >= 2 (val batch even)")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigurationError("momentum must be in [0, 1]")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")
        if self.lr_scale <= 0 or self.grad_accum_steps < 1:
            raise ConfigurationError("lr_scale must be > 0, grad_accum_steps >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schedule"] = dataclasses.asdict(self.schedule)
        return d

    @staticmethod
    def from_dict(d: dict) -> "PretrainSettings":
        d = dict(d)
        d["schedule"] = ScheduleSpec(**d["schedule"])
        return PretrainSettings(**d)


def _optimizer_to_tensors(opt):
    tensors, meta = {}, {}
    sd = opt.state_dict()
    for idx, st in sd["state"].items():
        for name, val in st.items():
            key = f"opt/{idx}/{name}"
            if torch.is_tensor(val) and val.numel() > 1:
                tensors[key] = val.detach().cpu().numpy()
            elif torch.is_tensor(val):
                meta[key] = float(val.item())
            else:
                meta[key] = float(val)
    return tensors, meta


def _optimizer_from_tensors(opt, tensors, meta):
    sd = opt.state_dict()
    state = {}
    n_params = sum(len(g["params"]) for g in sd["param_groups"])
    for idx in range(n_params):
        entries = {}
        for key, arr in tensors.items():
            parts = key.split("/")
            if key.startswith("opt/") and int(parts[1]) == idx:
                entries[parts[2]] = torch.from_numpy(np.array(arr, dtype=np.float32))
        for key, val in meta.items():
            parts = key.split("/")
            if key.startswith("opt/") and int(parts[1]) == idx:
                entries[parts[2]] = torch.tensor(float(val))
        if entries:
            state[idx] = entries
    sd["state"] = state
    opt.load_state_dict(sd)


def save_pretrain_checkpoint(path, state: MocoState, optimizer, settings,
                             epochs_done: int, seed: int, extra: dict | None = None):
    q_tensors, q_ints = state_to_tensors(state.query, "query/")
    k_tensors, k_ints = state_to_tensors(state.key, "key/")
    o_tensors, o_meta = _optimizer_to_tensors(optimizer)
    tensors = {**q_tensors, **k_tensors, **o_tensors, "queue": state.queue.numpy()}
    meta = {
        "kind": "pretrain",
        "spec": state.query.spec.to_dict(),
        "settings": settings.to_dict(),
        "epochs_done": epochs_done,
        "cursor": state.cursor,
        "seed": seed,
        "int_state": {**q_ints, **k_ints},
        "opt_meta": o_meta,
    }
    if extra:
        meta.update(extra)
    write_checkpoint(path, meta, tensors)


def load_pretrain_checkpoint(path):
    """Rebuild (state, optimizer, settings, epochs_done, seed) exactly."""
    meta, tensors = read_checkpoint(path)
    if meta.get("kind") != "pretrain":
        raise DomainError(f"{path} is not a pretraining checkpoint")
    spec = EncoderSpec.from_dict(meta["spec"])
    settings = PretrainSettings.from_dict(meta["settings"])
    seed = int(meta["seed"])
    state = init_moco(spec, settings.queue_size, settings.momentum,
                      settings.temperature, seed)
    ints = meta.get("int_state", {})
    q_tensors = {k[len("query/"):]: v for k, v in tensors.items() if k.startswith("query/")}
    k_tensors = {k[len("key/"):]: v for k, v in tensors.items() if k.startswith("key/")}
    q_ints = {k[len("query/"):]: v for k, v in ints.items() if k.startswith("query/")}
    k_ints = {k[len("key/"):]: v for k, v in ints.items() if k.startswith("key/")}
    load_state_from_tensors(state.query, q_tensors, q_ints)
    load_state_from_tensors(state.key, k_tensors, k_ints)
    state.queue = torch.from_numpy(tensors["queue"].astype(np.float32))
    state.cursor = int(meta["cursor"])
    optimizer = torch.optim.AdamW(state.query.parameters(),
                                  lr=settings.schedule.initial_lr,
                                  weight_decay=settings.weight_decay)
    opt_tensors = {k: v for k, v in tensors.items() if k.startswith("opt/")}
    if opt_tensors or meta.get("opt_meta"):
        # materialize slots so load_state_dict has entries to fill
        for group in optimizer.param_groups:
            for p in group["params"]:
                optimizer.state[p] = {}
        _optimizer_from_tensors(optimizer, opt_tensors, meta.get("opt_meta", {}))
    return state, optimizer, settings, int(meta["epochs_done"]), seed


def _val_pairs(store, split, settings, seed, epoch):
    """Deterministic validation pair batch (val_batch_size // 2 pairs)."""
    rng = derive_rng(seed, "valpair", epoch)
    n_pairs = settings.val_batch_size // 2
    ids = sorted(split.val)
    items = []
    for j in range(n_pairs):
        pid = ids[int(rng.integers(len(ids)))]
        rows = store.by_patient[pid]
        items.append((pid, rows[int(rng.integers(len(rows)))]))
    return _pair_batch(store, items, rng)


@torch.no_grad()
def _validation_metrics(state, store, split, settings, seed, epoch):
    state.query.eval()
    state.key.eval()
    qv, kv = _val_pairs(store, split, settings, seed, epoch)
    chunks = []
    for lo in range(0, len(qv), 128):
        q = state.query(qv[lo:lo + 128])
        k = state.key(kv[lo:lo + 128])
        chunks.append((q, k))
    q = torch.cat([c[0] for c in chunks])
    k = torch.cat([c[1] for c in chunks])
    val_infonce = info_nce(q, k, state.queue, state.temperature).mean().item()
    val_ntxent = nt_xent(torch.cat([q, k], dim=0), state.temperature).item()
    return val_infonce, val_ntxent


def pretrain_loop(store: SegmentStore, split: PatientSplit, spec: EncoderSpec,
                  settings: PretrainSettings, *, seed: int = 0,
                  out_dir=None, resume_from=None,
                  compute_retrieval: bool = True) -> dict:
    """Run (or resume) contrastive pretraining; returns a run summary.

    Writes metrics.jsonl (one row per epoch), last.ckpt, and best.ckpt under
    out_dir when given. Per-epoch sampling is seeded by (seed, epoch) alone,
    so resuming from a checkpoint replays exactly the batches the
    uninterrupted run would have seen.
    """
    if set(split.train) & set(split.val):
        raise DomainError("train/val patient sets overlap")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        state, optimizer, settings, start_epoch, seed = \
            load_pretrain_checkpoint(resume_from)
    else:
        state = init_moco(spec, settings.queue_size, settings.momentum,
                          settings.temperature, seed)
        optimizer = torch.optim.AdamW(state.query.parameters(),
                                      lr=settings.schedule.initial_lr,
                                      weight_decay=settings.weight_decay)
        start_epoch = 0

    best_val = math.inf
    history = []
    b = settings.batch_size
    accum = settings.grad_accum_steps
    for epoch in range(start_epoch, settings.schedule.total_epochs):
        lr = lr_schedule(epoch, settings.schedule) * settings.lr_scale
        for group in optimizer.param_groups:
            group["lr"] = lr

        items = sample_epoch(store, split.train, seed, epoch)
        n_batches = len(items) // b
        state.query.train()
        state.key.train()
        batch_losses = []
        optimizer.zero_grad()
        micro = 0
        for bi in range(n_batches):
            rng = derive_rng(seed, "pair", epoch, bi)
            qv, kv = _pair_batch(store, items[bi * b:(bi + 1) * b], rng)
            if micro == 0:
                momentum_update(state.query, state.key, state.momentum)
            q = state.query(qv)
            with torch.no_grad():
                k = state.key(kv)
            loss = info_nce(q, k, state.queue, state.temperature).mean()
            if not torch.isfinite(loss):
                if out_dir is not None:
                    save_pretrain_checkpoint(out_dir / "diagnostic.ckpt", state,
                                             optimizer, settings, epoch, seed)
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {bi}")
            (loss / accum).backward()
            enqueue(state, k)
            batch_losses.append(loss.item())
            micro += 1
            if micro == accum:
                optimizer.step()
                optimizer.zero_grad()
                micro = 0
        if micro:
            optimizer.step()
            optimizer.zero_grad()

        norm_drift = (state.queue.norm(dim=1) - 1.0).abs().max().item()
        if norm_drift > 1e-3:
            raise NumericalError(f"queue rows drifted off the unit sphere ({norm_drift:.3g})")

        val_infonce, val_ntxent = _validation_metrics(
            state, store, split, settings, seed, epoch)
        retrieval = None
        if compute_retrieval:
            retrieval = patient_retrieval_score(
                state.query, store, split.val, settings.retrieval_patients,
                settings.retrieval_segments, seed, epoch)
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_infonce": float(np.mean(batch_losses)) if batch_losses else None,
            "val_infonce": val_infonce,
            "val_ntxent": val_ntxent,
            "retrieval_score": retrieval,
        }
        history.append(row)
        if out_dir is not None:
            append_jsonl(out_dir / "metrics.jsonl", row)
            save_pretrain_checkpoint(out_dir / "last.ckpt", state, optimizer,
                                     settings, epoch + 1, seed)
            if val_infonce < best_val:
                save_pretrain_checkpoint(out_dir / "best.ckpt", state, optimizer,
                                         settings, epoch + 1, seed,
                                         extra={"best_val_infonce": val_infonce})
        best_val = min(best_val, val_infonce)

    return {
        "epochs_done": settings.schedule.total_epochs,
        "best_val_infonce": best_val if best_val < math.inf else None,
        "history": history,
        "state": state,
    }
