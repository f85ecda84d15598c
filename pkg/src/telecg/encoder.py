"""1-D residual encoders over 4-lead, 1024-sample windows.

Pre-activation units, average pooling everywhere a classical ResNet would
max-pool, and a narrow first stage: stage output widths are
chan_start * (1, 2, 4, 8) for basic and bottleneck variants alike, with the
bottleneck's internal width a quarter of its stage output. That sizing is
what makes the deeper bottleneck variants *smaller* than ResNet34 at equal
chan_start, so parameter count is not monotone in depth.

The contrastive head is a 3-layer MLP whose output is L2-normalized.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import torch
from torch import nn

from .errors import DomainError
from .seeding import derive_rng
from .segio import read_checkpoint, write_checkpoint
from .synth import N_LEADS

INPUT_SAMPLES = 1024

STAGE_UNITS = {
    18: (2, 2, 2, 2),
    34: (3, 4, 6, 3),
    50: (3, 4, 6, 3),
    101: (3, 4, 23, 3),
    152: (3, 8, 36, 3),
}
BOTTLENECK_DEPTHS = (50, 101, 152)

# canonical named variants: depth and starting width
VARIANT_TABLE = {
    "resnet18": (18, 16),
    "resnet34": (34, 32),
    "resnet50": (50, 32),
    "resnet101": (101, 32),
    "resnet152": (152, 64),
    "resnet18x2": (18, 32),
    "resnet34x2": (34, 64),
    "resnet50x2": (50, 64),
    "resnet101x2": (101, 64),
    "resnet152x2": (152, 128),
}


@dataclasses.dataclass(frozen=True)
class EncoderSpec:
    depth: int = 18
    chan_start: int = 16
    projection_dims: tuple[int, int, int] | None = None
    input_channels: int = N_LEADS
    input_length: int = INPUT_SAMPLES

    def __post_init__(self):
        if self.depth not in STAGE_UNITS:
            raise DomainError(f"depth must be one of {sorted(STAGE_UNITS)}")
        if self.chan_start < 1:
            raise DomainError("chan_start must be >= 1")
        if self.bottleneck and self.chan_start % 4:
            raise DomainError("bottleneck variants need chan_start divisible by 4")
        if self.projection_dims is not None:
            if len(self.projection_dims) != 3 or min(self.projection_dims) < 1:
                raise DomainError("projection_dims must be 3 positive ints")
        if self.input_channels < 1 or self.input_length < 64:
            raise DomainError("bad input geometry")

    @property
    def bottleneck(self) -> bool:
        return self.depth in BOTTLENECK_DEPTHS

    @property
    def chan_out(self) -> int:
        return 8 * self.chan_start

    @property
    def head_dims(self) -> tuple[int, int, int]:
        if self.projection_dims is not None:
            return self.projection_dims
        return (self.chan_out, self.chan_out, 128)

    @staticmethod
    def from_variant(name: str, projection_dims=None) -> "EncoderSpec":
        if name not in VARIANT_TABLE:
            raise DomainError(f"unknown encoder variant {name!r}")
        depth, cs = VARIANT_TABLE[name]
        return EncoderSpec(depth=depth, chan_start=cs,
                           projection_dims=projection_dims)

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "chan_start": self.chan_start,
            "projection_dims": list(self.head_dims),
            "input_channels": self.input_channels,
            "input_length": self.input_length,
        }

    @staticmethod
    def from_dict(d: dict) -> "EncoderSpec":
        return EncoderSpec(
            depth=int(d["depth"]),
            chan_start=int(d["chan_start"]),
            projection_dims=tuple(d["projection_dims"]),
            input_channels=int(d.get("input_channels", N_LEADS)),
            input_length=int(d.get("input_length", INPUT_SAMPLES)),
        )


def _conv(in_ch, out_ch, kernel, stride=1):
    return nn.Conv1d(in_ch, out_ch, kernel, stride=stride,
                     padding=kernel // 2, bias=False)


class BasicUnit(nn.Module):
    """Pre-activation basic residual unit (two 3-taps convs)."""

    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        self.bn1 = nn.BatchNorm1d(in_ch)
        self.conv1 = _conv(in_ch, out_ch, 3, stride)
        self.bn2 = nn.BatchNorm1d(out_ch)
        self.conv2 = _conv(out_ch, out_ch, 3)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Conv1d(in_ch, out_ch, 1, stride=stride, bias=False)

    def forward(self, x):
        h = torch.relu(self.bn1(x))
        identity = self.shortcut(h) if self.shortcut is not None else x
        h = self.conv1(h)
        h = self.conv2(torch.relu(self.bn2(h)))
        return h + identity


class BottleneckUnit(nn.Module):
    """Pre-activation bottleneck; internal width is a quarter of the output."""

    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        mid = out_ch // 4
        self.bn1 = nn.BatchNorm1d(in_ch)
        self.conv1 = _conv(in_ch, mid, 1)
        self.bn2 = nn.BatchNorm1d(mid)
        self.conv2 = _conv(mid, mid, 3, stride)
        self.bn3 = nn.BatchNorm1d(mid)
        self.conv3 = _conv(mid, out_ch, 1)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Conv1d(in_ch, out_ch, 1, stride=stride, bias=False)

    def forward(self, x):
        h = torch.relu(self.bn1(x))
        identity = self.shortcut(h) if self.shortcut is not None else x
        h = self.conv1(h)
        h = self.conv2(torch.relu(self.bn2(h)))
        h = self.conv3(torch.relu(self.bn3(h)))
        return h + identity


class ResNet1d(nn.Module):
    """Backbone: stem -> 4 stages -> global average pool."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        cs = spec.chan_start
        unit = BottleneckUnit if spec.bottleneck else BasicUnit
        self.stem = _conv(spec.input_channels, cs, 15, stride=2)
        self.pool = nn.AvgPool1d(3, stride=2, padding=1)
        stages = []
        in_ch = cs
        for stage_i, n_units in enumerate(STAGE_UNITS[spec.depth]):
            out_ch = cs * (2 ** stage_i)
            blocks = []
            for unit_i in range(n_units):
                stride = 2 if (stage_i > 0 and unit_i == 0) else 1
                blocks.append(unit(in_ch, out_ch, stride))
                in_ch = out_ch
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.Sequential(*stages)
        self.final_bn = nn.BatchNorm1d(spec.chan_out)

    def forward(self, x):
        if x.ndim != 3 or x.shape[1] != self.spec.input_channels \
                or x.shape[2] != self.spec.input_length:
            raise DomainError(
                f"expected (B, {self.spec.input_channels}, "
                f"{self.spec.input_length}), got {tuple(x.shape)}")
        h = self.pool(self.stem(x))
        h = self.stages(h)
        h = torch.relu(self.final_bn(h))
        return h.mean(dim=2)


class ProjectionHead(nn.Module):
    def __init__(self, in_dim, dims):
        super().__init__()
        d1, d2, d3 = dims
        self.net = nn.Sequential(
            nn.Linear(in_dim, d1), nn.ReLU(),
            nn.Linear(d1, d2), nn.ReLU(),
            nn.Linear(d2, d3),
        )

    def forward(self, x):
        return nn.functional.normalize(self.net(x), dim=-1)


class ContrastiveEncoder(nn.Module):
    """Backbone plus L2-normalized projection head."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        self.backbone = ResNet1d(spec)
        self.head = ProjectionHead(spec.chan_out, spec.head_dims)

    def embed(self, x):
        return self.backbone(x)

    def project(self, embedding):
        return self.head(embedding)

    def forward(self, x):
        return self.head(self.backbone(x))


def init_parameters(module: nn.Module, init_seed: int) -> None:
    """Deterministic re-initialization: fan-in scaled uniform weights."""
    gen = torch.Generator().manual_seed(init_seed & 0x7FFFFFFFFFFFFFFF)
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.Linear)):
            fan_in = m.weight.shape[1] * (m.weight.shape[2]
                                          if m.weight.ndim == 3 else 1)
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)
        elif isinstance(m, nn.BatchNorm1d):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.fill_(0.0)
            m.reset_running_stats()


def build_encoder(spec: EncoderSpec, init_seed: int = 0) -> ContrastiveEncoder:
    model = ContrastiveEncoder(spec)
    init_parameters(model, init_seed)
    return model


def param_count(module: nn.Module, include_head: bool = True) -> int:
    """Learnable parameter count (BatchNorm running stats excluded)."""
    if isinstance(module, ContrastiveEncoder) and not include_head:
        module = module.backbone
    return sum(p.numel() for p in module.parameters())


def random_crop(segment: np.ndarray, rng: np.random.Generator,
                length: int = INPUT_SAMPLES) -> np.ndarray:
    """Uniform random window of a (leads, n) segment."""
    n = segment.shape[-1]
    if n < length:
        raise DomainError(f"segment too short to crop: {n} < {length}")
    start = int(rng.integers(0, n - length + 1))
    return segment[..., start:start + length]


def center_crop(segment: np.ndarray, length: int = INPUT_SAMPLES) -> np.ndarray:
    n = segment.shape[-1]
    if n < length:
        raise DomainError(f"segment too short to crop: {n} < {length}")
    start = (n - length) // 2
    return segment[..., start:start + length]


def crop_seed_rng(seed: int, *labels) -> np.random.Generator:
    return derive_rng(seed, "crop", *labels)


# ---------------------------------------------------------------------------
# torch state <-> checkpoint container


def state_to_tensors(module: nn.Module, prefix: str = ""):
    """Split a state dict into float tensors and integer scalars."""
    tensors = {}
    ints = {}
    for name, t in module.state_dict().items():
        key = prefix + name
        if t.dtype in (torch.int64, torch.int32, torch.long):
            ints[key] = int(t.item()) if t.numel() == 1 else t.tolist()
        else:
            tensors[key] = t.detach().cpu().numpy()
    return tensors, ints


def load_state_from_tensors(module: nn.Module, tensors, ints, prefix: str = ""):
    state = module.state_dict()
    loaded = {}
    for name, t in state.items():
        key = prefix + name
        if key in tensors:
            loaded[name] = torch.from_numpy(
                np.array(tensors[key], dtype=np.float32)).to(t.dtype).reshape(t.shape)
        elif key in ints:
            loaded[name] = torch.tensor(ints[key], dtype=t.dtype).reshape(t.shape)
        else:
            raise DomainError(f"checkpoint is missing state entry {key!r}")
    module.load_state_dict(loaded)


def save_encoder(path, model: ContrastiveEncoder, extra_meta: dict | None = None):
    tensors, ints = state_to_tensors(model)
    meta = {"kind": "encoder", "spec": model.spec.to_dict(), "int_state": ints}
    if extra_meta:
        meta.update(extra_meta)
    write_checkpoint(path, meta, tensors)


def load_encoder(path) -> tuple[ContrastiveEncoder, dict]:
    meta, tensors = read_checkpoint(path)
    spec = EncoderSpec.from_dict(meta["spec"])
    model = ContrastiveEncoder(spec)
    load_state_from_tensors(model, tensors, meta.get("int_state", {}))
    return model, meta
