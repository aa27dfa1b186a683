"""Encoder/classifier arms shared by the foundation and specialist branches."""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

PROB_ATOL = 1e-6


class Role(str, Enum):
    FM = "FM"
    SM = "SM"


class View(str, Enum):
    LINEAR = "Linear"
    PROTOTYPE = "Prototype"


class Phase(str, Enum):
    PRETRAIN = "Pretrain"
    ADAPT = "Adapt"


@dataclass
class ProbBatch:
    """Row-stochastic N x K class probabilities for one view of one branch."""

    values: torch.Tensor
    view: View = View.LINEAR
    branch_role: Role = Role.SM

    def __post_init__(self) -> None:
        v = self.values.detach()
        if v.dim() != 2:
            raise ValueError(f"probabilities must be N x K, got shape {tuple(v.shape)}")
        if v.numel() == 0:
            return
        if not torch.isfinite(v).all():
            raise ValueError("probabilities contain non-finite entries")
        if (v < 0).any():
            raise ValueError("probabilities contain negative entries")
        err = (v.sum(dim=1) - 1).abs()
        if (err > PROB_ATOL).any():
            row = int(torch.argmax(err))
            raise ValueError(f"row {row} sums to {float(v[row].sum())}, not 1")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]


class SpecialistEncoder(nn.Module):
    """Compact temporal -> depthwise spatial -> separable conv stack.

    Output is ``f2 * n_bins`` features regardless of the input length.
    """

    def __init__(self, n_channels: int, f1: int = 4, depth: int = 4, kernel: int = 33,
                 sep_kernel: int = 9, n_bins: int = 8, dropout: float = 0.25):
        super().__init__()
        f2 = f1 * depth
        self.temporal = nn.Conv2d(1, f1, (1, kernel), padding=(0, kernel // 2), bias=False)
        self.bn1 = nn.BatchNorm2d(f1)
        self.spatial = nn.Conv2d(f1, f2, (n_channels, 1), groups=f1, bias=False)
        self.bn2 = nn.BatchNorm2d(f2)
        self.pool1 = nn.AvgPool2d((1, 4))
        self.sep_depth = nn.Conv2d(f2, f2, (1, sep_kernel), padding=(0, sep_kernel // 2),
                                   groups=f2, bias=False)
        self.sep_point = nn.Conv2d(f2, f2, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(f2)
        self.pool2 = nn.AdaptiveAvgPool2d((1, n_bins))
        self.drop = nn.Dropout(dropout)
        self.out_dim = f2 * n_bins

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x.unsqueeze(1)
        x = self.bn1(self.temporal(x))
        x = F.elu(self.bn2(self.spatial(x)))
        x = self.drop(self.pool1(x))
        x = F.elu(self.bn3(self.sep_point(self.sep_depth(x))))
        x = self.drop(self.pool2(x))
        return x.flatten(1)


class FoundationEncoder(nn.Module):
    """Wider 1-D conv trunk followed by a Linear-ELU-BatchNorm projection head.

    The projection head is part of the encoder, so it is frozen with the
    backbone during adaptation.
    """

    def __init__(self, n_channels: int, width: int = 32, kernel: int = 15, n_bins: int = 8,
                 proj_dim: int = 200):
        super().__init__()
        self.trunk = nn.Sequential(
            nn.Conv1d(n_channels, width, kernel, padding=kernel // 2),
            nn.BatchNorm1d(width),
            nn.ELU(),
            nn.AvgPool1d(4),
            nn.Conv1d(width, width, kernel // 2 | 1, padding=kernel // 4),
            nn.BatchNorm1d(width),
            nn.ELU(),
            nn.AdaptiveAvgPool1d(n_bins),
        )
        self.projection = nn.Sequential(
            nn.Linear(width * n_bins, proj_dim),
            nn.ELU(),
            nn.BatchNorm1d(proj_dim),
        )
        self.out_dim = proj_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.projection(self.trunk(x).flatten(1))


DEFAULT_ARCH = {
    Role.SM: {"f1": 4, "depth": 4, "kernel": 33, "sep_kernel": 9, "n_bins": 8, "dropout": 0.25},
    Role.FM: {"width": 32, "kernel": 15, "n_bins": 8, "proj_dim": 200},
}


class Branch(nn.Module):
    """One model arm: encoder, single linear classifier and trainability flags."""

    def __init__(self, role: Role, n_channels: int, n_times: int, num_classes: int,
                 arch: dict | None = None):
        super().__init__()
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        self.role = Role(role)
        self.n_channels = n_channels
        self.n_times = n_times
        self.num_classes = num_classes
        self.arch = dict(DEFAULT_ARCH[self.role])
        if arch:
            unknown = set(arch) - set(self.arch)
            if unknown:
                raise ValueError(f"unknown {self.role.value} arch keys: {sorted(unknown)}")
            self.arch.update(arch)
        if self.role is Role.SM:
            self.encoder = SpecialistEncoder(n_channels, **self.arch)
        else:
            self.encoder = FoundationEncoder(n_channels, **self.arch)
        self.feature_dim = self.encoder.out_dim
        self.classifier = nn.Linear(self.feature_dim, num_classes)

    @property
    def encoder_trainable(self) -> bool:
        return all(p.requires_grad for p in self.encoder.parameters())

    @encoder_trainable.setter
    def encoder_trainable(self, flag: bool) -> None:
        self.encoder.requires_grad_(flag)

    @property
    def classifier_trainable(self) -> bool:
        return all(p.requires_grad for p in self.classifier.parameters())

    @classifier_trainable.setter
    def classifier_trainable(self, flag: bool) -> None:
        self.classifier.requires_grad_(flag)

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(encode(self, x))


def encode(branch: Branch, batch: torch.Tensor) -> torch.Tensor:
    expected = (branch.n_channels, branch.n_times)
    if batch.dim() != 3 or tuple(batch.shape[1:]) != expected:
        raise ValueError(
            f"{branch.role.value} branch expects (N, C={expected[0]}, T={expected[1]}), "
            f"got {tuple(batch.shape)}"
        )
    return branch.encoder(batch)


def linear_view(branch: Branch, features: torch.Tensor) -> ProbBatch:
    if features.dim() != 2 or features.shape[1] != branch.feature_dim:
        raise ValueError(
            f"{branch.role.value} classifier expects D={branch.feature_dim}, "
            f"got {tuple(features.shape)}"
        )
    bad = ~torch.isfinite(features.detach()).all(dim=1)
    if bad.any():
        raise ValueError(f"non-finite features in row {int(bad.nonzero()[0])}")
    probs = F.softmax(branch.classifier(features), dim=1)
    return ProbBatch(probs, View.LINEAR, branch.role)


def predicted_label(p: ProbBatch | torch.Tensor) -> torch.Tensor:
    """Row argmax; torch returns the first maximal index, so ties go to the lowest class."""
    values = p.values if isinstance(p, ProbBatch) else p
    return torch.argmax(values.detach(), dim=1)


def set_phase_freezing(fm: Branch, sm: Branch, phase: Phase | str) -> None:
    phase = Phase(phase)
    if phase is Phase.PRETRAIN:
        for b in (fm, sm):
            b.encoder_trainable = True
            b.classifier_trainable = True
    else:
        fm.encoder_trainable = False
        fm.classifier_trainable = True
        sm.encoder_trainable = True
        sm.classifier_trainable = False


def state_hash(module: nn.Module) -> str:
    """sha256 over every parameter and buffer, in name order."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# checkpoint blob: magic, u32 version, u32 header length, JSON header, raw tensors
CKPT_MAGIC = b"FUSB"
CKPT_VERSION = 1


def _tensor_blob(tensors: dict[str, torch.Tensor]) -> tuple[list[dict], bytes]:
    meta, buf = [], io.BytesIO()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        meta.append({"name": name, "dtype": str(t.dtype).removeprefix("torch."),
                     "shape": list(t.shape)})
        buf.write(t.numpy().tobytes())
    return meta, buf.getvalue()


def checkpoint_bytes(branch: Branch, bank=None) -> bytes:
    tensors = dict(branch.state_dict())
    header = {
        "role": branch.role.value,
        "n_channels": branch.n_channels,
        "n_times": branch.n_times,
        "num_classes": branch.num_classes,
        "arch": branch.arch,
    }
    if bank is not None:
        tensors["bank.centroids"] = bank.centroids
        header["bank"] = {"momentum": bank.momentum, "margin_threshold": bank.margin_threshold,
                          "temperature": bank.temperature}
    header["tensors"], payload = _tensor_blob(tensors)
    head = json.dumps(header, sort_keys=True).encode()
    return CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(head)) + head + payload


def save_checkpoint(path: str | Path, branch: Branch, bank=None) -> str:
    """Write one branch (and optionally its prototype bank); returns the blob's sha256."""
    blob = checkpoint_bytes(branch, bank)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path: str | Path):
    """Returns ``(branch, bank_or_None)``."""
    from .prototypes import PrototypeBank

    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    version, head_len = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[12:12 + head_len])
    offset = 12 + head_len
    tensors = {}
    for m in header["tensors"]:
        dtype = getattr(torch, m["dtype"])
        count = 1
        for s in m["shape"]:
            count *= s
        nbytes = count * torch.empty((), dtype=dtype).element_size()
        chunk = blob[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise ValueError(f"{path}: truncated tensor {m['name']}")
        tensors[m["name"]] = torch.frombuffer(bytearray(chunk), dtype=dtype).reshape(m["shape"])
        offset += nbytes
    branch = Branch(Role(header["role"]), header["n_channels"], header["n_times"],
                    header["num_classes"], header["arch"])
    centroids = tensors.pop("bank.centroids", None)
    first = next(iter(tensors.values()), None)
    if first is not None and first.dtype == torch.float64:
        branch.double()
    branch.load_state_dict(tensors)
    bank = None
    if centroids is not None:
        bank = PrototypeBank(centroids=centroids, owner_role=branch.role, **header["bank"])
    return branch, bank
