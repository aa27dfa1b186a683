"""Synthetic multi-subject cohorts, preprocessing, subject splits and the
binary dataset format."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal

MAGIC = b"FUSD"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIf")


class DatasetFormatError(ValueError):
    pass


@dataclass
class CohortDataset:
    samples: np.ndarray  # N x C x T float32
    labels: np.ndarray
    subjects: np.ndarray
    sampling_rate: float
    n_classes: int
    provenance: str = "synthetic"

    def __post_init__(self) -> None:
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int32)
        self.subjects = np.asarray(self.subjects, dtype=np.int32)
        if self.samples.ndim != 3:
            raise ValueError(f"samples must be N x C x T, got {self.samples.shape}")
        n = self.samples.shape[0]
        if self.labels.shape != (n,) or self.subjects.shape != (n,):
            raise ValueError("samples, labels and subjects must share N")
        if not np.isfinite(self.samples).all():
            raise ValueError("samples contain non-finite values")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels outside [0, {self.n_classes})")
        if self.provenance not in ("synthetic", "imported"):
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]

    @property
    def n_times(self) -> int:
        return self.samples.shape[2]

    @property
    def subject_ids(self) -> list[int]:
        return sorted(set(self.subjects.tolist()))

    def subset(self, subject_ids) -> CohortDataset:
        keep = np.isin(self.subjects, list(subject_ids))
        return CohortDataset(self.samples[keep], self.labels[keep], self.subjects[keep],
                             self.sampling_rate, self.n_classes, self.provenance)


@dataclass(frozen=True)
class ShiftSpec:
    mixing_severity: float = 0.5
    amplitude_jitter: float = 0.1
    noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("mixing_severity", "amplitude_jitter", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


ALPHA_BAND = (8.0, 13.0)


def class_templates(n_channels: int, n_times: int, n_classes: int, sampling_rate: float,
                    rng: np.random.Generator, n_components: int = 2,
                    band: tuple[float, float] = ALPHA_BAND) -> np.ndarray:
    """K x C x T clean signals: each class is a sum of sinusoids at its own
    frequencies, each component with its own spatial pattern and phases.

    All frequencies sit inside one narrow band so that classes differ mainly
    in spatial layout, which is what the per-subject mixing perturbs.
    """
    lo, hi = band
    hi = min(hi, 0.45 * sampling_rate)
    grid = np.linspace(lo, hi, n_classes * n_components)
    freqs = rng.permutation(grid).reshape(n_classes, n_components)
    t = np.arange(n_times) / sampling_rate
    out = np.zeros((n_classes, n_channels, n_times))
    for k in range(n_classes):
        for j in range(n_components):
            pattern = rng.standard_normal(n_channels)
            pattern /= np.linalg.norm(pattern) / np.sqrt(n_channels)
            phase = rng.uniform(0, 2 * np.pi, n_channels)
            out[k] += pattern[:, None] * np.sin(2 * np.pi * freqs[k, j] * t[None, :] + phase[:, None])
    return out


def mixing_matrix(n_channels: int, severity: float, rng: np.random.Generator) -> np.ndarray:
    """I + severity * R, R standard normal off the diagonal and zero on it."""
    r = rng.standard_normal((n_channels, n_channels))
    np.fill_diagonal(r, 0.0)
    return np.eye(n_channels) + severity * r


def generate_cohort(n_subjects: int, trials_per_class: int, n_channels: int, n_times: int,
                    n_classes: int, spec: ShiftSpec = ShiftSpec(),
                    sampling_rate: float = 128.0) -> CohortDataset:
    if min(n_subjects, trials_per_class, n_channels, n_times) < 1:
        raise ValueError("n_subjects, trials_per_class, n_channels and n_times must be positive")
    if n_classes < 2:
        raise ValueError(f"n_classes must be >= 2, got {n_classes}")
    root = np.random.SeedSequence(spec.seed)
    template_seed, *subject_seeds = root.spawn(n_subjects + 1)
    templates = class_templates(n_channels, n_times, n_classes, sampling_rate,
                                np.random.default_rng(template_seed))
    samples, labels, subjects = [], [], []
    for s, seed in enumerate(subject_seeds):
        rng = np.random.default_rng(seed)
        mix = mixing_matrix(n_channels, spec.mixing_severity, rng)
        mixed = np.einsum("ij,kjt->kit", mix, templates)
        y = np.repeat(np.arange(n_classes), trials_per_class)
        gain = np.exp(spec.amplitude_jitter * rng.standard_normal(len(y)))
        noise = spec.noise_sigma * rng.standard_normal((len(y), n_channels, n_times))
        samples.append(gain[:, None, None] * mixed[y] + noise)
        labels.append(y)
        subjects.append(np.full(len(y), s))
    return CohortDataset(np.concatenate(samples), np.concatenate(labels),
                         np.concatenate(subjects), sampling_rate, n_classes, "synthetic")


# --- splits -----------------------------------------------------------------

@dataclass
class SplitPlan:
    folds: list[tuple[tuple[int, ...], tuple[int, ...]]]
    scheme: str

    def write_manifest(self, path: str | Path) -> None:
        lines = ["fold,scheme,target_subjects,source_subjects"]
        for i, (tgt, src) in enumerate(self.folds):
            lines.append(f"{i},{self.scheme},{' '.join(map(str, tgt))},{' '.join(map(str, src))}")
        Path(path).write_text("\n".join(lines) + "\n")


def loso_splits(cohort: CohortDataset) -> SplitPlan:
    ids = cohort.subject_ids
    if len(ids) < 2:
        raise ValueError(f"LOSO needs at least 2 subjects, got {len(ids)}")
    folds = [((s,), tuple(i for i in ids if i != s)) for s in ids]
    return SplitPlan(folds, "LOSO")


def logo_splits(cohort: CohortDataset, group_size: int) -> SplitPlan:
    """Contiguous groups of sorted subject ids; a smaller final group is kept."""
    ids = cohort.subject_ids
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    if len(ids) < 2 or len(ids) <= group_size:
        raise ValueError(f"{len(ids)} subjects cannot form more than one group of {group_size}")
    groups = [tuple(ids[i:i + group_size]) for i in range(0, len(ids), group_size)]
    folds = [(g, tuple(i for i in ids if i not in g)) for g in groups]
    return SplitPlan(folds, "LOGO")


# --- preprocessing ----------------------------------------------------------

def _parse_indices(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return out


def parse_pipeline(text: str) -> list[tuple]:
    """``"bandpass:0.3:50;resample:200;window:2:2;channel_select:0-3,7;zscore"``."""
    ops = []
    for item in filter(None, (s.strip() for s in text.split(";"))):
        name, *args = item.split(":")
        if name == "bandpass":
            ops.append(("bandpass", float(args[0]), float(args[1])))
        elif name == "resample":
            ops.append(("resample", float(args[0])))
        elif name == "window":
            length = float(args[0])
            ops.append(("window", length, float(args[1]) if len(args) > 1 else length))
        elif name == "channel_select":
            ops.append(("channel_select", _parse_indices(args[0])))
        elif name in ("zscore", "zscore_per_channel"):
            ops.append(("zscore_per_channel",))
        else:
            raise ValueError(f"unknown preprocessing op {name!r}")
    return ops


def bandpass(x: np.ndarray, rate: float, lo: float, hi: float, order: int = 4) -> np.ndarray:
    nyq = rate / 2
    if hi >= nyq:
        raise ValueError(f"bandpass upper edge {hi} Hz must be below Nyquist {nyq} Hz")
    if not 0 <= lo < hi:
        raise ValueError(f"bandpass edges must satisfy 0 <= lo < hi, got {lo}, {hi}")
    if lo == 0:
        sos = signal.butter(order, hi, btype="lowpass", fs=rate, output="sos")
    else:
        sos = signal.butter(order, [lo, hi], btype="bandpass", fs=rate, output="sos")
    return signal.sosfiltfilt(sos, x, axis=-1)


def resample(x: np.ndarray, rate: float, new_rate: float) -> np.ndarray:
    ratio = Fraction(new_rate / rate).limit_denominator(1000)
    return signal.resample_poly(x, ratio.numerator, ratio.denominator, axis=-1)


def window(ds: CohortDataset, length_s: float, stride_s: float) -> CohortDataset:
    """Cut every trial into windows; trial i's windows stay contiguous in output order."""
    n = int(round(length_s * ds.sampling_rate))
    step = int(round(stride_s * ds.sampling_rate))
    if n > ds.n_times:
        raise ValueError(f"window of {n} samples exceeds trial length {ds.n_times}")
    if n < 1 or step < 1:
        raise ValueError("window length and stride must be at least one sample")
    starts = range(0, ds.n_times - n + 1, step)
    x = np.stack([ds.samples[:, :, s:s + n] for s in starts], axis=1)
    w = len(starts)
    return CohortDataset(x.reshape(len(ds) * w, ds.n_channels, n), np.repeat(ds.labels, w),
                         np.repeat(ds.subjects, w), ds.sampling_rate, ds.n_classes, ds.provenance)


def preprocess(raw: CohortDataset, ops: list[tuple] | str) -> CohortDataset:
    if isinstance(ops, str):
        ops = parse_pipeline(ops)
    ds = raw
    for op in ops:
        name = op[0]
        if name == "window":
            ds = window(ds, op[1], op[2])
            continue
        x, rate = ds.samples.astype(np.float64), ds.sampling_rate
        if name == "bandpass":
            x = bandpass(x, rate, op[1], op[2])
        elif name == "resample":
            x, rate = resample(x, rate, op[1]), float(op[1])
        elif name == "channel_select":
            idx = list(op[1])
            if max(idx, default=-1) >= ds.n_channels or min(idx, default=0) < 0:
                raise ValueError(f"channel index out of range for C={ds.n_channels}")
            x = x[:, idx, :]
        elif name == "zscore_per_channel":
            sd = x.std(axis=-1, keepdims=True)
            x = (x - x.mean(axis=-1, keepdims=True)) / np.where(sd > 0, sd, 1.0)
        else:
            raise ValueError(f"unknown preprocessing op {name!r}")
        ds = CohortDataset(x, ds.labels, ds.subjects, rate, ds.n_classes, ds.provenance)
    return ds


# --- file format ------------------------------------------------------------

def save_dataset(ds: CohortDataset, path: str | Path) -> None:
    n, c, t = ds.samples.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, c, t, ds.n_classes, ds.sampling_rate))
        fh.write(ds.samples.astype("<f4", copy=False).tobytes())
        fh.write(ds.labels.astype("<i4", copy=False).tobytes())
        fh.write(ds.subjects.astype("<i4", copy=False).tobytes())


def load_dataset(path: str | Path) -> CohortDataset:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, n, c, t, k, rate = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r} in header")
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version} in header")
    offset = _HEADER.size
    sections = {}
    for name, dtype, count, shape in (("samples", "<f4", n * c * t, (n, c, t)),
                                      ("labels", "<i4", n, (n,)),
                                      ("subjects", "<i4", n, (n,))):
        nbytes = 4 * count
        if len(blob) < offset + nbytes:
            raise DatasetFormatError(f"{path}: truncated {name} section")
        sections[name] = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape)
        offset += nbytes
    if offset != len(blob):
        raise DatasetFormatError(f"{path}: {len(blob) - offset} trailing bytes after subjects")
    return CohortDataset(sections["samples"].copy(), sections["labels"].copy(),
                         sections["subjects"].copy(), float(rate), k, "imported")
