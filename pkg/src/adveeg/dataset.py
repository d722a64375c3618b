"""Epoch containers, normalization, epoch extraction, block-aware splitting, bundle I/O."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, FormatError

BUNDLE_FORMAT_VERSION = 1
DEFAULT_LABEL_NAMES = ("non-target", "target")
NORM_GUARD = 1e-12


@dataclass
class Epoch:
    data: np.ndarray  # (C, T)
    label: int
    block: int


@dataclass
class EpochSet:
    """Epochs stored epoch-major: ``data`` is (n, C, T), ``labels``/``blocks`` are (n,).

    Blocks are 1-based.
    """

    data: np.ndarray
    labels: np.ndarray
    blocks: np.ndarray
    sample_rate_hz: float = 300.0
    normalized: bool = False
    label_names: tuple = DEFAULT_LABEL_NAMES
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise DimensionError(f"epoch data must be (n, C, T), got shape {self.data.shape}")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.blocks = np.asarray(self.blocks, dtype=np.int64).reshape(-1)
        n = self.data.shape[0]
        if self.labels.shape != (n,) or self.blocks.shape != (n,):
            raise DimensionError(
                f"{n} epochs but {self.labels.size} labels and {self.blocks.size} block IDs", axis=0)
        if n and self.blocks.min() < 1:
            raise ConfigError("block IDs are 1-based")

    def __len__(self):
        return self.data.shape[0]

    def __getitem__(self, i) -> Epoch:
        return Epoch(self.data[i], int(self.labels[i]), int(self.blocks[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def channels(self):
        return self.data.shape[1]

    @property
    def samples(self):
        return self.data.shape[2]

    @property
    def n_blocks(self):
        return int(self.blocks.max()) if len(self) else 0

    def block_ids(self):
        return sorted(set(self.blocks.tolist()))

    def subset(self, index) -> "EpochSet":
        index = np.asarray(index, dtype=np.int64)
        return replace(self, data=self.data[index], labels=self.labels[index], blocks=self.blocks[index],
                       meta=dict(self.meta))

    def counts(self):
        """{(block, label): count}."""
        keys, n = np.unique(np.stack([self.blocks, self.labels], axis=1), axis=0, return_counts=True)
        return {(int(b), int(lab)): int(c) for (b, lab), c in zip(keys, n)}


# ---------------------------------------------------------------------- preprocessing


def normalize_array(data):
    """Center every channel of every epoch, then divide by its max |value|.

    Constant channels become all zeros. A channel counts as constant when what
    is left after centering is at rounding level relative to its magnitude
    (e.g. a flat 7281.85 trace leaves residues of ~1e-12 that would otherwise
    be blown up to +-1).
    """
    x = np.asarray(data, dtype=np.float64)
    scale = np.abs(x).max(axis=-1, keepdims=True) if x.shape[-1] else np.zeros(x.shape[:-1] + (1,))
    x = x - x.mean(axis=-1, keepdims=True)
    peak = np.abs(x).max(axis=-1, keepdims=True) if x.shape[-1] else scale
    flat = peak <= np.maximum(NORM_GUARD, 1e-12 * scale)
    return np.where(flat, 0.0, x / np.where(flat, 1.0, peak))


def normalize(epochs: EpochSet, force=False) -> EpochSet:
    if epochs.normalized and not force:
        raise ConfigError("epoch set is already normalized")
    out = normalize_array(epochs.data).astype(np.float32)
    return replace(epochs, data=out, normalized=True, meta=dict(epochs.meta))


def window_samples(duration_s, sample_rate_hz):
    """Samples in a post-stimulus window, e.g. 0.6 s at 300 Hz -> 180."""
    return int(round(duration_s * sample_rate_hz))


def extract_epochs(continuous, onsets, window, labels=None, blocks=None, sample_rate_hz=300.0) -> EpochSet:
    """Slice ``[onset, onset + window)`` from a (channels, samples) recording for every onset."""
    continuous = np.asarray(continuous)
    if continuous.ndim != 2:
        raise DimensionError(f"continuous data must be (channels, samples), got {continuous.shape}")
    onsets = np.asarray(onsets, dtype=np.int64).reshape(-1)
    total = continuous.shape[1]
    bad = [int(o) for o in onsets if o < 0 or o + window > total]
    if bad:
        raise ValueError(f"onsets {bad} do not leave {window} samples before the recording end ({total})")
    if onsets.size:
        idx = onsets[:, None] + np.arange(window)[None, :]
        data = continuous[:, idx].transpose(1, 0, 2)
    else:
        data = np.zeros((0, continuous.shape[0], window), dtype=continuous.dtype)
    n = onsets.size
    labels = np.zeros(n, dtype=np.int64) if labels is None else labels
    blocks = np.ones(n, dtype=np.int64) if blocks is None else blocks
    return EpochSet(data, labels, blocks, sample_rate_hz=sample_rate_hz)


# -------------------------------------------------------------------------- splitting


@dataclass(frozen=True)
class SplitSpec:
    test_blocks: tuple = (4, 5)
    validation_fraction: float = 0.1
    seed: int = 0

    def validate(self):
        if not 0 < self.validation_fraction < 1:
            raise ConfigError(f"validation_fraction must lie in (0, 1), got {self.validation_fraction}")
        return self


def validation_count(cell_size, fraction):
    """Round-half-to-even of ``fraction * cell_size``, with the fraction read as a decimal."""
    return round(Fraction(str(fraction)) * cell_size)


def split(epochs: EpochSet, spec: SplitSpec):
    """Return ``(train, validation, test)``.

    Test takes every epoch of ``spec.test_blocks``. Each remaining (block, label)
    cell contributes ``validation_count(len(cell))`` randomly chosen epochs to
    validation. Train/validation blocks are renumbered 1..B in original order;
    test keeps its original block IDs.
    """
    spec.validate()
    present = set(epochs.block_ids())
    test_blocks = set(int(b) for b in spec.test_blocks)
    missing = test_blocks - present
    if missing:
        raise ConfigError(f"test blocks {sorted(missing)} not present in data (blocks {sorted(present)})")
    train_blocks = sorted(present - test_blocks)
    if not train_blocks:
        raise ConfigError("no blocks left for training")

    is_test = np.isin(epochs.blocks, list(test_blocks))
    rng = np.random.default_rng(spec.seed)
    val_idx = []
    for b in train_blocks:
        for lab in sorted(set(epochs.labels[epochs.blocks == b].tolist())):
            cell = np.flatnonzero((epochs.blocks == b) & (epochs.labels == lab))
            take = validation_count(cell.size, spec.validation_fraction)
            if cell.size * spec.validation_fraction < 1:
                warnings.warn(f"cell (block={b}, label={lab}) has {cell.size} epochs; "
                              f"it contributes {take} to validation", stacklevel=2)
            if take:
                val_idx.append(rng.choice(cell, size=take, replace=False))
    val_idx = np.sort(np.concatenate(val_idx)) if val_idx else np.zeros(0, dtype=np.int64)
    is_val = np.zeros(len(epochs), dtype=bool)
    is_val[val_idx] = True
    train_idx = np.flatnonzero(~is_test & ~is_val)

    remap = np.zeros(max(present) + 1, dtype=np.int64)
    remap[train_blocks] = np.arange(1, len(train_blocks) + 1)
    train = epochs.subset(train_idx)
    val = epochs.subset(val_idx)
    train.blocks = remap[train.blocks]
    val.blocks = remap[val.blocks]
    test = epochs.subset(np.flatnonzero(is_test))
    for part, name in ((train, "train"), (val, "validation"), (test, "test")):
        part.meta["split"] = name
    return train, val, test


# ----------------------------------------------------------------------------- bundle


def save_bundle(epochs: EpochSet, path):
    """Write ``manifest.json``, ``data.f32``, ``labels.u8`` and ``blocks.u8`` into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if len(epochs) and (epochs.labels.max() > 255 or epochs.blocks.max() > 255 or epochs.labels.min() < 0):
        raise FormatError("labels and block IDs must fit in one unsigned byte")
    manifest = dict(
        format_version=BUNDLE_FORMAT_VERSION,
        channels=int(epochs.channels),
        samples=int(epochs.samples),
        sample_rate_hz=float(epochs.sample_rate_hz),
        n_epochs=len(epochs),
        label_names=list(epochs.label_names),
        normalized=bool(epochs.normalized),
    )
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    (path / "data.f32").write_bytes(np.ascontiguousarray(epochs.data, dtype="<f4").tobytes())
    (path / "labels.u8").write_bytes(epochs.labels.astype(np.uint8).tobytes())
    (path / "blocks.u8").write_bytes(epochs.blocks.astype(np.uint8).tobytes())


def load_bundle(path) -> EpochSet:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read bundle manifest in {path}: {exc}") from exc
    if manifest.get("format_version") != BUNDLE_FORMAT_VERSION:
        raise FormatError(f"unsupported bundle format version {manifest.get('format_version')!r}")
    try:
        n, c, t = manifest["n_epochs"], manifest["channels"], manifest["samples"]
        raw = (path / "data.f32").read_bytes()
        labels = (path / "labels.u8").read_bytes()
        blocks = (path / "blocks.u8").read_bytes()
    except (KeyError, OSError) as exc:
        raise FormatError(f"incomplete bundle in {path}: {exc}") from exc
    if len(raw) != 4 * n * c * t:
        raise FormatError(f"data.f32 holds {len(raw) // 4} values, manifest implies {n}*{c}*{t} = {n * c * t}")
    if len(labels) != n or len(blocks) != n:
        raise FormatError(f"labels.u8/blocks.u8 hold {len(labels)}/{len(blocks)} entries, manifest says {n}")
    data = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(n, c, t)
    return EpochSet(
        data,
        np.frombuffer(labels, dtype=np.uint8).astype(np.int64),
        np.frombuffer(blocks, dtype=np.uint8).astype(np.int64),
        sample_rate_hz=manifest["sample_rate_hz"],
        normalized=manifest["normalized"],
        label_names=tuple(manifest["label_names"]),
    )
