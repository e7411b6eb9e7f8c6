"""Labeled embedding sets: file formats, synthetic data, and CIL task splits.

Features are stored as 32-bit floats on disk and promoted to 64-bit for all
in-memory computation. A FeatureSet quantizes its features through float32 at
construction time so that save -> load round-trips bit-exactly.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

FEATSET_MAGIC = b"FSET"
FEATSET_VERSION = 1
# magic, version byte, n_samples, dim, class_count (little-endian)
_HEADER = struct.Struct("<4sBIII")


def _readonly(arr):
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FeatureSet:
    """Immutable embedding matrix with 0-based contiguous integer labels.

    Parameters
    ----------
    features : array-like, shape (n_samples, dim)
        Embedding coordinates. Quantized through float32 (the on-disk
        precision), then held as float64.
    labels : array-like of int, shape (n_samples,)
        Class id per sample; every id in [0, class_count) must occur.
    class_count : int
        Number of distinct classes.
    metadata : dict
        Free-form provenance, e.g. ``label_mapping`` (original id -> 0-based
        id) or the generating means of a synthetic set.
    """

    features: np.ndarray
    labels: np.ndarray
    class_count: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float32).astype(np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2:
            raise ConfigError(f"features must be 2-D, got shape {feats.shape}")
        n, dim = feats.shape
        if n < 1 or dim < 1:
            raise ConfigError(f"need n_samples >= 1 and dim >= 1, got {feats.shape}")
        if labels.shape != (n,):
            raise ConfigError(
                f"labels shape {labels.shape} does not match {n} samples"
            )
        if not np.isfinite(feats).all():
            bad = int(np.argwhere(~np.isfinite(feats))[0][0])
            raise DataError(f"non-finite feature value at sample {bad}")
        if self.class_count < 1:
            raise ConfigError(f"class_count must be >= 1, got {self.class_count}")
        if labels.min() < 0 or labels.max() >= self.class_count:
            bad = int(np.argwhere((labels < 0) | (labels >= self.class_count))[0][0])
            raise DataError(
                f"label {int(labels[bad])} of sample {bad} outside "
                f"[0, {self.class_count})"
            )
        counts = np.bincount(labels, minlength=self.class_count)
        if (counts == 0).any():
            missing = int(np.argwhere(counts == 0)[0][0])
            raise DataError(f"class {missing} has no samples")
        object.__setattr__(self, "features", _readonly(feats))
        object.__setattr__(self, "labels", _readonly(labels))

    @property
    def n_samples(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def class_indices(self, class_id):
        """Sample indices of one class, ascending."""
        if not 0 <= class_id < self.class_count:
            raise ConfigError(f"class id {class_id} outside [0, {self.class_count})")
        return np.flatnonzero(self.labels == class_id)


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic clustered embedding set.

    Class means are drawn once from the sphere of radius ``mean_scale``;
    samples are isotropic Gaussians of width ``within_std`` around them.
    Everything is a pure function of ``seed``.
    """

    class_count: int
    dim: int
    samples_per_class: int
    mean_scale: float = 10.0
    within_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 2:
            raise ConfigError(f"class_count must be >= 2, got {self.class_count}")
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        if self.samples_per_class < 2:
            raise ConfigError(
                f"samples_per_class must be >= 2, got {self.samples_per_class}"
            )
        if not self.mean_scale > 0:
            raise ConfigError(f"mean_scale must be > 0, got {self.mean_scale}")
        if not self.within_std > 0:
            raise ConfigError(f"within_std must be > 0, got {self.within_std}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")


def generate_synthetic(spec):
    """Deterministically generate a clustered FeatureSet from a SynthSpec.

    The generating means are kept in ``metadata['generating_means']`` so
    tests can compare empirical statistics against them.
    """
    rng = np.random.default_rng(spec.seed)
    raw = rng.standard_normal((spec.class_count, spec.dim))
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    # standard normal rows are nonzero with probability 1; guard regardless
    norms[norms == 0] = 1.0
    means = raw / norms * spec.mean_scale
    n = spec.class_count * spec.samples_per_class
    labels = np.repeat(np.arange(spec.class_count), spec.samples_per_class)
    feats = means[labels] + spec.within_std * rng.standard_normal((n, spec.dim))
    meta = {
        "generating_means": _readonly(means.copy()),
        "synth_spec": {
            "class_count": spec.class_count,
            "dim": spec.dim,
            "samples_per_class": spec.samples_per_class,
            "mean_scale": spec.mean_scale,
            "within_std": spec.within_std,
            "seed": spec.seed,
        },
    }
    return FeatureSet(feats, labels, spec.class_count, metadata=meta)


# ---------------------------------------------------------------------------
# FEATSET binary + labeled-CSV ingestion
# ---------------------------------------------------------------------------


def save_featureset(fs, path):
    """Write a FeatureSet to ``path`` in the FEATSET binary format."""
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                FEATSET_MAGIC, FEATSET_VERSION, fs.n_samples, fs.dim, fs.class_count
            )
        )
        record = np.zeros(
            fs.n_samples,
            dtype=[("label", "<u4"), ("feat", "<f4", (fs.dim,))],
        )
        record["label"] = fs.labels
        record["feat"] = fs.features.astype("<f4")
        fh.write(record.tobytes())


def load_featureset(path):
    """Load a FEATSET binary or labeled-CSV file.

    Labels are re-indexed to 0-based contiguous ids; the original-id mapping
    is kept in ``metadata['label_mapping']``.
    """
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == FEATSET_MAGIC:
        return _load_binary(path)
    return _load_csv(path)


def _load_binary(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise DataError(
            f"malformed header: need {_HEADER.size} bytes, file has {len(blob)}"
        )
    magic, version, n, dim, class_count = _HEADER.unpack_from(blob, 0)
    if magic != FEATSET_MAGIC:
        raise DataError(f"malformed header: bad magic {magic!r} at byte 0")
    if version != FEATSET_VERSION:
        raise DataError(f"malformed header: unsupported version {version} at byte 4")
    if n < 1 or dim < 1 or class_count < 1:
        raise DataError(
            f"malformed header: n_samples={n}, dim={dim}, class_count={class_count}"
        )
    expected = _HEADER.size + n * (4 + 4 * dim)
    if len(blob) != expected:
        raise DataError(
            f"truncated or oversized file: expected {expected} bytes, got {len(blob)}"
        )
    records = np.frombuffer(
        blob,
        dtype=[("label", "<u4"), ("feat", "<f4", (dim,))],
        count=n,
        offset=_HEADER.size,
    )
    labels = records["label"].astype(np.int64)
    feats = records["feat"].astype(np.float64)
    bad = np.flatnonzero(labels >= class_count)
    if bad.size:
        row = int(bad[0])
        offset = _HEADER.size + row * (4 + 4 * dim)
        raise DataError(
            f"label {int(labels[row])} of record {row} (byte {offset}) outside "
            f"[0, {class_count})"
        )
    nonfinite = ~np.isfinite(feats)
    if nonfinite.any():
        row = int(np.argwhere(nonfinite)[0][0])
        raise DataError(f"non-finite feature value in record {row}")
    counts = np.bincount(labels, minlength=class_count)
    if (counts == 0).any():
        missing = int(np.argwhere(counts == 0)[0][0])
        raise DataError(f"empty class: class {missing} has no records")
    meta = {"label_mapping": {int(c): int(c) for c in range(class_count)}}
    return FeatureSet(feats, labels, class_count, metadata=meta)


def _load_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise DataError("malformed header: file is empty")
    header = [c.strip() for c in lines[0].split(",")]
    dim = len(header) - 1
    if dim < 1 or header[0] != "label" or header[1:] != [f"f{i}" for i in range(dim)]:
        raise DataError(
            "malformed header: row 0 must be 'label,f0,...,f{dim-1}', "
            f"got {lines[0]!r}"
        )
    if len(lines) < 2:
        raise DataError("no data rows after header")
    raw_labels = []
    feats = np.empty((len(lines) - 1, dim))
    for row, line in enumerate(lines[1:], start=1):
        cells = line.split(",")
        if len(cells) != dim + 1:
            raise DataError(
                f"dimension mismatch at row {row}: expected {dim + 1} columns, "
                f"got {len(cells)}"
            )
        try:
            raw_labels.append(int(cells[0]))
        except ValueError:
            raise DataError(f"bad label {cells[0]!r} at row {row}") from None
        try:
            vals = [float(c) for c in cells[1:]]
        except ValueError:
            raise DataError(f"bad feature value at row {row}") from None
        if not all(math.isfinite(v) for v in vals):
            raise DataError(f"non-finite feature value at row {row}")
        feats[row - 1] = vals
    originals = sorted(set(raw_labels))
    mapping = {orig: new for new, orig in enumerate(originals)}
    labels = np.array([mapping[lab] for lab in raw_labels], dtype=np.int64)
    meta = {"label_mapping": {int(k): int(v) for k, v in mapping.items()}}
    return FeatureSet(feats, labels, len(originals), metadata=meta)


# ---------------------------------------------------------------------------
# CIL task streams
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Phase:
    """One CIL phase: a class subset and all sample indices of those classes."""

    classes: tuple
    indices: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(int(c) for c in self.classes))
        object.__setattr__(
            self, "indices", _readonly(np.asarray(self.indices, dtype=np.int64))
        )


@dataclass(frozen=True)
class TaskStream:
    """Ordered CIL phases over a FeatureSet with disjoint class subsets.

    ``memory_per_class`` is the exemplar budget R made available to replay;
    ``base_fraction`` records how the base phase was sized. Immutable and
    safe to share across readers.
    """

    phases: tuple
    memory_per_class: int
    base_fraction: float
    class_count: int
    n_samples: int
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(self.phases))
        if self.memory_per_class < 0:
            raise ConfigError(
                f"memory_per_class must be >= 0, got {self.memory_per_class}"
            )
        if not 0 < self.base_fraction <= 1:
            raise ConfigError(
                f"base_fraction must be in (0, 1], got {self.base_fraction}"
            )
        seen_classes = set()
        for t, phase in enumerate(self.phases):
            overlap = seen_classes & set(phase.classes)
            if overlap:
                raise ConfigError(
                    f"phase {t} repeats classes {sorted(overlap)} from earlier phases"
                )
            seen_classes |= set(phase.classes)
        if seen_classes != set(range(self.class_count)):
            raise ConfigError(
                f"phase class sets do not cover [0, {self.class_count}) exactly"
            )
        all_idx = np.concatenate([p.indices for p in self.phases])
        if not np.array_equal(np.sort(all_idx), np.arange(self.n_samples)):
            raise ConfigError(
                "phase indices are not a partition of "
                f"[0, {self.n_samples}) sample indices"
            )

    @property
    def phase_count(self):
        return len(self.phases)


def split_tasks(fs, phase_count, base_fraction, memory_per_class=0, seed=None):
    """Split a FeatureSet into a base phase plus ``phase_count`` equal phases.

    Phase 0 receives ``base_fraction`` of the classes; the remaining classes
    are divided into ``phase_count`` equal blocks. Class order is ascending
    by id unless ``seed`` is given, in which case it is permuted.
    """
    k = fs.class_count
    base_exact = k * base_fraction
    base = int(round(base_exact))
    if abs(base_exact - base) > 1e-9 or base < 1:
        raise ConfigError(
            f"base_fraction {base_fraction} x {k} classes = {base_exact}, "
            "which is not an integer >= 1"
        )
    remaining = k - base
    if phase_count < 0:
        raise ConfigError(f"phase_count must be >= 0, got {phase_count}")
    if phase_count == 0:
        if remaining != 0:
            raise ConfigError(
                f"{remaining} classes remain after the base phase but phase_count=0"
            )
        per_phase = 0
    else:
        if remaining < phase_count or remaining % phase_count != 0:
            raise ConfigError(
                f"{remaining} classes remaining after base do not divide into "
                f"{phase_count} equal nonempty phases "
                f"({remaining} % {phase_count} = {remaining % phase_count})"
            )
        per_phase = remaining // phase_count
    if seed is None:
        order = np.arange(k)
    else:
        if seed < 0:
            raise ConfigError(f"seed must be >= 0, got {seed}")
        order = np.random.default_rng(seed).permutation(k)
    blocks = [order[:base]]
    for t in range(phase_count):
        blocks.append(order[base + t * per_phase : base + (t + 1) * per_phase])
    phases = []
    for block in blocks:
        classes = tuple(sorted(int(c) for c in block))
        mask = np.isin(fs.labels, block)
        phases.append(Phase(classes=classes, indices=np.flatnonzero(mask)))
    return TaskStream(
        phases=tuple(phases),
        memory_per_class=memory_per_class,
        base_fraction=float(base_fraction),
        class_count=k,
        n_samples=fs.n_samples,
        seed=seed,
    )


def save_stream(stream, path):
    """Write a TaskStream as JSON."""
    doc = {
        "memory_per_class": stream.memory_per_class,
        "base_fraction": stream.base_fraction,
        "class_count": stream.class_count,
        "n_samples": stream.n_samples,
        "seed": stream.seed,
        "phases": [
            {"classes": list(p.classes), "indices": [int(i) for i in p.indices]}
            for p in stream.phases
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_stream(path):
    """Read a TaskStream written by save_stream."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"stream file {path} is not valid JSON: {exc}") from None
    try:
        phases = tuple(
            Phase(classes=tuple(p["classes"]), indices=np.array(p["indices"]))
            for p in doc["phases"]
        )
        return TaskStream(
            phases=phases,
            memory_per_class=int(doc["memory_per_class"]),
            base_fraction=float(doc["base_fraction"]),
            class_count=int(doc["class_count"]),
            n_samples=int(doc["n_samples"]),
            seed=doc.get("seed"),
        )
    except (KeyError, TypeError) as exc:
        raise DataError(f"stream file {path} is missing field: {exc}") from None
