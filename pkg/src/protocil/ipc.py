"""Incremental prototype classifier: distance softmax, hybrid loss, training.

One prototype vector per class; a sample is scored by its squared Euclidean
distance to each prototype and classified to the nearest one. Training
minimizes cross entropy over a distance-based softmax plus a weighted
prototype-pull term, with all pre-existing prototypes held fixed so that
earlier decision boundaries survive later phases.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericError

CHECKPOINT_MAGIC = b"IPC1"
_CKPT_HEADER = struct.Struct("<4sIIIdd")


@dataclass(frozen=True)
class TrainConfig:
    """Minibatch SGD settings shared by the prototype and baseline heads."""

    epochs: int = 160
    batch_size: int = 128
    learning_rate: float = 0.1
    momentum: float = 0.9
    lr_schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(
                f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}"
            )
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")

    def lr_at(self, epoch):
        """Learning rate for one epoch; cosine decays from the initial rate
        toward 0 over the epoch budget."""
        if self.lr_schedule == "constant":
            return self.learning_rate
        return 0.5 * self.learning_rate * (1.0 + np.cos(np.pi * epoch / self.epochs))


@dataclass(frozen=True)
class LossBreakdown:
    """Cross-entropy and prototype-pull components of one batch loss."""

    ce: float
    pl: float
    total: float


def distance_softmax(sq_dists, gamma):
    """Class posterior from squared distances: softmax of -gamma * d.

    Numerically stabilized by shifting each row of logits so its largest
    entry (at the smallest distance) is zero.
    """
    d = np.asarray(sq_dists, dtype=np.float64)
    logits = -gamma * (d - d.min(axis=-1, keepdims=True))
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


class PrototypeClassifier:
    """Per-class prototype vectors with a frozen/trainable split.

    Rows with index below ``frozen_count`` are immutable: they take part in
    every forward computation but receive exactly zero gradient. ``gamma``
    sharpens the distance softmax; ``pl_weight`` scales the prototype-pull
    term of the hybrid loss.
    """

    def __init__(self, prototypes, frozen_count=0, gamma=1.0, pl_weight=0.3):
        protos = np.array(prototypes, dtype=np.float64)
        if protos.ndim != 2:
            raise ConfigError(f"prototypes must be 2-D, got shape {protos.shape}")
        if protos.size and not np.isfinite(protos).all():
            raise ConfigError("prototypes contain non-finite entries")
        if not 0 <= frozen_count <= protos.shape[0]:
            raise ConfigError(
                f"frozen_count {frozen_count} outside [0, {protos.shape[0]}]"
            )
        if not gamma > 0:
            raise ConfigError(f"gamma must be > 0, got {gamma}")
        if not pl_weight >= 0:
            raise ConfigError(f"lambda (pl_weight) must be >= 0, got {pl_weight}")
        protos.setflags(write=False)
        self.prototypes = protos
        self.frozen_count = int(frozen_count)
        self.gamma = float(gamma)
        self.pl_weight = float(pl_weight)

    @classmethod
    def empty(cls, dim, gamma=1.0, pl_weight=0.3):
        """Classifier with no classes yet; grown by train_phase."""
        return cls(np.zeros((0, dim)), 0, gamma, pl_weight)

    @property
    def class_count(self):
        return self.prototypes.shape[0]

    @property
    def dim(self):
        return self.prototypes.shape[1]

    def _check_features(self, z, batch=False):
        z = np.asarray(z, dtype=np.float64)
        want = 2 if batch else 1
        if z.ndim != want or z.shape[-1] != self.dim:
            raise ConfigError(
                f"feature shape {z.shape} does not match classifier dim {self.dim}"
            )
        return z

    def distances(self, z):
        """Squared Euclidean distance from z to every prototype."""
        z = self._check_features(z)
        diff = self.prototypes - z
        return (diff * diff).sum(axis=1)

    def distances_batch(self, z):
        """Row-wise squared distances, shape (n, C).

        Uses the same per-coordinate difference formula as ``distances`` so
        batch and single-sample paths agree bitwise.
        """
        z = self._check_features(z, batch=True)
        out = np.empty((z.shape[0], self.class_count))
        step = 512  # bound the (block, C, dim) broadcast temporary
        for lo in range(0, z.shape[0], step):
            block = z[lo : lo + step]
            diff = block[:, None, :] - self.prototypes[None, :, :]
            out[lo : lo + step] = (diff * diff).sum(axis=2)
        return out

    def posterior(self, z):
        """Distance-softmax class probabilities for one feature vector."""
        if self.class_count < 1:
            raise ConfigError("classifier has no classes")
        return distance_softmax(self.distances(z), self.gamma)

    def predict(self, z):
        """Id of the nearest prototype; ties go to the lowest class id."""
        if self.class_count < 1:
            raise ConfigError("classifier has no classes")
        return int(np.argmin(self.distances(z)))

    def predict_batch(self, z):
        if self.class_count < 1:
            raise ConfigError("classifier has no classes")
        return np.argmin(self.distances_batch(z), axis=1)

    def linear_discriminant(self, z, class_id):
        """Discriminant 2*p.z - p.p - z.z for one class; equals minus the
        squared distance, so the induced decision boundaries are linear."""
        z = self._check_features(z)
        if not 0 <= class_id < self.class_count:
            raise ConfigError(
                f"class id {class_id} outside [0, {self.class_count})"
            )
        p = self.prototypes[class_id]
        return 2.0 * float(p @ z) - float(p @ p) - float(z @ z)

    def discriminants(self, z):
        """All class discriminants at once (dot-product form)."""
        z = self._check_features(z)
        p = self.prototypes
        return 2.0 * (p @ z) - (p * p).sum(axis=1) - float(z @ z)

    def _check_batch(self, feats, labels):
        feats = self._check_features(feats, batch=True)
        labels = np.asarray(labels, dtype=np.int64)
        if feats.shape[0] == 0:
            raise ConfigError("batch is empty")
        if labels.shape != (feats.shape[0],):
            raise ConfigError(
                f"labels shape {labels.shape} does not match batch of {feats.shape[0]}"
            )
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise ConfigError(
                f"label {int(labels.min() if labels.min() < 0 else labels.max())} "
                f"outside [0, {self.class_count})"
            )
        return feats, labels

    def hybrid_loss(self, feats, labels):
        """Batch-mean cross entropy plus weighted prototype pull.

        Returns a LossBreakdown with total = ce + pl_weight * pl.
        """
        feats, labels = self._check_batch(feats, labels)
        d = self.distances_batch(feats)
        shifted = d - d.min(axis=1, keepdims=True)
        logits = -self.gamma * shifted
        # -log softmax(logits)[y], evaluated without forming tiny exponentials
        log_norm = np.log(np.exp(logits).sum(axis=1))
        rows = np.arange(feats.shape[0])
        ce = float((log_norm - logits[rows, labels]).mean())
        pl = float(d[rows, labels].mean())
        return LossBreakdown(ce=ce, pl=pl, total=ce + self.pl_weight * pl)

    def loss_gradient(self, feats, labels, pl_only=False):
        """Analytic gradient of the batch-mean hybrid loss w.r.t. prototypes.

        Per sample the row for class i receives
        2*gamma*(1[i==y] - p_i)*(proto_i - z) from the cross entropy and
        2*pl_weight*(proto_i - z) when i == y from the prototype pull.
        Rows below frozen_count are exactly zero.
        """
        feats, labels = self._check_batch(feats, labels)
        return _hybrid_gradient(
            self.prototypes,
            self.frozen_count,
            self.gamma,
            self.pl_weight,
            feats,
            labels,
            pl_only=pl_only,
        )

def _hybrid_gradient(protos, frozen_count, gamma, pl_weight, feats, labels, pl_only=False):
    n, _ = feats.shape
    c = protos.shape[0]
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    grad = np.zeros_like(protos)
    if not pl_only:
        diff = feats[:, None, :] - protos[None, :, :]
        d = (diff * diff).sum(axis=2)
        p = distance_softmax(d, gamma)
        delta = onehot - p  # (n, C)
        col = delta.sum(axis=0)  # per-class sum of (1[y] - p)
        grad += (2.0 * gamma / n) * (col[:, None] * protos - delta.T @ feats)
    counts = onehot.sum(axis=0)
    grad += (2.0 * pl_weight / n) * (counts[:, None] * protos - onehot.T @ feats)
    if frozen_count:
        grad[:frozen_count] = 0.0
    return grad


def train_phase(clf, feats, labels, new_classes, cfg, pl_only=False):
    """Grow the classifier by ``new_classes`` and train the new prototypes.

    Every prototype that existed on entry is treated as old: it contributes
    to the forward loss but is excluded from updates, so its row is
    bit-identical in the returned classifier. New prototypes start at the
    class mean of their samples and are optimized by minibatch SGD with
    momentum; batch order is a pure function of (cfg.seed, epoch).

    ``feats``/``labels`` hold the phase samples of the new classes plus any
    replayed exemplars of old classes. ``pl_only`` trains with the prototype
    pull alone (cross entropy still reported, not differentiated).
    """
    old_c = clf.class_count
    new_classes = sorted(int(i) for i in new_classes)
    if not new_classes:
        raise ConfigError("new_classes is empty")
    if any(i < old_c for i in new_classes):
        raise ConfigError(
            f"new_classes {new_classes} overlap classes already present "
            f"(classifier holds ids [0, {old_c}))"
        )
    if new_classes != list(range(old_c, old_c + len(new_classes))):
        raise ConfigError(
            f"new class ids must extend the classifier contiguously: expected "
            f"{list(range(old_c, old_c + len(new_classes)))}, got {new_classes}"
        )
    feats = np.asarray(feats, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ConfigError("phase data is empty")
    if feats.shape[1] != clf.dim:
        raise ConfigError(
            f"phase features have dim {feats.shape[1]}, classifier dim {clf.dim}"
        )
    total_c = old_c + len(new_classes)
    if labels.min() < 0 or labels.max() >= total_c:
        raise ConfigError(
            f"phase labels outside [0, {total_c}): " f"found {int(labels.max())}"
        )
    new_rows = np.empty((len(new_classes), feats.shape[1]))
    for j, cid in enumerate(new_classes):
        members = feats[labels == cid]
        if members.shape[0] == 0:
            raise ConfigError(f"new class {cid} has no samples in the phase data")
        new_rows[j] = members.mean(axis=0)

    protos = np.vstack([clf.prototypes, new_rows]) if old_c else new_rows.copy()
    velocity = np.zeros_like(new_rows)
    n = feats.shape[0]
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            grad = _hybrid_gradient(
                protos, old_c, clf.gamma, clf.pl_weight,
                feats[idx], labels[idx], pl_only=pl_only,
            )
            velocity = cfg.momentum * velocity + grad[old_c:]
            protos[old_c:] -= lr * velocity
    if not np.isfinite(protos).all():
        raise NumericError(
            "prototype training diverged to non-finite values "
            f"(lr={cfg.learning_rate}, lambda={clf.pl_weight})"
        )
    return PrototypeClassifier(protos, total_c, clf.gamma, clf.pl_weight)


# ---------------------------------------------------------------------------
# checkpoint format: magic IPC1, u32 C, u32 d, u32 frozen, f64 gamma,
# f64 lambda, then C*d f64 prototypes row-major (little-endian)
# ---------------------------------------------------------------------------


def save_classifier(clf, path):
    with open(path, "wb") as fh:
        fh.write(
            _CKPT_HEADER.pack(
                CHECKPOINT_MAGIC,
                clf.class_count,
                clf.dim,
                clf.frozen_count,
                clf.gamma,
                clf.pl_weight,
            )
        )
        fh.write(clf.prototypes.astype("<f8").tobytes(order="C"))


def load_classifier(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _CKPT_HEADER.size:
        raise DataError(
            f"malformed checkpoint header: need {_CKPT_HEADER.size} bytes, "
            f"got {len(blob)}"
        )
    magic, c, d, frozen, gamma, pl_weight = _CKPT_HEADER.unpack_from(blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise DataError(f"malformed checkpoint: bad magic {magic!r}")
    expected = _CKPT_HEADER.size + c * d * 8
    if len(blob) != expected:
        raise DataError(
            f"truncated checkpoint: expected {expected} bytes, got {len(blob)}"
        )
    protos = np.frombuffer(blob, dtype="<f8", count=c * d, offset=_CKPT_HEADER.size)
    return PrototypeClassifier(protos.reshape(c, d), frozen, gamma, pl_weight)
