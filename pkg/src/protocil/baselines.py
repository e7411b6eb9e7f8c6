"""Comparison classifiers: standard linear, cosine-normalized linear, NME.

These heads deliberately lack the frozen-prototype protection of the
incremental prototype classifier: a linear head trained on a new phase
without replay is free to distort the rows of earlier classes, which is the
failure mode the comparison is meant to expose.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError


@dataclass(frozen=True)
class LinearHead:
    """Linear classifier rows; cosine scoring when ``normalized`` is set.

    In normalized mode the score of class i is the cosine of (weights[i], z)
    and the biases are unused.
    """

    weights: np.ndarray
    biases: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        b = np.array(self.biases, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ConfigError(
                f"weights {w.shape} and biases {b.shape} are inconsistent"
            )
        if w.size and not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ConfigError("head parameters contain non-finite entries")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)

    @property
    def class_count(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.weights.shape[1]

    @classmethod
    def empty(cls, dim, normalized=False):
        return cls(np.zeros((0, dim)), np.zeros(0), normalized)

    def grown(self, new_count, seed=0):
        """Head with ``new_count`` extra rows: zeros for the plain linear
        head, seeded random unit vectors for the cosine head."""
        if new_count < 1:
            raise ConfigError(f"new_count must be >= 1, got {new_count}")
        if self.normalized:
            rng = np.random.default_rng([seed, self.class_count])
            rows = rng.standard_normal((new_count, self.dim))
            rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        else:
            rows = np.zeros((new_count, self.dim))
        return LinearHead(
            np.vstack([self.weights, rows]),
            np.concatenate([self.biases, np.zeros(new_count)]),
            self.normalized,
        )


def _scores(weights, biases, normalized, feats):
    if normalized:
        fn = np.linalg.norm(feats, axis=1, keepdims=True)
        zero = np.flatnonzero(fn[:, 0] == 0)
        if zero.size:
            raise ConfigError(f"sample {int(zero[0])} has zero norm")
        wn = np.linalg.norm(weights, axis=1, keepdims=True)
        if (wn == 0).any():
            raise NumericError("cosine head has a zero-norm weight row")
        return (feats / fn) @ (weights / wn).T
    return feats @ weights.T + biases


def scores_batch(head, feats):
    """Raw class scores, shape (n, C): W z + b, or cosine when normalized."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != head.dim:
        raise ConfigError(
            f"feature shape {feats.shape} does not match head dim {head.dim}"
        )
    return _scores(head.weights, head.biases, head.normalized, feats)


def predict_linear(head, z):
    """Highest-scoring class id; ties go to the lowest id."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] != head.dim:
        raise ConfigError(f"feature shape {z.shape} does not match dim {head.dim}")
    return int(np.argmax(scores_batch(head, z[None, :])[0]))


def predict_linear_batch(head, feats):
    return np.argmax(scores_batch(head, feats), axis=1)


def train_linear(head, feats, labels, cfg):
    """Minibatch-SGD cross-entropy training of a (cosine-)linear head.

    All rows are trainable, old classes included; the cosine head is
    renormalized to unit rows at the end of every epoch. Returns a new head.
    """
    feats = np.asarray(feats, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ConfigError("training data is empty")
    if feats.shape[1] != head.dim:
        raise ConfigError(
            f"training features have dim {feats.shape[1]}, head dim {head.dim}"
        )
    if head.class_count == 0:
        raise ConfigError("head has no classes; grow it before training")
    if labels.min() < 0 or labels.max() >= head.class_count:
        raise ConfigError(
            f"label {int(labels.max())} outside [0, {head.class_count})"
        )
    w = head.weights.copy()
    b = head.biases.copy()
    vw = np.zeros_like(w)
    vb = np.zeros_like(b)
    n = feats.shape[0]
    c = head.class_count
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            z = feats[idx]
            y = labels[idx]
            m = z.shape[0]
            s = _scores(w, b, head.normalized, z)
            s = s - s.max(axis=1, keepdims=True)
            e = np.exp(s)
            p = e / e.sum(axis=1, keepdims=True)
            onehot = np.zeros((m, c))
            onehot[np.arange(m), y] = 1.0
            err = (p - onehot) / m  # (m, C)
            if head.normalized:
                zn = z / np.linalg.norm(z, axis=1, keepdims=True)
                wn_norm = np.linalg.norm(w, axis=1, keepdims=True)
                wn = w / wn_norm
                cos = zn @ wn.T
                # d cos(w, z)/d w = (z_hat - cos * w_hat) / |w|
                gw = (err.T @ zn - ((err * cos).sum(axis=0))[:, None] * wn) / wn_norm
                gb = np.zeros_like(b)
            else:
                gw = err.T @ z
                gb = err.sum(axis=0)
            vw = cfg.momentum * vw + gw
            vb = cfg.momentum * vb + gb
            w -= lr * vw
            b -= lr * vb
        if head.normalized:
            norms = np.linalg.norm(w, axis=1, keepdims=True)
            if (norms == 0).any():
                raise NumericError("cosine head weight row collapsed to zero")
            w /= norms
    if not (np.isfinite(w).all() and np.isfinite(b).all()):
        raise NumericError("linear-head training diverged to non-finite values")
    return LinearHead(w, b, head.normalized)


@dataclass(frozen=True)
class NmeHead:
    """Nearest-mean classifier: fixed per-class centroids."""

    class_means: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        means = np.array(self.class_means, dtype=np.float64)
        counts = np.array(self.counts, dtype=np.int64)
        if means.ndim != 2 or counts.shape != (means.shape[0],):
            raise ConfigError(
                f"means {means.shape} and counts {counts.shape} are inconsistent"
            )
        if means.size and not np.isfinite(means).all():
            raise ConfigError("class means contain non-finite entries")
        if (counts < 1).any():
            bad = int(np.argwhere(counts < 1)[0][0])
            raise ConfigError(f"class {bad} has count {int(counts[bad])} < 1")
        means.setflags(write=False)
        counts.setflags(write=False)
        object.__setattr__(self, "class_means", means)
        object.__setattr__(self, "counts", counts)

    @property
    def class_count(self):
        return self.class_means.shape[0]


def fit_nme(feats, labels, class_count):
    """Arithmetic class means over whatever samples are available.

    Every class in [0, class_count) must contribute at least one sample;
    with an exemplar memory the caller passes exactly the stored exemplars
    for old classes.
    """
    feats = np.asarray(feats, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ConfigError("no samples to fit")
    counts = np.bincount(labels, minlength=class_count)
    if (counts == 0).any():
        missing = int(np.argwhere(counts == 0)[0][0])
        raise ConfigError(f"class {missing} has zero available samples")
    means = np.zeros((class_count, feats.shape[1]))
    for c in range(class_count):
        means[c] = feats[labels == c].mean(axis=0)
    return NmeHead(means, counts[:class_count])


def predict_nme(head, z):
    """Nearest class mean in Euclidean distance; ties to the lowest id."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] != head.class_means.shape[1]:
        raise ConfigError(f"feature shape {z.shape} does not match head")
    diff = head.class_means - z
    return int(np.argmin((diff * diff).sum(axis=1)))


def predict_nme_batch(head, feats):
    feats = np.asarray(feats, dtype=np.float64)
    out = np.empty(feats.shape[0], dtype=np.int64)
    step = 512
    for lo in range(0, feats.shape[0], step):
        block = feats[lo : lo + step]
        diff = block[:, None, :] - head.class_means[None, :, :]
        out[lo : lo + step] = np.argmin((diff * diff).sum(axis=2), axis=1)
    return out
