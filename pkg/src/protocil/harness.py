"""CIL protocol runner: replay memory, phase training, accuracy reporting.

Drives any of the supported classifier heads through a TaskStream phase by
phase, evaluating after each phase on the held-out samples of every class
seen so far, and reports per-phase plus average incremental accuracy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .baselines import (
    LinearHead,
    NmeHead,
    fit_nme,
    predict_linear_batch,
    predict_nme_batch,
    train_linear,
)
from .errors import ConfigError
from .featureset import FeatureSet, TaskStream
from .ipc import PrototypeClassifier, TrainConfig, train_phase

METHODS = ("ipc", "linear", "cosine", "nme")


def herding_select(feats, budget):
    """Greedy mean-matching exemplar selection over one class's samples.

    At each step picks the sample whose inclusion brings the running
    exemplar mean closest (Euclidean) to the class mean; ties go to the
    lowest index. Returns min(budget, n) indices in selection order.
    """
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ConfigError("herding needs at least one sample")
    if budget < 1:
        raise ConfigError(f"budget must be >= 1, got {budget}")
    n = feats.shape[0]
    target = feats.mean(axis=0)
    chosen = []
    taken = np.zeros(n, dtype=bool)
    running = np.zeros(feats.shape[1])
    for step in range(min(budget, n)):
        cand = (running + feats) / (step + 1)  # mean if each sample were added
        cost = ((cand - target) ** 2).sum(axis=1)
        cost[taken] = np.inf
        pick = int(np.argmin(cost))
        chosen.append(pick)
        taken[pick] = True
        running += feats[pick]
    return np.array(chosen, dtype=np.int64)


class ExemplarMemory:
    """Per-class exemplar indices, at most R each, in herding order."""

    def __init__(self, budget):
        if budget < 0:
            raise ConfigError(f"memory budget must be >= 0, got {budget}")
        self.budget = budget
        self._store = {}

    def remember(self, class_id, fs_indices, feats):
        if self.budget == 0:
            return
        order = herding_select(feats, self.budget)
        self._store[int(class_id)] = np.asarray(fs_indices)[order]

    def indices_for(self, class_id):
        return self._store.get(int(class_id), np.empty(0, dtype=np.int64))

    @property
    def classes(self):
        return sorted(self._store)

    def all_indices(self):
        if not self._store:
            return np.empty(0, dtype=np.int64)
        return np.concatenate([self._store[c] for c in self.classes])


# ---------------------------------------------------------------------------
# classifier adapters: uniform grow-and-train interface over row ids
# (row id = arrival order of the class in the stream)
# ---------------------------------------------------------------------------


class IpcAdapter:
    method_name = "ipc"

    def __init__(self, dim, gamma, pl_weight):
        self.clf = PrototypeClassifier.empty(dim, gamma, pl_weight)

    def train_on_phase(self, feats, row_labels, new_row_count, cfg):
        new_ids = range(self.clf.class_count, self.clf.class_count + new_row_count)
        self.clf = train_phase(self.clf, feats, row_labels, new_ids, cfg)

    def predict_rows(self, feats):
        return self.clf.predict_batch(feats)


class LinearAdapter:
    def __init__(self, dim, normalized):
        self.head = LinearHead.empty(dim, normalized=normalized)
        self.method_name = "cosine" if normalized else "linear"

    def train_on_phase(self, feats, row_labels, new_row_count, cfg):
        self.head = train_linear(
            self.head.grown(new_row_count, seed=cfg.seed), feats, row_labels, cfg
        )

    def predict_rows(self, feats):
        return predict_linear_batch(self.head, feats)


class NmeAdapter:
    """Class means: new classes from phase data, old classes from replayed
    exemplars when present, otherwise retained from the phase that
    introduced them (features are frozen, so the means stay valid)."""

    method_name = "nme"

    def __init__(self, dim):
        self.dim = dim
        self.head = None

    def train_on_phase(self, feats, row_labels, new_row_count, cfg):
        old_c = 0 if self.head is None else self.head.class_count
        total = old_c + new_row_count
        means = np.zeros((total, self.dim))
        counts = np.zeros(total, dtype=np.int64)
        if self.head is not None:
            means[:old_c] = self.head.class_means
            counts[:old_c] = self.head.counts
        for row in range(total):
            members = feats[row_labels == row]
            if members.shape[0]:
                means[row] = members.mean(axis=0)
                counts[row] = members.shape[0]
            elif row >= old_c:
                raise ConfigError(f"class {row} has zero available samples")
        self.head = NmeHead(means, counts)

    def predict_rows(self, feats):
        return predict_nme_batch(self.head, feats)


def _make_adapter(method, dim, gamma, pl_weight):
    if method == "ipc":
        return IpcAdapter(dim, gamma, pl_weight)
    if method == "linear":
        return LinearAdapter(dim, normalized=False)
    if method == "cosine":
        return LinearAdapter(dim, normalized=True)
    if method == "nme":
        return NmeAdapter(dim)
    raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhaseResult:
    t: int
    classes: tuple
    accuracy: float
    old_accuracy: float | None
    new_accuracy: float


@dataclass(frozen=True)
class RunReport:
    """Per-phase and average incremental accuracy of one CIL run."""

    method: str
    phases: tuple
    average_accuracy: float
    config_echo: dict = field(default_factory=dict)
    seed: int = 0
    version: str = __version__

    def to_json_bytes(self):
        """Canonical JSON; identical configs yield byte-identical reports."""
        doc = {
            "method": self.method,
            "config_echo": self.config_echo,
            "seed": self.seed,
            "version": self.version,
            "phases": [
                {
                    "t": p.t,
                    "classes": list(p.classes),
                    "A_t": p.accuracy,
                    "old_acc": p.old_accuracy,
                    "new_acc": p.new_accuracy,
                }
                for p in self.phases
            ],
            "average_accuracy": self.average_accuracy,
        }
        return (json.dumps(doc, sort_keys=True, indent=1) + "\n").encode("utf-8")

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_json_bytes())


def average_accuracy(per_phase):
    """Mean of the per-phase accuracies (every learned task counted once)."""
    per_phase = [float(a) for a in per_phase]
    if not per_phase:
        raise ConfigError("no phase accuracies to average")
    return sum(per_phase) / len(per_phase)


def stratified_eval_split(fs, eval_fraction, seed):
    """Per-class split into train/eval index sets, fixed by seed.

    Every class keeps at least one sample on each side, which requires at
    least two samples per class.
    """
    if not 0 < eval_fraction < 1:
        raise ConfigError(f"eval_fraction must be in (0, 1), got {eval_fraction}")
    rng = np.random.default_rng([seed, 101])
    train_mask = np.zeros(fs.n_samples, dtype=bool)
    eval_mask = np.zeros(fs.n_samples, dtype=bool)
    for c in range(fs.class_count):
        idx = fs.class_indices(c)
        if idx.size < 2:
            raise ConfigError(
                f"class {c} has {idx.size} sample(s); need >= 2 to split "
                "into train and eval"
            )
        n_eval = int(round(idx.size * eval_fraction))
        n_eval = min(max(n_eval, 1), idx.size - 1)
        shuffled = rng.permutation(idx)
        eval_mask[shuffled[:n_eval]] = True
        train_mask[shuffled[n_eval:]] = True
    return train_mask, eval_mask


def run_cil(
    fs,
    stream,
    method,
    *,
    train_cfg=None,
    gamma=1.0,
    pl_weight=0.3,
    eval_fraction=0.2,
    seed=0,
    memory_per_class=None,
    normalize_features=False,
    config_extra=None,
):
    """Replay a TaskStream with one classifier and report accuracies.

    Per phase: train on the phase's training split plus replayed exemplars,
    then evaluate pooled accuracy over the eval samples of all classes seen
    so far. Exemplars are herded from each class's training split after its
    phase. ``method`` is one of 'ipc', 'linear', 'cosine', 'nme', or an
    already-constructed adapter object (tests use stubs).

    ``memory_per_class`` overrides the stream's replay budget when given.
    """
    if not isinstance(fs, FeatureSet):
        raise ConfigError("fs must be a FeatureSet")
    if not isinstance(stream, TaskStream):
        raise ConfigError("stream must be a TaskStream")
    if stream.class_count != fs.class_count or stream.n_samples != fs.n_samples:
        raise ConfigError(
            f"stream built for {stream.class_count} classes / "
            f"{stream.n_samples} samples, featureset has {fs.class_count} / "
            f"{fs.n_samples}"
        )
    for t, phase in enumerate(stream.phases):
        phase_labels = set(np.unique(fs.labels[phase.indices]).tolist())
        if phase_labels != set(phase.classes):
            raise ConfigError(
                f"phase {t} indices carry classes {sorted(phase_labels)}, "
                f"declared {sorted(phase.classes)}"
            )
    cfg = train_cfg if train_cfg is not None else TrainConfig()
    budget = stream.memory_per_class if memory_per_class is None else memory_per_class
    if budget < 0:
        raise ConfigError(f"replay budget must be >= 0, got {budget}")

    features = fs.features
    if normalize_features:
        norms = np.linalg.norm(features, axis=1, keepdims=True)
        zero = np.flatnonzero(norms[:, 0] == 0)
        if zero.size:
            raise ConfigError(f"sample {int(zero[0])} has zero norm")
        features = features / norms

    train_mask, eval_mask = stratified_eval_split(fs, eval_fraction, seed)
    adapter = (
        _make_adapter(method, fs.dim, gamma, pl_weight)
        if isinstance(method, str)
        else method
    )
    method_name = (
        method
        if isinstance(method, str)
        else getattr(adapter, "method_name", type(adapter).__name__)
    )

    memory = ExemplarMemory(budget)
    row_of_class = {}  # original class id -> arrival-order row id
    class_of_row = []
    results = []
    seen_eval_idx = np.empty(0, dtype=np.int64)
    for t, phase in enumerate(stream.phases):
        new_classes = sorted(phase.classes)
        for c in new_classes:
            row_of_class[c] = len(class_of_row)
            class_of_row.append(c)
        phase_train = phase.indices[train_mask[phase.indices]]
        replay_idx = memory.all_indices()
        train_idx = np.concatenate([phase_train, replay_idx])
        row_labels = np.array([row_of_class[int(c)] for c in fs.labels[train_idx]])
        phase_seed = int(np.random.SeedSequence([seed, 202, t]).generate_state(1)[0])
        phase_cfg = TrainConfig(
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
            learning_rate=cfg.learning_rate,
            momentum=cfg.momentum,
            lr_schedule=cfg.lr_schedule,
            seed=phase_seed,
        )
        adapter.train_on_phase(
            features[train_idx], row_labels, len(new_classes), phase_cfg
        )
        if budget > 0:
            for c in new_classes:
                cls_train = phase_train[fs.labels[phase_train] == c]
                memory.remember(c, cls_train, features[cls_train])

        phase_eval = phase.indices[eval_mask[phase.indices]]
        old_eval = seen_eval_idx
        seen_eval_idx = np.concatenate([seen_eval_idx, phase_eval])
        pred_rows = adapter.predict_rows(features[seen_eval_idx])
        true_rows = np.array(
            [row_of_class[int(c)] for c in fs.labels[seen_eval_idx]]
        )
        acc = float(np.mean(pred_rows == true_rows))
        n_old = old_eval.size
        old_acc = float(np.mean(pred_rows[:n_old] == true_rows[:n_old])) if n_old else None
        new_acc = float(np.mean(pred_rows[n_old:] == true_rows[n_old:]))
        results.append(
            PhaseResult(
                t=t,
                classes=tuple(new_classes),
                accuracy=acc,
                old_accuracy=old_acc,
                new_accuracy=new_acc,
            )
        )

    echo = {
        "method": method_name,
        "gamma": gamma,
        "lambda": pl_weight,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "learning_rate": cfg.learning_rate,
        "momentum": cfg.momentum,
        "lr_schedule": cfg.lr_schedule,
        "eval_fraction": eval_fraction,
        "memory_per_class": budget,
        "normalize_features": normalize_features,
        "phase_count": stream.phase_count,
        "class_count": fs.class_count,
        "n_samples": fs.n_samples,
        "seed": seed,
    }
    if config_extra:
        echo.update(config_extra)
    return RunReport(
        method=method_name,
        phases=tuple(results),
        average_accuracy=average_accuracy([r.accuracy for r in results]),
        config_echo=echo,
        seed=seed,
    )


def load_report(path):
    from .errors import DataError

    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"report {path} is not valid JSON: {exc}") from None


def aggregate_reports(paths, out_path):
    """Collect run reports into one CSV row per run (method x setting x seed)."""
    from .errors import DataError

    rows = []
    for path in paths:
        doc = load_report(path)
        try:
            echo = doc["config_echo"]
            rows.append(
                {
                    "method": doc["method"],
                    "phases": len(doc["phases"]),
                    "replay": echo.get("memory_per_class", ""),
                    "gamma": echo.get("gamma", ""),
                    "lambda": echo.get("lambda", ""),
                    "seed": doc["seed"],
                    "average_accuracy": doc["average_accuracy"],
                    "final_accuracy": doc["phases"][-1]["A_t"],
                }
            )
        except (KeyError, IndexError, TypeError) as exc:
            raise DataError(f"report {path} is missing field: {exc}") from None
    cols = [
        "method", "phases", "replay", "gamma", "lambda", "seed",
        "average_accuracy", "final_accuracy",
    ]
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(str(row[c]) for c in cols) + "\n")
    return len(rows)
