import numpy as np
import pytest

from protocil.featureset import FeatureSet, SynthSpec, generate_synthetic, split_tasks


def hetero_clusters(seed=42, class_count=20, dim=64, per_class=100, mean_scale=10.0,
                    stds=(1.0, 4.0)):
    """Seeded synthetic clusters with alternating tight/broad classes.

    Unequal spreads put the best class boundary away from the midpoint of
    the class means, so discriminative prototype placement has something to
    gain over plain class means.
    """
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((class_count, dim))
    means = raw / np.linalg.norm(raw, axis=1, keepdims=True) * mean_scale
    class_std = np.where(np.arange(class_count) % 2 == 0, stds[0], stds[1])
    labels = np.repeat(np.arange(class_count), per_class)
    feats = means[labels] + class_std[labels][:, None] * rng.standard_normal(
        (class_count * per_class, dim)
    )
    return FeatureSet(feats, labels, class_count)


@pytest.fixture(scope="session")
def cil_fixture():
    """The 20-class desk-scale benchmark: features plus 10+5x2 stream."""
    fs = hetero_clusters()
    stream = split_tasks(fs, 5, 0.5)
    return fs, stream


@pytest.fixture(scope="session")
def small_synth():
    """Well-separated 4-class set for fast classifier tests."""
    return generate_synthetic(
        SynthSpec(class_count=4, dim=8, samples_per_class=30, mean_scale=8.0,
                  within_std=0.5, seed=3)
    )
