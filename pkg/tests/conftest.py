import numpy as np
import pytest

from novnet.data_io import ClusterSpec, Dataset, SyntheticSpec, synth_gaussian
from novnet.dual_trainer import TrainingConfig, build_dual_model, train
from novnet.nn_core import Dense, NetworkSpec, Relu


def small_synthetic(seed=0, per_cluster=60, dim=4):
    """Two tight known clusters, one novel, two reference clusters."""
    spec = SyntheticSpec(
        dimension=dim,
        clusters=(
            ClusterSpec((2.0,) + (0.0,) * (dim - 1), 0.4, per_cluster, "known"),
            ClusterSpec((0.0, 2.0) + (0.0,) * (dim - 2), 0.4, per_cluster, "known"),
            ClusterSpec((1.0, 1.0) + (0.0,) * (dim - 2), 0.4, per_cluster, "novel"),
            ClusterSpec((-2.0,) + (0.0,) * (dim - 1), 0.6, per_cluster, "reference"),
            ClusterSpec((0.0, -2.0) + (0.0,) * (dim - 2), 0.6, per_cluster, "reference"),
        ),
        seed=seed,
    )
    return synth_gaussian(spec)


def small_backbone(dim=4, width=8):
    return NetworkSpec((dim,), (Dense(dim, width), Relu()))


@pytest.fixture(scope="session")
def toy_datasets():
    return small_synthetic()


@pytest.fixture(scope="session")
def trained_dual_full(toy_datasets):
    known, novel, reference = toy_datasets
    cfg = TrainingConfig(mode="dual-full", epochs=20, lr=0.05, seed=3,
                         batch_size_T=16, batch_size_R=16)
    model = build_dual_model(small_backbone(), known.n_classes, reference.n_classes, seed=3)
    model, history = train(model, known, reference, cfg)
    return model, history, toy_datasets


@pytest.fixture(scope="session")
def trained_ce_only(toy_datasets):
    known, novel, reference = toy_datasets
    cfg = TrainingConfig(mode="ce-only", epochs=20, lr=0.05, seed=3, batch_size_T=16)
    model = build_dual_model(small_backbone(), known.n_classes, 0, seed=3)
    model, history = train(model, known, None, cfg)
    return model, history, toy_datasets


def rng_dataset(rng, n, dim, n_classes, names=None):
    """Random dense-labeled dataset for protocol tests."""
    samples = []
    for i in range(n):
        samples.append((rng.standard_normal(dim), i % n_classes))
    return Dataset(samples, names or [f"c{i}" for i in range(n_classes)], provenance="test")
