"""Synthetic data generators and the grouped batch sampler."""

import numpy as np
import pytest

from bnlab.errors import InvalidParams
from bnlab.synthetic import (
    ClusteredData,
    Corruption,
    GaussianClasses,
    GroupedBatchSampler,
    MixingCorruption,
    MultiScaleDomains,
    SpatialGaussianClasses,
    make_clustered_data,
)


def test_gaussian_classes_mean_layout():
    task = GaussianClasses(classes=5, dim=8, separation=3.0, seed=0)
    norms = np.linalg.norm(task.means, axis=1)
    np.testing.assert_allclose(norms, 3.0, atol=1e-12)
    x, y = task.sample(np.random.default_rng(1), 20)
    assert x.shape == (20, 8, 1, 1)
    assert y.shape == (20,) and y.min() >= 0 and y.max() < 5
    # the mean layout is tied to the task seed, not the sampling rng
    assert np.array_equal(task.means, GaussianClasses(5, 8, 3.0, seed=0).means)


def test_spatial_gaussian_classes_shape_and_nuisance():
    task = SpatialGaussianClasses(classes=4, channels=6, sites=3,
                                  separation=2.0, noise=0.1, seed=1)
    flat_norms = np.linalg.norm(task.means.reshape(4, -1), axis=1)
    np.testing.assert_allclose(flat_norms, 2.0, atol=1e-12)
    x, y = task.sample(np.random.default_rng(2), 10)
    assert x.shape == (10, 6, 3, 1)
    # gain/offset widen the per-sample spread without changing shapes
    noisy = SpatialGaussianClasses(4, 6, 3, 2.0, 0.1, gain=1.0, offset=2.0,
                                   seed=1)
    xn, _ = noisy.sample(np.random.default_rng(2), 200)
    assert xn.std() > x.std()


def test_corruption_is_affine():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((5, 4, 1, 1))
    y = Corruption(scale=2.0, shift=-1.0).apply(x, rng)
    np.testing.assert_allclose(y, 2.0 * x - 1.0, atol=1e-12)


def test_mixing_corruption_rotation_is_orthogonal_and_deterministic():
    rng = np.random.default_rng(4)
    corr = MixingCorruption.random_rotation(6, np.random.default_rng(5))
    np.testing.assert_allclose(corr.matrix @ corr.matrix.T, np.eye(6),
                               atol=1e-12)
    again = MixingCorruption.random_rotation(6, np.random.default_rng(5))
    np.testing.assert_array_equal(corr.matrix, again.matrix)
    x = rng.standard_normal((5, 6, 1, 1))
    y = corr.apply(x, rng)
    assert y.shape == x.shape
    # a rotation preserves per-sample norms
    np.testing.assert_allclose(np.linalg.norm(y[:, :, 0, 0], axis=1),
                               np.linalg.norm(x[:, :, 0, 0], axis=1),
                               atol=1e-12)


def test_multi_scale_domains_dispatch():
    base = GaussianClasses(4, 6, 3.0, 0.5, seed=6)
    domains = MultiScaleDomains(base, [Corruption(), Corruption(scale=10.0)])
    assert domains.n_domains == 2
    rng = np.random.default_rng(7)
    x0, _ = domains.sample_domain(rng, 0, 100)
    x1, _ = domains.sample_domain(rng, 1, 100)
    assert x1.std() > 5 * x0.std()


def test_make_clustered_data_shares_latent_within_cluster():
    task = GaussianClasses(4, 8, separation=1.0, noise=0.01, seed=8)
    rng = np.random.default_rng(9)
    data = make_clustered_data(task, rng, n_clusters=50, cluster_size=2,
                               latent_scale=20.0)
    assert isinstance(data, ClusteredData)
    assert data.x.shape == (100, 8, 1, 1)
    assert data.clusters.shape == (50, 2)
    a = data.x[data.clusters[:, 0], :, 0, 0]
    b = data.x[data.clusters[:, 1], :, 0, 0]
    # the dominant latent cancels in the within-cluster difference
    assert np.abs(a - b).max() < np.abs(a).mean()


def test_grouped_batch_sampler():
    sampler = GroupedBatchSampler(groups_per_batch=4, copies_per_group=2)
    assert sampler.batch_size == 8
    task = GaussianClasses(4, 8, seed=10)
    rng = np.random.default_rng(11)
    data = make_clustered_data(task, rng, 16, 2, 1.0)
    idx = sampler.draw(data, rng)
    assert idx.shape == (8,)
    # group-major: consecutive pairs come from one cluster
    pairs = idx.reshape(4, 2)
    for row in pairs:
        assert row[1] == row[0] + 1 and row[0] % 2 == 0
    order = sampler.one_per_group_order()
    assert sorted(order.tolist()) == list(range(8))
    # after reordering, each half holds one member of every group
    reordered = idx[order].reshape(2, 4)
    for half in reordered:
        assert len({i // 2 for i in half}) == 4
    wrong = make_clustered_data(task, rng, 8, 3, 1.0)
    with pytest.raises(InvalidParams):
        sampler.draw(wrong, rng)
