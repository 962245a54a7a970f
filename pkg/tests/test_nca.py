import math

import numpy as np
import pytest

from tfrank.errors import (
    ConfigError,
    DegenerateInput,
    ShapeMismatch,
    TooFewSamples,
)
from tfrank.nca import (
    NcaConfig,
    NcaModel,
    default_config,
    fit_nca,
    nca_gradient,
    nca_objective,
    nca_probabilities,
    project,
)


def objective_oracle(A, X, y, lam=0.0):
    """Direct double-loop transcription of the neighbor objective."""
    A = np.asarray(A, float)
    X = np.asarray(X, float)
    n = X.shape[0]
    emb = [A @ X[i] for i in range(n)]
    total = 0.0
    for i in range(n):
        weights = []
        for k in range(n):
            if k == i:
                weights.append(0.0)
            else:
                d = emb[i] - emb[k]
                weights.append(math.exp(-float(d @ d)))
        Zi = sum(weights)
        for j in range(n):
            if j != i and y[j] == y[i]:
                total += weights[j] / Zi
    return total - lam * float((A * A).sum())


def make_blobs(rng, n_per=10, C=3, D=16, informative=2, spread=0.5, sep=4.0,
               noise=3.0):
    """Class structure in the first `informative` dims, noise elsewhere."""
    X, y = [], []
    for c in range(C):
        center = np.zeros(D)
        center[:informative] = sep * np.array(
            [math.cos(2 * math.pi * c / C), math.sin(2 * math.pi * c / C)])[:informative]
        pts = rng.normal(scale=noise, size=(n_per, D))
        pts[:, :informative] = center[:informative] + rng.normal(
            scale=spread, size=(n_per, informative))
        X.append(pts)
        y.extend([c] * n_per)
    return np.vstack(X), np.array(y)


class TestObjective:
    def test_two_points_two_classes_penalty_only(self):
        X = np.array([[1.0, 2.0], [3.0, -1.0]])
        y = np.array([0, 1])
        A = np.array([[0.5, -0.25], [1.0, 2.0], [0.0, 1.0]])
        lam = 0.7
        assert nca_objective(A, X, y, lam) == -lam * float((A * A).sum())

    def test_saturated_clusters(self):
        rng = np.random.default_rng(0)
        a = rng.normal(scale=1e-3, size=(6, 4))
        b = rng.normal(scale=1e-3, size=(6, 4)) + 100.0
        X = np.vstack([a, b])
        y = np.array([0] * 6 + [1] * 6)
        f = nca_objective(np.eye(4), X, y)
        assert f >= 12 * (1 - 1e-6)

    def test_matches_direct_summation_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            X = rng.normal(size=(6, 3))
            y = rng.integers(0, 2, size=6)
            y[:2] = [0, 1]
            A = rng.normal(size=(2, 3))
            lam = float(rng.uniform(0, 0.5))
            got = nca_objective(A, X, y, lam)
            want = objective_oracle(A, X, y, lam)
            assert math.isclose(got, want, rel_tol=1e-12, abs_tol=1e-12)

    def test_translation_invariance(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(8, 5))
        y = rng.integers(0, 3, size=8)
        y[:3] = [0, 1, 2]
        A = rng.normal(size=(3, 5))
        c = rng.normal(size=5)
        f0 = nca_objective(A, X, y)
        f1 = nca_objective(A, X + c, y)
        assert abs(f0 - f1) < 1e-9

    def test_probability_rows_sum_to_one(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            n = int(rng.integers(2, 12))
            X = rng.normal(size=(n, 4))
            A = rng.normal(size=(3, 4))
            P = nca_probabilities(A, X)
            assert np.all(np.abs(P.sum(axis=1) - 1.0) <= 1e-12)
            assert np.all(np.diag(P) == 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            nca_objective(np.eye(3), np.zeros((4, 2)), np.zeros(4, dtype=int))
        with pytest.raises(ShapeMismatch):
            nca_objective(np.eye(2), np.zeros((4, 2)), np.zeros(3, dtype=int))

    def test_too_few_samples(self):
        with pytest.raises(TooFewSamples):
            nca_objective(np.eye(2), np.zeros((1, 2)), np.zeros(1, dtype=int))


class TestGradient:
    @staticmethod
    def fd_gradient(A, X, y, lam, h=1e-5):
        g = np.zeros_like(A)
        for r in range(A.shape[0]):
            for c in range(A.shape[1]):
                Ap = A.copy()
                Am = A.copy()
                Ap[r, c] += h
                Am[r, c] -= h
                g[r, c] = (nca_objective(Ap, X, y, lam)
                           - nca_objective(Am, X, y, lam)) / (2 * h)
        return g

    def test_finite_difference_small_instance(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(5, 3))
        y = np.array([0, 1, 0, 1, 0])
        A = rng.normal(size=(2, 3))
        g = nca_gradient(A, X, y, 0.1)
        fd = self.fd_gradient(A, X, y, 0.1)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-6

    def test_finite_difference_many_random_instances(self):
        rng = np.random.default_rng(77)
        for trial in range(20):
            n = int(rng.integers(3, 9))
            D = int(rng.integers(2, 5))
            d = int(rng.integers(1, D + 1))
            X = rng.normal(size=(n, D))
            y = rng.integers(0, 3, size=n)
            y[:2] = [0, 1]
            A = rng.normal(scale=0.8, size=(d, D))
            lam = float(rng.uniform(0, 0.3))
            g = nca_gradient(A, X, y, lam)
            fd = self.fd_gradient(A, X, y, lam)
            rel = np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)
            assert rel < 1e-6, f"trial {trial}: rel error {rel}"

    def test_zero_input_gives_pure_penalty_gradient(self):
        X = np.zeros((4, 3))
        y = np.array([0, 1, 0, 1])
        A = np.arange(6, dtype=float).reshape(2, 3) + 1.0
        lam = 0.25
        g = nca_gradient(A, X, y, lam)
        assert np.array_equal(g, -2.0 * lam * A)

    def test_duplicate_points_finite(self):
        X = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        y = np.array([0, 0, 1, 0])
        g = nca_gradient(np.eye(2), X, y, 0.0)
        assert np.isfinite(g).all()


class TestFit:
    def test_blobs_improve_over_identity(self):
        rng = np.random.default_rng(2024)
        X, y = make_blobs(rng)
        cfg = NcaConfig(out_dim=4, l2_penalty=1e-3 * len(X) / X.shape[1])
        model = fit_nca(X, y, cfg)
        after = nca_objective(model.projection, X, y) / len(X)
        before = nca_objective(np.eye(X.shape[1]), X, y) / len(X)
        assert after >= before

    def test_trace_monotone_every_fit(self):
        rng = np.random.default_rng(8)
        for seed in range(5):
            X, y = make_blobs(np.random.default_rng(seed), n_per=6, D=8)
            model = fit_nca(X, y, NcaConfig(out_dim=3, max_iters=40))
            t = model.objective_trace
            assert all(t[i + 1] >= t[i] for i in range(len(t) - 1))

    def test_single_class_rejected(self):
        X = np.random.default_rng(0).normal(size=(6, 3))
        with pytest.raises(DegenerateInput):
            fit_nca(X, np.zeros(6, dtype=int))

    def test_identical_points_rejected(self):
        X = np.ones((5, 3))
        y = np.array([0, 1, 0, 1, 0])
        with pytest.raises(DegenerateInput):
            fit_nca(X, y)

    def test_zero_iters_returns_initialization(self):
        rng = np.random.default_rng(5)
        X, y = make_blobs(rng, n_per=5, D=6)
        model = fit_nca(X, y, NcaConfig(out_dim=2, max_iters=0))
        assert len(model.objective_trace) == 1
        assert model.projection.shape == (2, 6)

    def test_init_mean_projected_distance(self):
        rng = np.random.default_rng(6)
        X, y = make_blobs(rng, n_per=5, D=6)
        model = fit_nca(X, y, NcaConfig(out_dim=3, max_iters=0))
        Z = project(model, X)
        diff = Z[:, None, :] - Z[None, :, :]
        dists = np.sqrt((diff ** 2).sum(-1))
        iu = np.triu_indices(len(X), k=1)
        assert dists[iu].mean() == pytest.approx(math.sqrt(3), rel=1e-9)

    def test_bit_deterministic(self):
        rng = np.random.default_rng(100)
        X, y = make_blobs(rng, n_per=6, D=8)
        cfg = NcaConfig(out_dim=3, max_iters=30)
        m1 = fit_nca(X, y, cfg)
        m2 = fit_nca(X, y, cfg)
        assert m1.projection.tobytes() == m2.projection.tobytes()
        assert m1.objective_trace == m2.objective_trace

    def test_out_dim_exceeding_width_rejected(self):
        rng = np.random.default_rng(1)
        X, y = make_blobs(rng, n_per=4, D=4)
        with pytest.raises(ConfigError):
            fit_nca(X, y, NcaConfig(out_dim=5))

    def test_default_config_dimensions(self):
        cfg = default_config(n=200, D=512, C=4)
        assert cfg.out_dim == 32  # max(2*4, 32) capped by D
        assert cfg.l2_penalty == pytest.approx(1e-3 * 200 / 512)
        assert default_config(n=50, D=16, C=10).out_dim == 16


class TestNcaConfig:
    @pytest.mark.parametrize("kw", [
        {"out_dim": 0}, {"out_dim": 2, "max_iters": -1},
        {"out_dim": 2, "step_size": 0.0}, {"out_dim": 2, "l2_penalty": -0.1},
        {"out_dim": 2, "tol": 0.0},
    ])
    def test_invalid_config(self, kw):
        with pytest.raises(ConfigError):
            NcaConfig(**kw)


class TestProject:
    def test_identity(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(6, 4))
        model = NcaModel(projection=np.eye(4), objective_trace=(0.0,))
        assert np.array_equal(project(model, X), X)

    def test_zero_projection(self):
        X = np.random.default_rng(1).normal(size=(5, 3))
        model = NcaModel(projection=np.zeros((2, 3)), objective_trace=(0.0,))
        assert np.array_equal(project(model, X), np.zeros((5, 2)))

    def test_matches_per_row_matvec(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(7, 5))
        A = rng.normal(size=(3, 5))
        model = NcaModel(projection=A, objective_trace=(0.0,))
        Z = project(model, X)
        for i in range(7):
            assert np.allclose(Z[i], A @ X[i], rtol=1e-12, atol=1e-12)

    def test_width_mismatch(self):
        model = NcaModel(projection=np.eye(3), objective_trace=(0.0,))
        with pytest.raises(ShapeMismatch):
            project(model, np.zeros((4, 2)))
