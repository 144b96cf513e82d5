import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wfkoopman.dataset import Dataset
from wfkoopman.koopman import (KoopmanModel, Lifting, Normalizer, SnapshotMatrices, build_snapshot_matrices,
                               edmd_fit, load_model, model_from_text, model_to_text, prediction_vaf, rollout,
                               save_model, vaf)


def random_stable(rng, n_x, n_u, radius=0.9):
    A = rng.normal(size=(n_x, n_x))
    A *= radius / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-12)
    return A, rng.normal(size=(n_x, n_u))


def ds(X, U):
    X, U = np.atleast_2d(X), np.atleast_2d(U)
    return Dataset(X, U, state_names=tuple(f"x{i}" for i in range(X.shape[0])),
                   input_names=tuple(f"u{i}" for i in range(U.shape[0])))


def lti_dataset(A, B, n_o, rng, C=None):
    n_x, n_u = B.shape
    U = rng.normal(size=(n_u, n_o))
    X = np.zeros((n_x, n_o))
    X[:, 0] = rng.normal(size=n_x)
    for k in range(n_o - 1):
        X[:, k + 1] = A @ X[:, k] + B @ U[:, k]
    return ds(X, U)


class TestSnapshots:
    def test_shapes(self):
        rng = np.random.default_rng(0)
        d = lti_dataset(*random_stable(rng, 2, 1), 11, rng)
        m = build_snapshot_matrices(d, Lifting("identity", 2))
        assert m.G_u.shape == (3, 10)
        assert m.G_plus.shape == (2, 10)

    def test_counter_signal_shift(self):
        k = np.arange(12.0)
        d = ds(k[None, :], np.zeros((1, 12)))
        m = build_snapshot_matrices(d, Lifting("identity", 1))
        assert np.array_equal(m.G_plus[0], m.G_u[0] + 1)

    def test_insufficient(self):
        d = ds(np.ones((2, 3)), np.ones((1, 3)))
        with pytest.raises(ValueError, match="insufficient snapshots"):
            build_snapshot_matrices(d, Lifting("identity", 2))

    def test_inconsistent(self):
        with pytest.raises(ValueError):
            SnapshotMatrices(np.ones((3, 5)), np.ones((2, 4)), np.ones((2, 5)))


class TestEdmd:
    def test_scalar_example(self):
        rng = np.random.default_rng(1)
        d = lti_dataset(np.array([[0.5]]), np.array([[1.0]]), 50, rng)
        m = edmd_fit(build_snapshot_matrices(d, Lifting("identity", 1)))
        assert m.A[0, 0] == pytest.approx(0.5, abs=1e-10)
        assert m.B[0, 0] == pytest.approx(1.0, abs=1e-10)
        assert m.C[0, 0] == pytest.approx(1.0, abs=1e-10)

    def test_zero_input_gives_small_B(self):
        rng = np.random.default_rng(2)
        A, _ = random_stable(rng, 3, 1)
        d = lti_dataset(A, np.zeros((3, 1)), 100, rng)
        d = ds(d.X, np.zeros_like(d.U))
        m = edmd_fit(build_snapshot_matrices(d, Lifting("identity", 3)))
        assert np.linalg.norm(m.B) < 1e-8

    def test_stationarity(self):
        rng = np.random.default_rng(3)
        d = lti_dataset(*random_stable(rng, 3, 2), 60, rng)
        d = ds(d.X + 0.01 * rng.normal(size=d.X.shape), d.U)
        ms = build_snapshot_matrices(d, Lifting("identity", 3))
        m = edmd_fit(ms)
        K = np.hstack([m.A, m.B])
        base = np.linalg.norm(ms.G_plus - K @ ms.G_u)
        for _ in range(20):
            dK = rng.normal(size=K.shape)
            dK *= 1e-3 / np.linalg.norm(dK)
            assert np.linalg.norm(ms.G_plus - (K + dK) @ ms.G_u) >= base

    def test_equals_dmdc(self):
        rng = np.random.default_rng(4)
        d = lti_dataset(*random_stable(rng, 2, 1), 80, rng)
        d = ds(d.X + 0.05 * rng.normal(size=d.X.shape), d.U)
        m = edmd_fit(build_snapshot_matrices(d, Lifting("identity", 2)))
        Omega = np.vstack([d.X[:, :-1], d.U[:, :-1]])
        K = np.linalg.lstsq(Omega.T, d.X[:, 1:].T, rcond=None)[0].T
        assert np.allclose(np.hstack([m.A, m.B]), K, atol=1e-10)

    def test_ridge_fallback_flagged(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 50))
        d = ds(np.vstack([x, x * (1 + 1e-13)]), rng.normal(size=(1, 50)))
        m = edmd_fit(build_snapshot_matrices(d, Lifting("identity", 2)))
        assert m.info["ridge"] == 1.0
        assert np.all(np.isfinite(m.A))

    def test_current_c_target(self):
        rng = np.random.default_rng(6)
        d = lti_dataset(*random_stable(rng, 2, 1), 40, rng)
        m = edmd_fit(build_snapshot_matrices(d, Lifting("identity", 2)), c_target="current")
        assert np.allclose(m.C, np.eye(2), atol=1e-10)

    def test_spectral_radius_recorded(self):
        m = KoopmanModel(np.diag([0.5, -0.9]), np.ones((2, 1)), np.eye(2), Lifting("identity", 2))
        assert m.info["spectral_radius"] == pytest.approx(0.9)


class TestRollout:
    def test_hand_example(self):
        m = KoopmanModel([[0.5]], [[1.0]], [[1.0]], Lifting("identity", 1))
        G, Y = rollout(m, [1.0], [[1.0], [1.0]])
        assert G[2, 0] == pytest.approx(1.75)
        assert Y[2, 0] == pytest.approx(1.75)

    def test_zero_input_identity(self):
        m = KoopmanModel(np.eye(3), np.ones((3, 1)), np.eye(3), Lifting("identity", 3))
        G, _ = rollout(m, [1.0, 2.0, 3.0], np.zeros((5, 1)))
        assert np.all(G == G[0])

    def test_powered_form_check(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            A, B = random_stable(rng, 4, 2)
            m = KoopmanModel(A, B, rng.normal(size=(2, 4)), Lifting("identity", 4))
            rollout(m, rng.normal(size=4), rng.normal(size=(10, 2)), check=True)

    def test_bad_g0(self):
        m = KoopmanModel([[0.5]], [[1.0]], [[1.0]], Lifting("identity", 1))
        with pytest.raises(ValueError):
            rollout(m, [1.0, 2.0], [[1.0]])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_superposition(self, seed):
        rng = np.random.default_rng(seed)
        A, B = random_stable(rng, 3, 2)
        m = KoopmanModel(A, B, np.eye(3), Lifting("identity", 3))
        g0, g1 = rng.normal(size=3), rng.normal(size=3)
        u0, u1 = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
        Ga, _ = rollout(m, g0, u0)
        Gb, _ = rollout(m, g1, u1)
        Gc, _ = rollout(m, g0 + g1, u0 + u1)
        assert np.allclose(Ga + Gb, Gc, atol=1e-10)


class TestVaf:
    def test_examples(self):
        y = np.sin(np.arange(200) / 10)
        assert vaf(y, y) == 100.0
        assert vaf(y, np.full_like(y, y.mean())) == pytest.approx(0.0, abs=1e-12)
        yz = y - y.mean()
        assert vaf(yz, 0.9 * yz) == pytest.approx(99.0)

    def test_clamped(self):
        y = np.sin(np.arange(50.0))
        assert vaf(y, -3 * y) == 0.0

    def test_errors(self):
        with pytest.raises(ValueError, match="constant reference signal"):
            vaf([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
        with pytest.raises(ValueError):
            vaf([1.0], [1.0])
        with pytest.raises(ValueError):
            vaf([1.0, 2.0], [1.0, 2.0, 3.0])

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-1e3, 1e3), st.integers(0, 1000))
    def test_offset_invariance(self, c, seed):
        rng = np.random.default_rng(seed)
        y = rng.normal(size=40)
        yh = y + 0.3 * rng.normal(size=40)
        assert vaf(y + c, yh + c) == pytest.approx(vaf(y, yh), abs=1e-6)


class TestPredictionVaf:
    def test_exact_model_is_perfect(self):
        rng = np.random.default_rng(8)
        A, B = random_stable(rng, 2, 1)
        d = lti_dataset(A, B, 100, rng)
        m = edmd_fit(build_snapshot_matrices(d, Lifting("identity", 2)), state_names=d.state_names,
                     output_names=d.state_names)
        for h in (0, 1, 10):
            assert all(v == pytest.approx(100.0) for v in prediction_vaf(m, d, h).values())


class TestPersistence:
    def _model(self, kind="affine"):
        rng = np.random.default_rng(9)
        lift = Lifting(kind, 2, x_norm=Normalizer([1.0, 2.0], [0.5, 3.0]))
        n = lift.n_g
        return KoopmanModel(rng.normal(size=(n, n)) / 3, rng.normal(size=(n, 2)), rng.normal(size=(2, n)), lift,
                            output_names=("Ur1", "Ur2"), state_names=("Ur1", "Ur2"), input_names=("CT1", "CT2"),
                            u_norm=Normalizer([0.1, 0.2], [1.5, 2.5]), y_norm=Normalizer([3.0, 4.0], [1.0, 2.0]))

    @pytest.mark.parametrize("kind", ["identity", "affine", "cubic"])
    def test_roundtrip_bit_faithful(self, kind, tmp_path):
        m = self._model(kind)
        save_model(m, tmp_path / "m.txt")
        back = load_model(tmp_path / "m.txt")
        for name in ("A", "B", "C"):
            assert np.array_equal(getattr(m, name), getattr(back, name))
        assert np.array_equal(back.lifting.x_norm.scale, m.lifting.x_norm.scale)
        assert back.output_names == m.output_names
        assert model_to_text(back) == model_to_text(m)

    def test_encoder_roundtrip(self):
        from wfkoopman.autoencoder.network import Network, NetworkSpec

        rng = np.random.default_rng(10)
        enc = Network.init(NetworkSpec.mlp(2, (5, 5), 3, "swish"), rng)
        lift = Lifting("encoder", 2, encoder=enc, include_state=True)
        m = KoopmanModel(np.eye(5) * 0.5, np.ones((5, 1)), np.ones((1, 5)), lift)
        back = model_from_text(model_to_text(m))
        x = rng.normal(size=2)
        assert np.array_equal(back.lift(x), m.lift(x))

    def test_header(self):
        text = model_to_text(self._model())
        assert text.startswith("# koopman-model v1\nn_g 3\nn_u 2\nn_y 2\nlifting affine")


class TestLifting:
    def test_kinds(self):
        x = np.array([2.0, -1.0])
        assert np.array_equal(Lifting("affine", 2)(x), [2.0, -1.0, 1.0])
        assert np.array_equal(Lifting("cubic", 2)(x), [2.0, -1.0, 4.0, 1.0, 8.0, -1.0, 1.0])

    def test_wrong_width(self):
        with pytest.raises(ValueError):
            Lifting("identity", 2)(np.ones(3))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            Lifting("poly", 2)

    def test_normalizer_roundtrip(self):
        nz = Normalizer.fit(np.array([[1.0, 2.0, 3.0], [5.0, 5.0, 5.0]]))
        v = np.array([[0.5, 7.0], [5.0, 5.0]])
        assert np.allclose(nz.invert(nz.apply(v)), v)
        assert nz.scale[1] == 1.0
