import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vpdiff import data, score
from vpdiff.errors import SingularTargetError, TrainingFailureError
from vpdiff.schedule import linear_schedule


@pytest.fixture(scope="module")
def lin():
    return linear_schedule()


@pytest.fixture(scope="module")
def spec2():
    return data.symmetric_pair_gm(2, 0.9)


def _noised_batch(spec, sched, M, seed):
    rng = np.random.default_rng(seed)
    x0 = spec.sample(M, rng)
    ns = rng.integers(1, sched.N + 1, M)
    z = rng.standard_normal(x0.shape)
    ph = sched.phi(ns, 0)[:, None]
    xt = np.sqrt(ph) * x0 + np.sqrt(1 - ph) * z
    return x0, ns, z, xt


class TestDsmTarget:
    def test_step_zero_is_singular(self, lin, spec2):
        with pytest.raises(SingularTargetError):
            score.dsm_target(np.zeros((3, 2)), np.zeros((3, 2)), 0, lin)
        with pytest.raises(SingularTargetError):
            score.dsm_target(np.zeros((3, 2)), np.zeros((3, 2)), np.array([5, 0, 9]), lin)

    def test_weighted_norm_equals_noise_norm_exactly(self, lin, spec2):
        # (1 - Phi) ||target||^2 == ||z||^2 algebraically, per sample
        x0, ns, z, xt = _noised_batch(spec2, lin, 512, seed=0)
        target = score.dsm_target(xt, x0, ns, lin)
        lam = score.lambda_weight(ns, lin)[:, None]
        assert np.allclose(lam * target**2, z**2, rtol=1e-9, atol=1e-12)

    def test_weighted_norm_mean_is_dimension(self, lin):
        # E[lambda ||target||^2] = d at every step
        rng = np.random.default_rng(1)
        spec = data.symmetric_pair_gm(3, 0.8)
        x0 = spec.sample(40_000, rng)
        for n in (1, 200, 1000):
            z = rng.standard_normal(x0.shape)
            ph = lin.phi(n, 0)
            xt = np.sqrt(ph) * x0 + np.sqrt(1 - ph) * z
            target = score.dsm_target(xt, x0, n, lin)
            weighted = (1 - ph) * np.sum(target**2, axis=1)
            assert weighted.mean() == pytest.approx(3.0, rel=0.05)


class TestGmScore:
    def test_matches_log_density_finite_differences(self, lin, spec2):
        def log_density(pts, n):
            ph = lin.phi(n, 0)
            m = np.sqrt(ph) * spec2.means
            v = ph * spec2.variances + (1 - ph)
            comp = []
            for k in range(spec2.K):
                sq = np.sum((pts - m[k]) ** 2, axis=1)
                comp.append(np.log(spec2.weights[k]) - 0.5 * sq / v[k] - np.log(2 * np.pi * v[k]))
            comp = np.stack(comp)
            mx = comp.max(axis=0)
            return mx + np.log(np.exp(comp - mx).sum(axis=0))

        rng = np.random.default_rng(2)
        x = rng.standard_normal((40, 2)) * 1.5
        h = 1e-6
        for n in (50, 400, 900):
            s = score.gm_score(spec2, x, n, lin)
            for j in range(2):
                dx = np.zeros(2)
                dx[j] = h
                fd = (log_density(x + dx, n) - log_density(x - dx, n)) / (2 * h)
                scale = max(1.0, float(np.abs(s).max()))
                assert np.max(np.abs(fd - s[:, j])) < 1e-5 * scale

    def test_vector_steps_match_scalar_calls(self, lin, spec2):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((6, 2))
        ns = np.array([1, 100, 100, 500, 999, 1000])
        vec = score.gm_score(spec2, x, ns, lin)
        for i, n in enumerate(ns):
            row = score.gm_score(spec2, x[i : i + 1], int(n), lin)
            assert np.allclose(vec[i], row[0], rtol=1e-12)

    def test_late_step_score_is_standard_normal_score(self, lin, spec2):
        # at n = N the marginal is essentially N(0, I), so s(x) ~ -x
        rng = np.random.default_rng(4)
        x = rng.standard_normal((100, 2))
        s = score.gm_score(spec2, x, 1000, lin)
        assert np.max(np.abs(s + x)) < 0.05

    def test_single_gaussian_closed_form(self, lin):
        spec = data.GaussianMixtureSpec([1.0], np.zeros((1, 2)), [1.0])
        rng = np.random.default_rng(5)
        x = rng.standard_normal((50, 2))
        for n in (0, 100, 1000):
            s = score.gm_score(spec, x, n, lin)
            assert np.allclose(s, -x, rtol=1e-12, atol=1e-12)


class TestModel:
    def test_score_undefined_at_step_zero(self, lin):
        model = score.MlpScoreModel(2, hidden=8, features=4, seed=0)
        with pytest.raises(ValueError, match="step 0"):
            model.score(np.zeros((2, 2)), 0, lin)

    def test_epsilon_shapes_scalar_and_vector_steps(self, lin):
        model = score.MlpScoreModel(3, hidden=8, features=4, seed=0)
        x = np.zeros((5, 3))
        assert model.epsilon(x, 10, lin).shape == (5, 3)
        assert model.epsilon(x, np.arange(1, 6), lin).shape == (5, 3)

    def test_constructor_validation(self):
        with pytest.raises(ValueError, match="even"):
            score.MlpScoreModel(2, features=3)
        with pytest.raises(ValueError, match="activation"):
            score.MlpScoreModel(2, activation="relu")

    def test_fresh_model_alpha_head_is_zero(self, lin):
        model = score.MlpScoreModel(2, hidden=8, features=4, seed=1)
        assert np.all(model.params["a"] == 0.0)

    def test_score_fn_adapter(self, lin):
        model = score.MlpScoreModel(2, hidden=8, features=4, seed=2)
        fn = model.score_fn(lin)
        x = np.ones((4, 2))
        assert np.array_equal(fn(x, 7), model.score(x, 7, lin))
        assert fn.min_step == 1


class TestTraining:
    def test_zero_steps_leaves_model_unchanged(self, lin, spec2):
        ds = data.generate(spec2, 100, seed=0)
        model = score.MlpScoreModel(2, hidden=8, features=4, seed=0)
        before = {k: v.copy() for k, v in model.params.items()}
        model, trace = score.train_dsm(model, ds, lin, score.TrainConfig(steps=0))
        assert trace == []
        for k in before:
            assert np.array_equal(model.params[k], before[k])

    def test_loss_decreases(self, lin, spec2):
        ds = data.generate(spec2, 1000, seed=1)
        model = score.MlpScoreModel(2, seed=3)
        model, trace = score.train_dsm(model, ds, lin, score.TrainConfig(steps=400, seed=3))
        assert len(trace) == 400
        # the loss floor is the irreducible noise-prediction variance, not 0
        assert np.mean(trace[-50:]) < 0.5 * np.mean(trace[:10])
        assert np.mean(trace[-50:]) < 0.35

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_divergence_raises_with_step_index(self, lin, spec2):
        ds = data.generate(spec2, 200, seed=2)
        model = score.MlpScoreModel(2, seed=0)
        with pytest.raises(TrainingFailureError) as err:
            score.train_dsm(model, ds, lin, score.TrainConfig(steps=500, lr=2e3, seed=0))
        assert err.value.step >= 0
        assert str(err.value.step) in str(err.value)

    def test_dimension_mismatch(self, lin):
        ds = data.generate(data.symmetric_pair_gm(3, 0.9), 50, seed=0)
        model = score.MlpScoreModel(2, hidden=8, features=4)
        with pytest.raises(ValueError, match="dimension"):
            score.train_dsm(model, ds, lin, score.TrainConfig(steps=1))

    def test_training_reduces_oracle_error(self, lin, spec2):
        ds = data.generate(spec2, 2000, seed=1)
        fresh = score.MlpScoreModel(2, seed=7)
        base = score.weighted_score_error(fresh, spec2, lin)
        model = score.MlpScoreModel(2, seed=7)
        model, _ = score.train_dsm(model, ds, lin, score.TrainConfig(steps=2500, seed=7))
        trained = score.weighted_score_error(model, spec2, lin)
        assert trained < 0.25
        assert trained < 0.5 * base

    def test_loss_trace_csv(self, lin, tmp_path):
        path = tmp_path / "trace.csv"
        score.save_loss_trace([1.5, 0.5], path)
        assert path.read_text() == "step,loss\n0,1.5\n1,0.5\n"


class TestFiniteDiff:
    def test_tanh_gradients_match(self, lin):
        model = score.MlpScoreModel(2, hidden=16, features=4, seed=5)
        out = score.finite_diff_check(model, lin, n_probes=10, epsilon=1e-5, seed=0)
        assert out["l2_rel"] < 1e-4
        assert out["max_rel"] < 1e-4

    def test_linear_activation_is_exact(self, lin):
        # quadratic loss: central differences carry no truncation error
        model = score.MlpScoreModel(2, hidden=16, features=4, activation="linear", seed=5)
        out = score.finite_diff_check(model, lin, n_probes=10, epsilon=1e-3, seed=0)
        assert out["l2_rel"] < 1e-10

    def test_epsilon_bounds(self, lin):
        model = score.MlpScoreModel(2, hidden=8, features=4)
        for eps in (1e-7, 1e-2):
            with pytest.raises(ValueError, match="epsilon"):
                score.finite_diff_check(model, lin, epsilon=eps)


class TestCheckpoint:
    def test_roundtrip_preserves_scores(self, lin, tmp_path):
        model = score.MlpScoreModel(2, hidden=16, features=4, seed=8)
        # give the alpha head nonzero content so the roundtrip covers it
        model.params["a"] += 0.25
        path = tmp_path / "ckpt.bin"
        score.save_checkpoint(model, path)
        loaded = score.load_checkpoint(path)
        x = np.random.default_rng(0).standard_normal((10, 2))
        a = model.score(x, 500, lin)
        b = loaded.score(x, 500, lin)
        assert np.max(np.abs(a - b)) < 1e-5  # f32 storage
        assert loaded.activation == "tanh"

    def test_rejects_foreign_and_truncated_files(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(ValueError, match="not a model checkpoint"):
            score.load_checkpoint(path)
        model = score.MlpScoreModel(2, hidden=8, features=4)
        good = tmp_path / "ok.bin"
        score.save_checkpoint(model, good)
        good.write_bytes(good.read_bytes()[:-10])
        with pytest.raises(ValueError, match="truncated"):
            score.load_checkpoint(good)


@settings(max_examples=20, deadline=None)
@given(m0=st.floats(0.1, 0.97), n=st.integers(1, 1000), seed=st.integers(0, 2**16))
def test_dsm_identity_property(m0, n, seed):
    lin = linear_schedule()
    spec = data.symmetric_pair_gm(2, m0)
    rng = np.random.default_rng(seed)
    x0 = spec.sample(64, rng)
    z = rng.standard_normal(x0.shape)
    ph = lin.phi(n, 0)
    xt = np.sqrt(ph) * x0 + np.sqrt(1 - ph) * z
    target = score.dsm_target(xt, x0, n, lin)
    assert np.allclose((1 - ph) * target**2, z**2, rtol=1e-8, atol=1e-10)
