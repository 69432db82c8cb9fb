import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vpdiff import data
from vpdiff.errors import DegenerateDataError


class TestGenerate:
    def test_single_component_standard_normal(self):
        spec = data.GaussianMixtureSpec([1.0], np.zeros((1, 3)), [1.0])
        ds = data.generate(spec, 10_000, seed=0)
        assert np.all(np.abs(ds.samples.mean(axis=0)) < 3.0 / np.sqrt(10_000))

    def test_two_component_occupancy(self):
        spec = data.GaussianMixtureSpec(
            [0.5, 0.5], [[-3.0, 0.0], [3.0, 0.0]], [1.0, 1.0]
        )
        ds = data.generate(spec, 10_000, seed=1)
        near_left = np.sum((ds.samples[:, 0] + 3) ** 2 < (ds.samples[:, 0] - 3) ** 2)
        assert abs(near_left / 10_000 - 0.5) < 0.02

    def test_fixed_seed_bit_identical(self):
        spec = data.symmetric_pair_gm(4, 0.9)
        a = data.generate(spec, 500, seed=42)
        b = data.generate(spec, 500, seed=42)
        assert a.samples.tobytes() == b.samples.tobytes()

    def test_builtins_shapes(self):
        for name, d in [("two_moons", 2), ("checkerboard", 2), ("tiny_glyphs_8x8", 64)]:
            ds = data.generate(name, 300, seed=3)
            assert ds.samples.shape == (300, d)
            assert ds.name == name

    def test_checkerboard_occupies_alternating_cells(self):
        ds = data.generate("checkerboard", 4000, seed=4)
        cells = np.floor(ds.samples).astype(int)
        assert np.all((cells[:, 0] + cells[:, 1]) % 2 == 0)

    def test_glyphs_are_binary_patterns_plus_jitter(self):
        ds = data.generate("tiny_glyphs_8x8", 500, seed=5)
        dist_to_levels = np.minimum(np.abs(ds.samples - 1.0), np.abs(ds.samples + 1.0))
        # jitter is 0.15, so nothing should sit far from the two levels
        assert np.quantile(dist_to_levels, 0.99) < 0.5

    def test_rejects_tiny_m_and_unknown_name(self):
        with pytest.raises(ValueError, match="M >= 2"):
            data.generate("two_moons", 1, seed=0)
        with pytest.raises(ValueError, match="unknown dataset"):
            data.generate("spiral", 100, seed=0)

    def test_invalid_mixture_specs(self):
        with pytest.raises(ValueError, match="sum to 1"):
            data.GaussianMixtureSpec([0.5, 0.4], [[0.0], [1.0]], [1.0, 1.0])
        with pytest.raises(ValueError, match="strictly positive"):
            data.GaussianMixtureSpec([1.5, -0.5], [[0.0], [1.0]], [1.0, 1.0])
        with pytest.raises(ValueError, match="strictly positive"):
            data.GaussianMixtureSpec([0.5, 0.5], [[0.0], [1.0]], [1.0, 0.0])
        with pytest.raises(ValueError, match="mismatch"):
            data.GaussianMixtureSpec([0.5, 0.5], [[0.0], [1.0], [2.0]], [1.0, 1.0])

    def test_symmetric_pair_population_moments(self):
        spec = data.symmetric_pair_gm(8, 0.95)
        # population mean 0, per-coordinate second moment m0^2 + var = 1
        assert float(spec.weights @ spec.means[:, 0]) == 0.0
        second = float(spec.weights @ (spec.means[:, 0] ** 2 + spec.variances))
        assert second == pytest.approx(1.0, abs=1e-12)


class TestNormalize:
    def test_already_normalized_is_identity(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((5000, 3))
        X = (X - X.mean(axis=0)) / np.sqrt(np.mean((X - X.mean(axis=0)) ** 2, axis=0))
        ds = data.Dataset(X)
        out = data.normalize(ds)
        assert np.max(np.abs(out.samples - X)) < 1e-9

    def test_pooled_moments_after_normalize(self):
        rng = np.random.default_rng(1)
        ds = data.Dataset(3.0 * rng.standard_normal((400, 5)) + 7.0)
        for mode in ("per_coordinate", "global"):
            out = data.normalize(ds, mode=mode)
            mean, second = out.pooled_moments()
            assert abs(mean) < 1e-6
            assert abs(second - 1.0) < 1e-6

    def test_idempotent(self):
        rng = np.random.default_rng(2)
        ds = data.Dataset(rng.gamma(2.0, size=(300, 2)))
        once = data.normalize(ds)
        twice = data.normalize(once)
        assert np.max(np.abs(twice.samples - once.samples)) < 1e-9

    def test_roundtrip(self):
        rng = np.random.default_rng(3)
        X = rng.standard_normal((200, 4)) * 5.0 - 2.0
        ds = data.normalize(data.Dataset(X))
        back = data.denormalize(ds)
        assert np.max(np.abs(back.samples - X)) < 1e-9

    def test_affine_invariance(self):
        rng = np.random.default_rng(4)
        X = rng.standard_normal((500, 2))
        a, b = 3.7, -1.2
        out_x = data.normalize(data.Dataset(X)).samples
        out_ax = data.normalize(data.Dataset(a * X + b)).samples
        assert np.max(np.abs(out_x - out_ax)) < 1e-9

    def test_constant_dataset_is_degenerate(self):
        with pytest.raises(DegenerateDataError):
            data.normalize(data.Dataset(np.full((10, 2), 3.0)))

    def test_denormalize_without_record(self):
        with pytest.raises(ValueError, match="no normalization record"):
            data.denormalize(data.Dataset(np.zeros((3, 1)) + [[1.0], [2.0], [3.0]]))


class TestDatasetType:
    def test_shape_and_finiteness_validation(self):
        with pytest.raises(ValueError, match="M >= 2"):
            data.Dataset(np.zeros((1, 2)))
        with pytest.raises(ValueError, match="non-finite"):
            data.Dataset(np.array([[1.0, np.nan], [0.0, 1.0]]))
        with pytest.raises(ValueError, match="matrix"):
            data.Dataset(np.zeros(5))

    def test_samples_are_immutable(self):
        ds = data.generate("two_moons", 10, seed=0)
        with pytest.raises(ValueError):
            ds.samples[0, 0] = 99.0


class TestFileFormats:
    def test_csv_roundtrip_headerless(self, tmp_path):
        rng = np.random.default_rng(5)
        X = rng.standard_normal((20, 3))
        path = tmp_path / "x.csv"
        data.save_csv(X, path)
        first = path.read_text().splitlines()[0]
        assert first.count(",") == 2
        float(first.split(",")[0])  # no header row
        back = data.load_csv(path)
        assert np.array_equal(back, X)

    def test_binary_roundtrip_and_header(self, tmp_path):
        rng = np.random.default_rng(6)
        X = rng.standard_normal((7, 5)).astype(np.float32).astype(np.float64)
        path = tmp_path / "x.utd1"
        data.save_binary(X, path)
        raw = path.read_bytes()
        assert raw[:4] == b"UTD1"
        assert int.from_bytes(raw[4:8], "little") == 7
        assert int.from_bytes(raw[8:12], "little") == 5
        assert len(raw) == 16 + 7 * 5 * 4
        assert np.array_equal(data.load_binary(path), X)

    def test_binary_load_rejects_bad_magic_and_truncation(self, tmp_path):
        path = tmp_path / "bad.utd1"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(ValueError, match="not a UTD1"):
            data.load_binary(path)
        good = tmp_path / "good.utd1"
        data.save_binary(np.zeros((4, 2)), good)
        good.write_bytes(good.read_bytes()[:-4])
        with pytest.raises(ValueError, match="truncated"):
            data.load_binary(good)

    def test_loaders_reject_non_finite(self, tmp_path):
        path = tmp_path / "inf.csv"
        path.write_text("1.0,inf\n0.0,1.0\n")
        with pytest.raises(ValueError, match="non-finite"):
            data.load_csv(path)


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**20),
    M=st.integers(5, 60),
    d=st.integers(1, 6),
    scale=st.floats(0.1, 50.0),
    shift=st.floats(-20.0, 20.0),
)
def test_normalize_roundtrip_property(seed, M, d, scale, shift):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((M, d)) * scale + shift
    ds = data.normalize(data.Dataset(X))
    mean, second = ds.pooled_moments()
    assert abs(mean) < 1e-6
    assert abs(second - 1.0) < 1e-6
    assert np.max(np.abs(data.denormalize(ds).samples - X)) < 1e-7 * max(1.0, abs(shift), scale)
