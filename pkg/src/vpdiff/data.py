"""Datasets: Gaussian mixtures, toy builtins, normalization, on-disk formats.

The diffusion code assumes data with pooled mean 0 and pooled second
moment 1.  Gaussian mixtures built with unit population moments already
satisfy this; everything else should go through normalize() first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import struct

import numpy as np

from .errors import DegenerateDataError

_MAGIC = b"UTD1"

BUILTIN_NAMES = ("two_moons", "checkerboard", "tiny_glyphs_8x8")


@dataclass
class Dataset:
    """Immutable sample matrix plus the normalization record that produced it.

    shift and scale map these samples back to the pre-normalization
    input: original = samples * scale + shift.
    """

    samples: np.ndarray
    name: str = "dataset"
    shift: np.ndarray | None = None
    scale: np.ndarray | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ValueError("samples must be an M x d matrix")
        M, d = self.samples.shape
        if M < 2 or d < 1:
            raise ValueError(f"need M >= 2 and d >= 1, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples contain non-finite entries")
        self.samples.flags.writeable = False

    @property
    def M(self):
        return self.samples.shape[0]

    @property
    def d(self):
        return self.samples.shape[1]

    def pooled_moments(self):
        """(pooled mean, pooled second moment) over all M * d entries."""
        return float(self.samples.mean()), float(np.mean(self.samples**2))


@dataclass
class GaussianMixtureSpec:
    """Isotropic Gaussian mixture: weights (K,), means (K, d), variances (K,)."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.asarray(self.variances, dtype=np.float64)
        K = self.weights.size
        if self.means.shape[0] != K or self.variances.size != K:
            raise ValueError(
                f"component count mismatch: {K} weights, {self.means.shape[0]} means, "
                f"{self.variances.size} variances"
            )
        if np.any(self.weights <= 0):
            raise ValueError("weights must be strictly positive")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {self.weights.sum()!r}")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be strictly positive")

    @property
    def K(self):
        return self.weights.size

    @property
    def d(self):
        return self.means.shape[1]

    def sample(self, M, rng):
        comp = rng.choice(self.K, size=M, p=self.weights)
        z = rng.standard_normal((M, self.d))
        return self.means[comp] + np.sqrt(self.variances)[comp, None] * z

    def as_dict(self):
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }


def symmetric_pair_gm(d, m0):
    """Two equally weighted components at +-m0 * ones(d) with unit pooled moments.

    Component variance is 1 - m0**2 so that the population mean is 0 and
    the population second moment is exactly 1 per coordinate.
    """
    if not 0.0 < m0 < 1.0:
        raise ValueError(f"need 0 < m0 < 1, got {m0}")
    mu = m0 * np.ones(d)
    return GaussianMixtureSpec(
        weights=np.array([0.5, 0.5]),
        means=np.stack([mu, -mu]),
        variances=np.array([1.0 - m0**2, 1.0 - m0**2]),
    )


def _two_moons(M, rng, noise=0.08):
    upper = rng.random(M) < 0.5
    theta = rng.random(M) * np.pi
    x = np.empty((M, 2))
    x[upper, 0] = np.cos(theta[upper])
    x[upper, 1] = np.sin(theta[upper])
    x[~upper, 0] = 1.0 - np.cos(theta[~upper])
    x[~upper, 1] = 0.5 - np.sin(theta[~upper])
    x += noise * rng.standard_normal((M, 2))
    return x


def _checkerboard(M, rng):
    # 4 x 4 board over [-2, 2)^2, occupied cells where floor(x) + floor(y) is even
    i = rng.integers(-2, 2, size=M)
    parity = np.abs(i) % 2
    j = 2 * rng.integers(0, 2, size=M) - 2 + parity
    u = rng.random((M, 2))
    return np.stack([i + u[:, 0], j + u[:, 1]], axis=1)


def _glyph_bank():
    r = np.arange(8)
    rr, cc = np.meshgrid(r, r, indexing="ij")
    glyphs = [
        (rr % 2 == 0),
        (cc % 2 == 0),
        ((rr + cc) % 2 == 0),
        (rr == cc) | (rr + cc == 7),
        (rr == 3) | (rr == 4) | (cc == 3) | (cc == 4),
        (rr == 0) | (rr == 7) | (cc == 0) | (cc == 7),
        (rr < 4),
        ((rr // 2 + cc // 2) % 2 == 0),
    ]
    return np.stack([g.astype(np.float64).ravel() for g in glyphs])


def _tiny_glyphs(M, rng, jitter=0.15):
    bank = 2.0 * _glyph_bank() - 1.0
    idx = rng.integers(0, bank.shape[0], size=M)
    return bank[idx] + jitter * rng.standard_normal((M, bank.shape[1]))


def generate(spec, M, seed):
    """Draw M i.i.d. samples from a mixture spec or a named builtin.

    Args:
        spec: GaussianMixtureSpec, or one of "two_moons", "checkerboard",
              "tiny_glyphs_8x8".
        M: sample count, at least 2.
        seed: integer RNG seed; fixed seed gives bit-identical output.
    """
    if M < 2:
        raise ValueError(f"need M >= 2, got {M}")
    rng = np.random.default_rng(seed)
    if isinstance(spec, GaussianMixtureSpec):
        return Dataset(samples=spec.sample(M, rng), name="gm")
    if spec == "two_moons":
        return Dataset(samples=_two_moons(M, rng), name="two_moons")
    if spec == "checkerboard":
        return Dataset(samples=_checkerboard(M, rng), name="checkerboard")
    if spec == "tiny_glyphs_8x8":
        return Dataset(samples=_tiny_glyphs(M, rng), name="tiny_glyphs_8x8")
    raise ValueError(f"unknown dataset spec {spec!r}; builtins are {BUILTIN_NAMES}")


def normalize(dataset, mode="per_coordinate"):
    """Shift and rescale so pooled mean is 0 and pooled second moment is 1.

    mode "per_coordinate" whitens each coordinate (the default); mode
    "global" applies one scalar shift and one scalar scale to all
    coordinates.  Either way the record is stored as d-vectors and the
    transform is inverted exactly by denormalize().
    """
    X = dataset.samples
    if mode == "per_coordinate":
        shift = X.mean(axis=0)
        centered = X - shift
        scale = np.sqrt(np.mean(centered**2, axis=0))
    elif mode == "global":
        shift = np.full(dataset.d, X.mean())
        centered = X - shift
        scale = np.full(dataset.d, np.sqrt(np.mean(centered**2)))
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    if np.any(scale < 1e-12 * max(1.0, float(np.abs(X).max()))):
        raise DegenerateDataError(
            f"dataset {dataset.name!r} has (near-)zero variance, cannot rescale"
        )
    return Dataset(
        samples=centered / scale,
        name=dataset.name,
        shift=shift.copy(),
        scale=scale.copy(),
    )


def denormalize(dataset):
    """Invert the stored normalization record."""
    if dataset.shift is None or dataset.scale is None:
        raise ValueError("dataset carries no normalization record")
    return Dataset(samples=dataset.samples * dataset.scale + dataset.shift, name=dataset.name)


def save_csv(samples, path):
    """Headerless CSV, one sample per row, repr-exact decimal fields."""
    X = np.asarray(samples, dtype=np.float64)
    with open(path, "w") as fh:
        for row in X:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_csv(path):
    X = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{path}: non-finite entries")
    return X


def save_binary(samples, path):
    """Raw float32 matrix with a 16-byte header: magic, M, d, reserved."""
    X = np.ascontiguousarray(np.asarray(samples), dtype="<f4")
    M, d = X.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", M, d))
        fh.write(b"\x00" * 4)
        fh.write(X.tobytes())


def load_binary(path):
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16 or header[:4] != _MAGIC:
            raise ValueError(f"{path}: not a {_MAGIC.decode()} sample file")
        M, d = struct.unpack("<II", header[4:12])
        payload = fh.read()
    expected = M * d * 4
    if len(payload) != expected:
        raise ValueError(f"{path}: truncated payload, expected {expected} bytes, got {len(payload)}")
    X = np.frombuffer(payload, dtype="<f4").reshape(M, d).astype(np.float64)
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{path}: non-finite entries")
    return X
