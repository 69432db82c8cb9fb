"""Score functions: the analytic mixture oracle and a trainable MLP.

The marginal of a Gaussian mixture pushed through the forward kernel is
again a Gaussian mixture with means sqrt(Phi) mu_k and variances
Phi sigma_k^2 + (1 - Phi), so its score is available in closed form and
serves as the oracle against which everything else is checked.

The trainable model predicts the noise z injected by the kernel and is
converted to a score by s(x, n) = -eps_hat(x, n) / sqrt(1 - Phi(n, 0)).
Under this parameterization the weighted denoising objective
(1 - Phi) ||target - s||^2 equals ||z - eps_hat||^2 exactly, which makes
every step of the schedule contribute at the same scale.  The network is
a small MLP over (x, time features) plus a time-modulated linear term
alpha(n) * x; the linear term keeps the predictor anchored to the input
far from the data manifold, where a bare MLP saturates and the reverse
chain would drift unchecked.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import SingularTargetError, TrainingFailureError

_CKPT_MAGIC = b"UTCK"
_CKPT_VERSION = 1
_ACTIVATIONS = ("tanh", "linear")


def lambda_weight(n, schedule):
    """Per-step loss weight lambda(n) = 1 - Phi(n, 0)."""
    return 1.0 - schedule.phi(n, 0)


def dsm_target(x_t, x0, n, schedule):
    """Conditional score of the forward kernel at x_t given x0.

    -(x_t - sqrt(Phi(n,0)) x0) / (1 - Phi(n,0)).  Undefined at n = 0
    where the kernel is a point mass.
    """
    n_arr = np.asarray(n)
    if np.any(n_arr == 0):
        raise SingularTargetError("denoising target is undefined at step 0 (zero noise variance)")
    ph = schedule.phi(n_arr if n_arr.ndim else int(n), 0)
    ph = np.asarray(ph, dtype=np.float64)
    if ph.ndim:
        ph = ph[:, None]
    return -(x_t - np.sqrt(ph) * x0) / (1.0 - ph)


def gm_score(spec, x, n, schedule):
    """Exact marginal score of a Gaussian mixture after n forward steps.

    Args:
        spec: GaussianMixtureSpec for the step-0 data law.
        x: (M, d) evaluation points.
        n: scalar step or (M,) per-row steps in [0, N].
        schedule: noising schedule defining Phi.

    Returns:
        (M, d) array of grad_x log p_n(x).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n_arr = np.asarray(n)
    scalar_n = n_arr.ndim == 0
    ph = schedule.phi(int(n) if scalar_n else n_arr, 0)
    mu = spec.means
    var = spec.variances
    logw = np.log(spec.weights)
    if scalar_n:
        m = np.sqrt(ph) * mu                      # (K, d)
        v = ph * var + (1.0 - ph)                 # (K,)
        diff = x[:, None, :] - m[None, :, :]      # (M, K, d)
        sq = np.einsum("mkd,mkd->mk", diff, diff)
        logits = logw[None, :] - 0.5 * sq / v[None, :] - 0.5 * x.shape[1] * np.log(v)[None, :]
    else:
        ph = np.asarray(ph, dtype=np.float64)
        m = np.sqrt(ph)[:, None, None] * mu[None, :, :]          # (M, K, d)
        v = ph[:, None] * var[None, :] + (1.0 - ph)[:, None]     # (M, K)
        diff = x[:, None, :] - m
        sq = np.einsum("mkd,mkd->mk", diff, diff)
        logits = logw[None, :] - 0.5 * sq / v - 0.5 * x.shape[1] * np.log(v)
    logits -= logits.max(axis=1, keepdims=True)
    resp = np.exp(logits)
    resp /= resp.sum(axis=1, keepdims=True)
    if scalar_n:
        return np.einsum("mk,mkd->md", resp / v[None, :], -diff)
    return np.einsum("mk,mkd->md", resp / v, -diff)


def gm_score_fn(spec, schedule):
    """Callable (x, n) -> score for reverse runs, exact for the mixture."""

    def fn(x, n):
        return gm_score(spec, x, n, schedule)

    fn.min_step = 0
    fn.label = "analytic_gm"
    return fn


@dataclass
class TrainConfig:
    steps: int
    batch: int = 128
    lr: float = 2e-2
    momentum: float = 0.9
    lr_decay: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.batch < 1:
            raise ValueError("batch must be positive")
        if self.lr <= 0 or self.lr_decay <= 0:
            raise ValueError("lr and lr_decay must be positive")


class MlpScoreModel:
    """Noise predictor eps_hat(x, n) = alpha(n) x + MLP(x, feat(n)).

    feat(n) holds `features` sinusoidal time embeddings at geometric
    frequencies 2 pi 4^j of n / N; alpha(n) is an affine function of the
    same embedding.  Hidden activation is tanh, or identity when
    activation = "linear" (the degenerate variant whose loss is exactly
    quadratic in the parameters, used to pin down the gradient code).
    """

    def __init__(self, d, hidden=128, features=8, activation="tanh", seed=0):
        if features % 2 != 0 or features < 2:
            raise ValueError("features must be a positive even count (sin/cos pairs)")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")
        self.d = int(d)
        self.hidden = int(hidden)
        self.features = int(features)
        self.activation = activation
        self.freqs = 2.0 * np.pi * 4.0 ** np.arange(features // 2)
        rng = np.random.default_rng(seed)
        nin = d + features
        self.params = {
            "W1": rng.uniform(-1, 1, (nin, hidden)) * np.sqrt(6.0 / nin),
            "c1": np.zeros(hidden),
            "W2": rng.uniform(-1, 1, (hidden, hidden)) * np.sqrt(6.0 / hidden),
            "c2": np.zeros(hidden),
            "W3": rng.uniform(-1, 1, (hidden, d)) * np.sqrt(6.0 / hidden),
            "c3": np.zeros(d),
            "a": np.zeros(features + 1),
        }
        self.min_step = 1

    def _act(self, u):
        return np.tanh(u) if self.activation == "tanh" else u

    def time_features(self, n, N):
        t = np.asarray(n, dtype=np.float64) / N
        if t.ndim == 0:
            t = t[None]
        ang = t[:, None] * self.freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    def _forward(self, x, n, N):
        p = self.params
        x = np.atleast_2d(x)
        n_arr = np.broadcast_to(np.asarray(n), (x.shape[0],))
        ft = self.time_features(n_arr, N)
        zin = np.concatenate([x, ft], axis=1)
        a1 = self._act(zin @ p["W1"] + p["c1"])
        a2 = self._act(a1 @ p["W2"] + p["c2"])
        mlp = a2 @ p["W3"] + p["c3"]
        alpha = p["a"][0] + ft @ p["a"][1:]
        eps = alpha[:, None] * x + mlp
        return eps, (x, zin, a1, a2, ft)

    def epsilon(self, x, n, schedule):
        """Predicted injected noise at states x and step(s) n."""
        eps, _ = self._forward(x, n, schedule.N)
        return eps

    def score(self, x, n, schedule):
        """-eps_hat / sqrt(1 - Phi(n, 0)); defined for n >= 1."""
        n_arr = np.asarray(n)
        if np.any(n_arr < 1):
            raise ValueError("model score is undefined at step 0 (1 - Phi vanishes)")
        eps, _ = self._forward(x, n, schedule.N)
        ph = schedule.phi(n_arr if n_arr.ndim else int(n), 0)
        lam = 1.0 - np.asarray(ph, dtype=np.float64)
        if lam.ndim:
            lam = lam[:, None]
        return -eps / np.sqrt(lam)

    def score_fn(self, schedule):
        def fn(x, n):
            return self.score(x, n, schedule)

        fn.min_step = 1
        fn.label = "mlp"
        return fn

    def _grads(self, cache, g_out):
        """Parameter gradients given d(loss)/d(eps) = g_out."""
        p = self.params
        x, zin, a1, a2, ft = cache
        if self.activation == "tanh":
            d2 = 1.0 - a2**2
            d1 = 1.0 - a1**2
        else:
            d2 = np.ones_like(a2)
            d1 = np.ones_like(a1)
        g = {}
        g["W3"] = a2.T @ g_out
        g["c3"] = g_out.sum(axis=0)
        g2 = (g_out @ p["W3"].T) * d2
        g["W2"] = a1.T @ g2
        g["c2"] = g2.sum(axis=0)
        g1 = (g2 @ p["W2"].T) * d1
        g["W1"] = zin.T @ g1
        g["c1"] = g1.sum(axis=0)
        gdotx = np.einsum("md,md->m", g_out, x)
        g["a"] = np.concatenate([[gdotx.sum()], ft.T @ gdotx])
        return g


def train_dsm(model, dataset, schedule, cfg):
    """Fit the noise predictor by SGD with momentum on the weighted objective.

    Every step draws a fresh minibatch (x0 rows, uniform step n in
    1..N, fresh z), forms x_n = sqrt(Phi) x0 + sqrt(1 - Phi) z and
    minimizes 0.5 mean ||eps_hat - z||^2, which equals the
    lambda-weighted denoising loss under the eps parameterization.  The
    learning rate decays geometrically to lr * lr_decay over the run.

    Returns (model, trace) where trace[s] is the step-s minibatch loss.
    A non-finite loss aborts with TrainingFailureError carrying the step.
    With cfg.steps = 0 the model is returned unchanged and the trace is
    empty.
    """
    X0 = dataset.samples
    N = schedule.N
    if model.d != dataset.d:
        raise ValueError(f"model dimension {model.d} does not match dataset dimension {dataset.d}")
    rng = np.random.default_rng(cfg.seed)
    P = schedule._P
    vel = {k: np.zeros_like(v) for k, v in model.params.items()}
    trace = []
    for s in range(cfg.steps):
        cur_lr = cfg.lr * cfg.lr_decay ** (s / cfg.steps)
        idx = rng.integers(0, X0.shape[0], cfg.batch)
        ns = rng.integers(1, N + 1, cfg.batch)
        z = rng.standard_normal((cfg.batch, model.d))
        ph = P[ns]
        xt = np.sqrt(ph)[:, None] * X0[idx] + np.sqrt(1.0 - ph)[:, None] * z
        eps, cache = model._forward(xt, ns, N)
        resid = eps - z
        loss = 0.5 * float(np.mean(np.sum(resid**2, axis=1)))
        if not np.isfinite(loss):
            raise TrainingFailureError(f"loss became non-finite at step {s}", step=s)
        trace.append(loss)
        grads = model._grads(cache, resid / cfg.batch)
        for k in model.params:
            vel[k] = cfg.momentum * vel[k] - cur_lr * grads[k]
            model.params[k] += vel[k]
    return model, trace


def save_loss_trace(trace, path):
    with open(path, "w") as fh:
        fh.write("step,loss\n")
        for s, v in enumerate(trace):
            fh.write(f"{s},{float(v)!r}\n")


def weighted_score_error(model, spec, schedule, steps=None, M_per_step=500, seed=99):
    """Held-out relative L2 error of the model score against the oracle.

    sqrt(sum_n lambda(n) E||s_model - s_gm||^2 / sum_n lambda(n) E||s_gm||^2)
    over a grid of steps, fresh marginal samples per step.
    """
    if steps is None:
        steps = np.unique(np.linspace(50, schedule.N, 20).astype(int))
    rng = np.random.default_rng(seed)
    num = 0.0
    den = 0.0
    for n in steps:
        n = int(n)
        x0 = spec.sample(M_per_step, rng)
        ph = schedule.phi(n, 0)
        xt = np.sqrt(ph) * x0 + np.sqrt(1.0 - ph) * rng.standard_normal(x0.shape)
        s_true = gm_score(spec, xt, n, schedule)
        s_hat = model.score(xt, n, schedule)
        lam = 1.0 - ph
        num += lam * float(np.mean(np.sum((s_hat - s_true) ** 2, axis=1)))
        den += lam * float(np.mean(np.sum(s_true**2, axis=1)))
    return float(np.sqrt(num / den))


def _loss_on_batch(model, xt, ns, z, N):
    eps, cache = model._forward(xt, ns, N)
    resid = eps - z
    loss = 0.5 * float(np.mean(np.sum(resid**2, axis=1)))
    return loss, cache, resid


def finite_diff_check(model, schedule, n_probes=10, epsilon=1e-5, seed=0):
    """Compare backprop gradients against central finite differences.

    Probes are a fixed seeded minibatch (x0 standard normal, uniform
    steps, fresh z) of the training loss.  Returns a dict with
    "l2_rel" (norm of the gradient error over all parameters, relative
    to the finite-difference gradient norm) and "max_rel" (worst
    per-entry relative error among entries that carry at least 1e-6 of
    the largest gradient magnitude, so pure roundoff entries do not
    dominate).
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-6, 1e-3], got {epsilon}")
    N = schedule.N
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((n_probes, model.d))
    ns = rng.integers(1, N + 1, n_probes)
    z = rng.standard_normal((n_probes, model.d))
    ph = schedule._P[ns]
    xt = np.sqrt(ph)[:, None] * x0 + np.sqrt(1.0 - ph)[:, None] * z

    _, cache, resid = _loss_on_batch(model, xt, ns, z, N)
    analytic = model._grads(cache, resid / n_probes)

    sq_err = 0.0
    sq_fd = 0.0
    max_rel = 0.0
    gmax = max(float(np.abs(g).max()) for g in analytic.values())
    for key, p in model.params.items():
        flat = p.ravel()
        ga = analytic[key].ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp, _, _ = _loss_on_batch(model, xt, ns, z, N)
            flat[i] = orig - epsilon
            lm, _, _ = _loss_on_batch(model, xt, ns, z, N)
            flat[i] = orig
            gfd = (lp - lm) / (2.0 * epsilon)
            err = abs(ga[i] - gfd)
            sq_err += err**2
            sq_fd += gfd**2
            denom = max(abs(ga[i]), abs(gfd))
            if denom >= 1e-6 * gmax:
                max_rel = max(max_rel, err / denom)
    return {"l2_rel": float(np.sqrt(sq_err / sq_fd)), "max_rel": float(max_rel)}


def save_checkpoint(model, path):
    """Versioned binary checkpoint: header, layer shapes, little-endian f32."""
    order = ["W1", "c1", "W2", "c2", "W3", "c3", "a"]
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        act_code = _ACTIVATIONS.index(model.activation)
        fh.write(
            struct.pack(
                "<IIIIII", _CKPT_VERSION, model.d, model.hidden, model.features, act_code, len(order)
            )
        )
        for key in order:
            arr = model.params[key]
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    order = ["W1", "c1", "W2", "c2", "W3", "c3", "a"]
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        version, d, hidden, features, act_code, n_arrays = struct.unpack("<IIIIII", fh.read(24))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        if n_arrays != len(order) or act_code >= len(_ACTIVATIONS):
            raise ValueError(f"{path}: malformed checkpoint header")
        model = MlpScoreModel(d, hidden=hidden, features=features, activation=_ACTIVATIONS[act_code])
        for key in order:
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack("<" + "I" * ndim, fh.read(4 * ndim))
            expected = model.params[key].shape
            if tuple(shape) != expected:
                raise ValueError(f"{path}: array {key} has shape {shape}, expected {expected}")
            count = int(np.prod(shape)) if ndim else 1
            buf = fh.read(4 * count)
            if len(buf) != 4 * count:
                raise ValueError(f"{path}: truncated checkpoint")
            model.params[key] = np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float64)
    return model
