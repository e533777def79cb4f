"""Reconstruction with a trained flow prior: CSGM MAP, annealed Langevin
posterior sampling, ensemble moments and the posterior-network consistency study.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import kernels
from .diffengine import ParameterStore, Streams, Tensor, as_tensor, backward, no_grad, ops
from .errors import ConfigError, NumericError, UsageError
from .flowcore import ActNorm, FlowModel, LUMix

# -- MAP (CSGM) ----------------------------------------------------------------


@dataclass
class MapResult:
    f: np.ndarray
    z: np.ndarray
    objective: float
    residual_norm: float
    trace: np.ndarray  # best-so-far objective per iteration, [steps + 1]
    restart: int


def csgm_objective(prior: FlowModel, meas, g, z: Tensor, lam: float) -> Tensor:
    """Row-wise ``||g - H G(z)||^2 + lam ||z||^2`` for a batch of latents ``[R, n]``."""
    x, _ = prior.forward(z)
    r = ops.sub(as_tensor(g), meas.apply(x))
    return ops.add(ops.sum(ops.square(r), axis=-1), ops.mul(ops.sum(ops.square(z), axis=-1), lam))


def map_csgm(prior: FlowModel, meas, g, lam: float, *, steps: int = 300, lr: float = 0.05,
             restarts: int = 3, init_scale: float = 1.0, streams: Streams | None = None,
             index: int = 0) -> MapResult:
    """Adam descent on the latent from ``z0 = 0`` plus ``restarts`` random starts.

    All starts run as one batch (Adam is elementwise, so they do not
    interact); the start with the lowest objective is kept, and within it
    the best iterate seen.
    """
    if lam < 0 or not math.isfinite(lam):
        raise ConfigError("map-lambda must be finite and >= 0")
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    n = prior.dim
    z0 = np.zeros((1 + restarts, n))
    if restarts:
        if streams is None:
            raise ConfigError("random restarts need an RNG stream")
        z0[1:] = init_scale * streams.normal("map.restarts", (restarts, n), index)
    z = z0.copy()
    m = np.zeros_like(z)
    v = np.zeros_like(z)
    b1, b2, eps = 0.9, 0.999, 1e-8
    best_val = np.full(len(z), np.inf)
    best_z = z.copy()
    trace = np.empty((steps + 1, len(z)))
    for t in range(steps + 1):
        zt = Tensor(z, requires_grad=True)
        try:
            with prior.params.frozen():
                vals = csgm_objective(prior, meas, g[None, :], zt, lam)
                backward(ops.sum(vals))
        except NumericError as exc:
            raise NumericError(f"map_csgm diverged at iteration {t}; "
                               f"best objectives so far {best_val.tolist()}: {exc}") from exc
        better = vals.data < best_val
        best_val = np.where(better, vals.data, best_val)
        best_z[better] = z[better]
        trace[t] = best_val
        if t == steps:
            break
        grad = zt.grad
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        z = z - lr * (m / (1 - b1 ** (t + 1))) / (np.sqrt(v / (1 - b2 ** (t + 1))) + eps)
    k = int(np.argmin(best_val))
    with no_grad():
        f = prior.forward(Tensor(best_z[k:k + 1]))[0].data[0]
        resid = float(np.linalg.norm(g - meas.apply(Tensor(f)).data))
    return MapResult(f, best_z[k].copy(), float(best_val[k]), resid, trace[:, k].copy(), k)


def tune_map_lambda(prior, meas, g_val, f_val, grid, **kwargs) -> tuple[float, list[float]]:
    """Pick the map-lambda with the best RMSE on one validation image."""
    errs = []
    for lam in grid:
        res = map_csgm(prior, meas, g_val, float(lam), **kwargs)
        errs.append(float(np.sqrt(np.mean((res.f - np.asarray(f_val).reshape(-1)) ** 2))))
    return float(grid[int(np.argmin(errs))]), errs


def least_norm(meas, g, rcond: float = 1e-10) -> np.ndarray:
    """Minimum-norm least-squares solution ``H^+ g`` (baseline)."""
    pinv = np.linalg.pinv(meas.matrix(), rcond=rcond)
    return np.atleast_2d(np.asarray(g, dtype=np.float64)) @ pinv.T

# -- annealed Langevin dynamics --------------------------------------------------


@dataclass
class LangevinSchedule:
    """Decreasing noise ladder; level ``i`` runs ``steps`` updates with step
    size ``eps * (sigma_i / sigma_0)^2``."""

    sigmas: np.ndarray
    steps: int = 50
    eps: float = 1e-3
    anneal_likelihood: bool = True

    def __post_init__(self):
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64).reshape(-1)
        if self.sigmas.size == 0 or np.any(self.sigmas <= 0) or np.any(np.diff(self.sigmas) > 0):
            raise ConfigError("noise ladder must be positive and non-increasing")
        if self.steps < 1 or self.eps <= 0:
            raise ConfigError("need steps >= 1 and eps > 0")

    @classmethod
    def geometric(cls, sigma_max: float, sigma_min: float = 0.01, levels: int = 10,
                  steps: int = 50, eps: float | None = None) -> "LangevinSchedule":
        sig = np.geomspace(sigma_max, sigma_min, levels)
        return cls(sig, steps, 0.05 * sigma_max ** 2 if eps is None else eps)

    def step_sizes(self) -> np.ndarray:
        return self.eps * (self.sigmas / self.sigmas[0]) ** 2

    def record(self) -> dict:
        return {"sigmas": self.sigmas.tolist(), "steps": self.steps, "eps": self.eps,
                "anneal_likelihood": self.anneal_likelihood}


@dataclass
class PosteriorEnsemble:
    samples: np.ndarray
    provenance: str
    schedule: dict = field(default_factory=dict)


def posterior_score(prior: FlowModel, meas, g, f: np.ndarray, noise_var: float):
    """``grad_f [log p(f) - ||g - Hf||^2 / (2 noise_var)]`` row-wise."""
    ft = Tensor(f, requires_grad=True)
    with prior.params.frozen():
        lp = prior.log_prob(ft)
        r = ops.sub(as_tensor(g), meas.apply(ft))
        total = ops.sub(ops.sum(lp), ops.mul(ops.sum(ops.square(r)), 0.5 / noise_var))
        backward(total)
    return ft.grad


def ald_sample(prior: FlowModel, meas, g, count: int, schedule: LangevinSchedule,
               streams: Streams, *, index: int = 0, init=None) -> PosteriorEnsemble:
    """Unadjusted Langevin chains ``f += a grad log p(f|g) + sqrt(2a) xi`` down the ladder.

    Chains start from prior draws unless ``init`` is given. With
    ``anneal_likelihood`` the data term at level ``i`` uses variance
    ``sigma_n^2 + sigma_i^2``.
    """
    if count < 1:
        raise ConfigError("need at least one chain")
    g = np.asarray(g, dtype=np.float64).reshape(1, -1)
    if init is None:
        f = prior.sample(count, streams, "ald.init", index)
    else:
        f = np.array(init, dtype=np.float64).reshape(count, prior.dim)
    alphas = schedule.step_sizes()
    noise = streams.generator("ald.noise", index)
    for lvl, (sigma, a) in enumerate(zip(schedule.sigmas, alphas)):
        var = meas.sigma_n ** 2 + (sigma ** 2 if schedule.anneal_likelihood else 0.0)
        if var <= 0:
            raise ConfigError("noise-free measurements need anneal_likelihood")
        for _ in range(schedule.steps):
            try:
                score = posterior_score(prior, meas, g, f, var)
            except NumericError as exc:
                raise NumericError(f"ALD level {lvl} (sigma={sigma:.4g}): {exc}") from exc
            f = f + a * score + math.sqrt(2.0 * a) * noise.standard_normal(f.shape)
            if not np.isfinite(f).all():
                raise NumericError(f"ALD level {lvl} (sigma={sigma:.4g}): non-finite chain state")
    return PosteriorEnsemble(f, "ALD", schedule.record())


def mmse_and_std(ensemble) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel mean and ``(N-1)``-denominator standard deviation."""
    s = np.asarray(ensemble.samples if isinstance(ensemble, PosteriorEnsemble) else ensemble,
                   dtype=np.float64)
    if s.shape[0] < 2:
        raise UsageError("std maps need at least two samples")
    return s.mean(axis=0), s.std(axis=0, ddof=1)


def streaming_mmse_and_std(ensemble) -> tuple[np.ndarray, np.ndarray]:
    s = ensemble.samples if isinstance(ensemble, PosteriorEnsemble) else ensemble
    return kernels.streaming_moments(s)

# -- posterior network -------------------------------------------------------------


def posterior_net_sample(posterior, g, count: int, streams: Streams, index: int = 0) -> PosteriorEnsemble:
    if count < 1:
        raise ConfigError("need at least one sample")
    return PosteriorEnsemble(posterior.sample(g, count, streams, "posterior.net", index),
                             "posterior-network")


@dataclass
class ConsistencyReport:
    rows: list  # (g_index, log p_phi(f|g), log q_n(g - Hf) + log p_theta(f))
    slopes: np.ndarray


def ls_slope(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2:
        raise UsageError("a slope needs at least two points")
    xc = x - x.mean()
    den = float(xc @ xc)
    if den == 0:
        raise UsageError("all x values coincide; slope undefined")
    return float(xc @ (y - y.mean()) / den)


def posterior_consistency_scatter(prior, posterior, meas, g_list, count: int,
                                  streams: Streams) -> ConsistencyReport:
    """Paired scores of posterior-network draws and their least-squares slope per ``g``.

    For an exact posterior the second score equals the first plus
    ``log q_g(g)``, so the slope is 1.
    """
    if count < 2:
        raise UsageError("need at least two samples per measurement")
    rows, slopes = [], []
    for j, g in enumerate(np.atleast_2d(np.asarray(g_list, dtype=np.float64))):
        zeta = streams.normal("consistency", (count, posterior.dim), j)
        with no_grad():
            f, lq = posterior.sample_with_log_prob(Tensor(zeta), Tensor(np.repeat(g[None], count, 0)))
            joint = ops.add(meas.log_likelihood(Tensor(np.repeat(g[None], count, 0)), f),
                            prior.log_prob(f))
        x, y = lq.data, joint.data
        rows.extend((j, float(a), float(b)) for a, b in zip(x, y))
        slopes.append(ls_slope(x, y))
    return ConsistencyReport(rows, np.array(slopes))

# -- closed-form Gaussian constructions (oracles) ---------------------------------


def gaussian_flow(mean, cov) -> FlowModel:
    """A flow whose density is exactly ``N(mean, cov)``: ``x = W z + mean`` with
    ``W`` the Cholesky factor held in LU form."""
    mean = np.asarray(mean, dtype=np.float64)
    n = mean.size
    chol = np.linalg.cholesky(np.asarray(cov, dtype=np.float64))
    p, lower, upper = scipy.linalg.lu(chol)
    params = ParameterStore(0)
    diag = np.diag(upper)
    mix = LUMix(params, "b0.mix", n, perm=p, sign=np.sign(diag))
    mix.lower.data = np.tril(lower, -1)
    mix.upper.data = np.triu(upper, 1)
    mix.log_s.data = np.log(np.abs(diag))
    shift = ActNorm(params, "b0.actnorm", n)
    shift.shift.data = mean.copy()
    shift.initialized = True
    return FlowModel(n, [mix, shift], params)


def linear_gaussian_posterior(mean, cov, H, sigma_n):
    """Posterior ``N(A g + b, C)`` of ``f ~ N(mean, cov)`` given ``g = H f + n``.

    Returns ``(A, b, C)``.
    """
    mean = np.asarray(mean, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    prec = np.linalg.inv(cov) + H.T @ H / sigma_n ** 2
    C = np.linalg.inv(prec)
    C = 0.5 * (C + C.T)
    A = C @ H.T / sigma_n ** 2
    b = C @ np.linalg.solve(cov, mean)
    return A, b, C


def log_evidence(mean, cov, H, sigma_n, g) -> np.ndarray:
    """``log q_g(g)`` for the linear-Gaussian model."""
    H = np.asarray(H, dtype=np.float64)
    S = H @ cov @ H.T + sigma_n ** 2 * np.eye(H.shape[0])
    r = np.atleast_2d(g) - H @ mean
    _, logdet = np.linalg.slogdet(S)
    quad = np.einsum("bi,ij,bj->b", r, np.linalg.inv(S), r)
    return -0.5 * (quad + logdet + H.shape[0] * math.log(2 * math.pi))


class AffineGaussianPosterior:
    """``h(zeta; g) = A g + b + L zeta``: the exact linear-Gaussian posterior,
    exposing the conditional-flow interface."""

    def __init__(self, A, b, C):
        self.A = np.asarray(A, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.L = np.linalg.cholesky(C)
        self.dim, self.cond_dim = self.A.shape
        self.logdet = float(np.log(np.diag(self.L)).sum())
        self.params = ParameterStore(0)

    def _mean(self, g: Tensor) -> Tensor:
        return ops.add(ops.matmul(g, self.A.T), self.b)

    def forward(self, zeta, g):
        zeta = as_tensor(zeta)
        f = ops.add(self._mean(as_tensor(g)), ops.matmul(zeta, self.L.T))
        return f, Tensor(np.full(zeta.shape[0], self.logdet))

    def inverse(self, f, g):
        f = as_tensor(f)
        d = ops.sub(f, self._mean(as_tensor(g)))
        zeta = ops.transpose(ops.solve(self.L, ops.transpose(d)))
        return zeta, Tensor(np.full(f.shape[0], -self.logdet))

    def log_prob(self, f, g):
        zeta, ld = self.inverse(f, g)
        return ops.add(ops.std_normal_logpdf(zeta), ld)

    def sample_with_log_prob(self, zeta, g):
        f, ld = self.forward(zeta, g)
        return f, ops.sub(ops.std_normal_logpdf(zeta), ld)

    def sample(self, g, count, streams, stream="posterior", index=0):
        zeta = streams.normal(stream, (count, self.dim), index)
        g = np.broadcast_to(np.asarray(g, dtype=np.float64).reshape(1, -1), (count, self.cond_dim))
        return self.forward(Tensor(zeta), Tensor(g))[0].data
