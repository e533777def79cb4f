"""Training objectives: flow NLL, the importance-weighted ambient bound, the
ELBO and the regularised practical objective.

All bounds are returned as quantities to *maximise*; the trainer negates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .diffengine import Streams, Tensor, as_tensor, no_grad, ops
from .errors import ConfigError, NumericError
from .imaging import topk_residual

logavgexp = ops.logavgexp


@dataclass(frozen=True)
class ObjectiveConfig:
    M: int = 4
    lam: float = 1.0
    mu: float = 0.0
    k: int | None = None
    batch_size: int = 256

    def __post_init__(self):
        if int(self.M) < 1:
            raise ConfigError("M must be >= 1")
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ConfigError("lambda must be finite and >= 0")
        if not (np.isfinite(self.mu) and self.mu >= 0):
            raise ConfigError("mu must be finite and >= 0")
        if self.mu > 0 and self.k is None:
            raise ConfigError("a sparsity weight mu > 0 needs a sparsity level k")


def nll(flow, batch) -> Tensor:
    """Mean negative log-likelihood of ``batch`` under ``flow``."""
    return ops.neg(ops.mean(flow.log_prob(as_tensor(batch))))


@dataclass
class AmbientTerms:
    """Per-sample terms, each ``[M, B]``, plus the posterior draws ``[M*B, n]``."""

    log_prior: Tensor
    log_noise: Tensor
    log_post: Tensor
    samples: Tensor


def draw_zeta(streams: Streams, shape, step: int) -> np.ndarray:
    """Latent draws for one objective evaluation, keyed by the step index."""
    return streams.normal("zeta", shape, step)


def ambient_terms(prior, posterior, meas, g, M: int, zeta=None, *, streams: Streams | None = None,
                  step: int = 0) -> AmbientTerms:
    """Evaluate the three log terms at ``f_i = h(zeta_i; g)`` for ``i <= M``."""
    if int(M) < 1:
        raise ConfigError("M must be >= 1")
    g = as_tensor(g)
    if g.ndim == 1:
        g = ops.reshape(g, (1, g.shape[0]))
    b, n = g.shape[0], posterior.dim
    if zeta is None:
        if streams is None:
            raise ConfigError("either zeta or streams is required")
        zeta = draw_zeta(streams, (M, b, n), step)
    zeta = np.asarray(zeta.data if isinstance(zeta, Tensor) else zeta, dtype=np.float64)
    if zeta.shape != (M, b, n):
        raise ConfigError(f"zeta has shape {zeta.shape}, expected {(M, b, n)}")
    g_rep = ops.reshape(ops.broadcast_to(ops.reshape(g, (1, b, g.shape[1])), (M, b, g.shape[1])),
                        (M * b, g.shape[1]))
    terms = {}
    try:
        f, terms["log_post"] = posterior.sample_with_log_prob(Tensor(zeta.reshape(M * b, n)), g_rep)
    except NumericError as exc:
        raise NumericError(f"posterior term log p_phi(f|g): {exc}") from exc
    try:
        terms["log_prior"] = prior.log_prob(f)
    except NumericError as exc:
        raise NumericError(f"prior term log p_theta(f): {exc}") from exc
    try:
        terms["log_noise"] = meas.noise_log_density(ops.sub(g_rep, meas.apply(f)))
    except NumericError as exc:
        raise NumericError(f"noise term log q_n(g - Hf): {exc}") from exc
    shaped = {k: ops.reshape(v, (M, b)) for k, v in terms.items()}
    return AmbientTerms(shaped["log_prior"], shaped["log_noise"], shaped["log_post"], f)


def combine(terms: AmbientTerms, lam: float = 1.0) -> Tensor:
    """Batch mean of ``logavgexp_i [log p + lam log q_n - log p_phi]``."""
    w = ops.sub(ops.add(terms.log_prior, ops.mul(terms.log_noise, lam)), terms.log_post)
    return ops.mean(logavgexp(w, axis=0))


def ambient_bound(prior, posterior, meas, g, M: int, zeta=None, *, streams=None, step=0) -> Tensor:
    """Importance-weighted lower bound ``L_M`` on ``E log q_g``; ``M = 1`` is the ELBO."""
    return combine(ambient_terms(prior, posterior, meas, g, M, zeta, streams=streams, step=step))


def elbo(prior, posterior, meas, g, zeta=None, *, streams=None, step=0) -> Tensor:
    return ambient_bound(prior, posterior, meas, g, 1, zeta, streams=streams, step=step)


@dataclass
class ObjectiveValue:
    value: Tensor
    bound: float
    penalty: float
    log_prior: float
    log_noise: float
    log_post: float


def practical_objective(prior, posterior, meas, g, cfg: ObjectiveConfig, sparsity=None,
                        zeta=None, *, streams=None, step=0) -> ObjectiveValue:
    """``L_M`` with the noise term weighted by ``lam`` inside the logavgexp,
    minus ``mu`` times the mean top-k residual of the posterior draws."""
    terms = ambient_terms(prior, posterior, meas, g, cfg.M, zeta, streams=streams, step=step)
    value = combine(terms, cfg.lam)
    pen = 0.0
    if cfg.mu > 0:
        if sparsity is None:
            raise ConfigError("mu > 0 requires a sparsity model")
        if cfg.k is not None and cfg.k != sparsity.k:
            raise ConfigError(f"objective k={cfg.k} disagrees with sparsity model k={sparsity.k}")
        p = ops.mean(sparsity.penalty(terms.samples))
        pen = p.item()
        value = ops.sub(value, ops.mul(p, cfg.mu))
    w = terms.log_prior.data + terms.log_noise.data - terms.log_post.data
    bound = float(np.mean(logsumexp(w, axis=0) - np.log(cfg.M)))
    return ObjectiveValue(value, bound, pen, float(terms.log_prior.data.mean()),
                          float(terms.log_noise.data.mean()), float(terms.log_post.data.mean()))


def constraint_monitor(posterior, sparsity, g, count: int, streams: Streams, step: int = 0) -> float:
    """Empirical ``E_g E_{f ~ p_phi(.|g)} ||Phi f - topk(Phi f)||_1`` (the eps level)."""
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    b = g.shape[0]
    zeta = streams.normal("monitor", (count * b, posterior.dim), step)
    with no_grad():
        f, _ = posterior.forward(Tensor(zeta), Tensor(np.repeat(g, count, axis=0)))
        c = sparsity.sparsify(f).data
    return float(topk_residual(c, sparsity.k).mean())


def bound_samples(prior, posterior, meas, g, M: int, streams: Streams, index: int = 0,
                  chunk: int = 4096) -> np.ndarray:
    """Per-measurement ``logavgexp`` values of ``L_M`` (no graph), ``[B]``."""
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    out = np.empty(len(g))
    rng = streams.generator(f"bound.M{M}", index)
    with no_grad():
        for start in range(0, len(g), chunk):
            gb = g[start:start + chunk]
            zeta = rng.standard_normal((M, len(gb), posterior.dim))
            t = ambient_terms(prior, posterior, meas, gb, M, zeta)
            w = t.log_prior.data + t.log_noise.data - t.log_post.data
            out[start:start + chunk] = logsumexp(w, axis=0) - np.log(M)
    return out


def bound_ordering(prior, posterior, meas, g, Ms=(1, 4, 16), streams: Streams | None = None,
                   index: int = 0) -> dict:
    """Monte Carlo estimates of ``L_M`` with standard errors for each ``M``."""
    streams = streams or Streams(0)
    res = {}
    for M in Ms:
        vals = bound_samples(prior, posterior, meas, g, int(M), streams, index)
        res[int(M)] = (float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals))))
    return res
