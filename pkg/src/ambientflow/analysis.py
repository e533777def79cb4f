"""Metrics and theory checks: exact empirical W1, the projection lemma, RIC
estimation, the Theorem-2 style bound, grid KL, mode coverage, RMSE and SSIM.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.spatial.distance import cdist
from scipy.special import logsumexp
from scipy.stats import norm

from . import kernels
from .errors import BudgetError, ConfigError, DomainError, UsageError
from .imaging import support_bases

W1_EXACT_CAP = 4096
W1_ENTROPIC_CAP = 8192

# -- Wasserstein-1 ------------------------------------------------------------


@dataclass
class W1Result:
    value: float
    exact: bool
    n: int
    method: str


def _as_set(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1:
        raise UsageError(f"sample set must be [N, d] with N >= 1, got {x.shape}")
    return x


def pairwise_cost(x, y) -> np.ndarray:
    # direct differences: the |x|^2 + |y|^2 - 2xy expansion loses ~1e-8 near zero
    return cdist(x, y)


def sinkhorn_w1(cost: np.ndarray, reg: float, iters: int = 5000, tol: float = 1e-9) -> float:
    """Entropic OT cost between uniform marginals; an upper bound of exact W1.

    Scaling-form iterations (two mat-vecs each); the kernel is shifted by the
    row minima so it cannot underflow to an all-zero row.
    """
    n = cost.shape[0]
    shift = cost.min(axis=1, keepdims=True)
    K = np.exp(-(cost - shift) / reg)
    a = np.full(n, 1.0 / n)
    u = np.ones(n)
    v = np.ones(n)
    for _ in range(iters):
        v = a / (K.T @ u + 1e-300)
        u_new = a / (K @ v + 1e-300)
        if np.max(np.abs(u_new - u) / u_new) < tol:
            u = u_new
            break
        u = u_new
    plan = u[:, None] * K * v[None, :]
    plan /= plan.sum()
    return float((plan * cost).sum())


def w1_report(x, y, cap: int = W1_EXACT_CAP) -> W1Result:
    """W1 between equal-size empirical sets.

    Exact (shortest augmenting path assignment) for ``N <= cap``; above it
    an entropic approximation is returned and flagged ``exact=False``.
    """
    x, y = _as_set(x), _as_set(y)
    if x.shape != y.shape:
        raise UsageError(f"equal-size sets of equal dimension required, got {x.shape} and {y.shape}")
    n = x.shape[0]
    cost = None
    if n <= cap:
        cost = pairwise_cost(x, y)
        cols = kernels.linear_assignment(cost)
        return W1Result(float(cost[np.arange(n), cols].mean()), True, n, "assignment")
    if n > W1_ENTROPIC_CAP:
        raise BudgetError(f"N={n} exceeds the entropic cap {W1_ENTROPIC_CAP}; subsample first")
    cost = pairwise_cost(x, y)
    reg = 0.005 * float(np.median(cost)) + 1e-12
    return W1Result(sinkhorn_w1(cost, reg), False, n, f"sinkhorn(reg={reg:.3g})")


def w1_empirical(x, y, cap: int = W1_EXACT_CAP) -> float:
    return w1_report(x, y, cap).value


def brute_force_w1(x, y) -> float:
    """Minimum over all N! matchings (tiny N only; test oracle)."""
    import itertools
    x, y = _as_set(x), _as_set(y)
    cost = pairwise_cost(x, y)
    n = len(x)
    return min(cost[np.arange(n), list(p)].mean() for p in itertools.permutations(range(n)))

# -- projection lemma -----------------------------------------------------------


@dataclass
class ProjectionLemmaResult:
    w1: float
    mean_projection_distance: float
    equal: bool


def check_projection_lemma(x, sparsity, tol: float = 1e-9, budget: int = 10**6) -> ProjectionLemmaResult:
    """Compare assignment-W1(X, proj X) with the mean distance ``||x - proj x||``.

    ``proj`` is the exact nearest point in ``S_k`` found by enumerating
    supports, so the identity matching is optimal and both sides agree.
    """
    x = _as_set(x)
    _, bases, _ = support_bases(sparsity.matrix(), sparsity.k, budget)
    proj, _ = kernels.union_projection(x, bases)
    w1 = w1_empirical(x, proj, cap=max(W1_EXACT_CAP, len(x)))
    mean = float(np.linalg.norm(x - proj, axis=1).mean())
    return ProjectionLemmaResult(w1, mean, abs(w1 - mean) <= tol * max(1.0, mean))

# -- restricted isometry ----------------------------------------------------------


@dataclass
class RicReport:
    deltas: dict  # s -> delta_s
    supports: dict  # s -> number of supports examined
    coverage: dict = field(default_factory=dict)  # s -> fraction of supports examined

    @property
    def rip_satisfied(self) -> bool:
        ks = sorted(self.deltas)
        return len(ks) == 3 and sum(self.deltas.values()) < 1.0


def _delta_from_extremes(lo, hi) -> float:
    return float(max(np.max(1.0 - lo), np.max(hi - 1.0)))


def ric_extremes(H, phi, s: int, budget: int = 10**6):
    """Per-support min/max eigenvalues of ``Q_T^T H^T H Q_T``."""
    H = np.asarray(H, dtype=np.float64)
    _, bases, dims = support_bases(phi, s, budget)
    gram = H.T @ H
    if np.all(dims == dims[0]):
        return kernels.restricted_extremes(bases, gram)
    lo, hi = np.empty(len(dims)), np.empty(len(dims))
    for i, d in enumerate(dims):
        if d == 0:
            lo[i], hi[i] = 1.0, 1.0
            continue
        lo[i], hi[i] = kernels.restricted_extremes(bases[i:i + 1, :, :d], gram)
        lo[i], hi[i] = float(lo[i]), float(hi[i])
    return lo, hi


def ric_estimate(H, phi, s: int, budget: int = 10**6) -> float:
    """Exhaustive ``delta_s``: worst isometry defect over all ``s``-supports of ``Phi``.

    Raises :class:`BudgetError` when ``C(l, s)`` exceeds ``budget``; use
    :func:`ric_sampled` then.
    """
    lo, hi = ric_extremes(H, phi, s, budget)
    return _delta_from_extremes(lo, hi)


def ric_sampled(H, phi, s: int, count: int, rng: np.random.Generator) -> tuple[float, float]:
    """Lower estimate of ``delta_s`` from ``count`` random supports, with coverage."""
    H = np.asarray(H, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    l, n = phi.shape
    if l != n:
        raise ConfigError("sampled RIC supports a square invertible Phi only")
    inv = np.linalg.inv(phi)
    seen = {tuple(sorted(rng.choice(l, s, replace=False).tolist())) for _ in range(count)}
    bases = np.stack([np.linalg.qr(inv[:, list(t)])[0] for t in sorted(seen)])
    lo, hi = kernels.restricted_extremes(bases, H.T @ H)
    return _delta_from_extremes(lo, hi), len(seen) / math.comb(l, s)


def ric_report(H, phi, k: int, budget: int = 10**6) -> RicReport:
    deltas, counts = {}, {}
    for s in (k, 2 * k, 3 * k):
        deltas[s] = ric_estimate(H, phi, s, budget)
        counts[s] = math.comb(np.asarray(phi).shape[0], s)
    return RicReport(deltas, counts, {s: 1.0 for s in deltas})


def thm2_bound(delta_k: float, h_norm: float, eps: float, eps_prime: float) -> float:
    """``(1 + ||H||_2 / sqrt(1 - delta_k)) (eps + eps')``."""
    if not delta_k < 1:
        raise DomainError(f"delta_k = {delta_k} >= 1: the bound is undefined")
    if h_norm < 0 or eps < 0 or eps_prime < 0:
        raise DomainError("norms and tolerances must be non-negative")
    total = eps + eps_prime
    # distributed form: keeps decimal inputs such as (0.36, 2, 0.1, 0) exact in binary
    return total + (h_norm / math.sqrt(1.0 - delta_k)) * total

# -- 2-D density diagnostics ---------------------------------------------------------


@dataclass
class GridSpec:
    lim: float = 4.0
    cells: int = 400

    @property
    def h(self) -> float:
        return 2.0 * self.lim / self.cells

    def points(self) -> np.ndarray:
        c = -self.lim + (np.arange(self.cells) + 0.5) * self.h
        xx, yy = np.meshgrid(c, c, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel()], axis=1)


def grid_mass(log_p, grid: GridSpec = GridSpec()) -> float:
    """Midpoint-rule integral of ``exp(log_p)`` over the grid."""
    return float(np.exp(log_p(grid.points())).sum() * grid.h ** 2)


def mixture_tail_mass(centers, sigma: float, lim: float) -> float:
    """Mass of an equal-weight isotropic mixture outside ``[-lim, lim]^2``."""
    c = np.asarray(centers, dtype=np.float64)
    inside = np.prod(norm.cdf((lim - c) / sigma) - norm.cdf((-lim - c) / sigma), axis=1)
    return float(1.0 - inside.mean())


@dataclass
class KLResult:
    kl: float
    reference_mass: float
    model_mass: float
    tail_mass: float


def kl_grid_2d(log_q, model, grid: GridSpec = GridSpec(), bins: int = 80) -> KLResult:
    """``KL(q || p)`` by a midpoint Riemann sum of ``q (log q - log p)``.

    ``log_q`` is the analytic reference log density. ``model`` is either a
    log density callable or an ``[N, 2]`` sample array, in which case ``p``
    is a ``bins x bins`` histogram with a floor of half a count per cell.
    """
    pts = grid.points()
    lq = log_q(pts)
    if callable(model):
        lp = model(pts)
    else:
        s = np.asarray(model, dtype=np.float64)
        edges = np.linspace(-grid.lim, grid.lim, bins + 1)
        hist, _, _ = np.histogram2d(s[:, 0], s[:, 1], bins=[edges, edges])
        hist = np.maximum(hist, 0.5)
        dens = hist / (hist.sum() * (edges[1] - edges[0]) ** 2)
        ix = np.clip(((pts + grid.lim) / (edges[1] - edges[0])).astype(int), 0, bins - 1)
        lp = np.log(dens[ix[:, 0], ix[:, 1]])
    q = np.exp(lq)
    area = grid.h ** 2
    return KLResult(float((q * (lq - lp)).sum() * area), float(q.sum() * area),
                    float(np.exp(lp).sum() * area), float(max(0.0, 1.0 - q.sum() * area)))


@dataclass
class ModeReport:
    shares: np.ndarray
    capture: float
    mode_std: np.ndarray


def mode_report(samples, centers, radius: float) -> ModeReport:
    """Nearest-center shares, fraction within ``radius`` of some center, and
    per-mode per-coordinate RMS spread around the center."""
    x = _as_set(samples)
    c = np.asarray(centers, dtype=np.float64)
    d = pairwise_cost(x, c)
    nearest = d.argmin(axis=1)
    dmin = d[np.arange(len(x)), nearest]
    shares = np.bincount(nearest, minlength=len(c)) / len(x)
    std = np.full(len(c), np.nan)
    for i in range(len(c)):
        sel = nearest == i
        if sel.any():
            std[i] = math.sqrt(float((dmin[sel] ** 2).mean()) / x.shape[1])
    return ModeReport(shares, float((dmin < radius).mean()), std)

# -- image quality ---------------------------------------------------------------


def rmse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def ssim(a, b, window: int = 7, data_range: float | None = None, k1: float = 0.01,
         k2: float = 0.03) -> float:
    """Mean SSIM with a uniform ``window x window`` filter; ``L`` defaults to the range of ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise UsageError(f"ssim needs two 2-D images of equal shape, got {a.shape}, {b.shape}")
    L = float(a.max() - a.min()) if data_range is None else float(data_range)
    if L <= 0:
        L = 1.0
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    mu_a = uniform_filter(a, window, mode="reflect")
    mu_b = uniform_filter(b, window, mode="reflect")
    n = window * window
    cov_norm = n / (n - 1)
    va = cov_norm * (uniform_filter(a * a, window, mode="reflect") - mu_a ** 2)
    vb = cov_norm * (uniform_filter(b * b, window, mode="reflect") - mu_b ** 2)
    vab = cov_norm * (uniform_filter(a * b, window, mode="reflect") - mu_a * mu_b)
    s = ((2 * mu_a * mu_b + c1) * (2 * vab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2))
    pad = (window - 1) // 2
    if min(a.shape) > 2 * pad:
        s = s[pad:-pad, pad:-pad] if pad else s
    return float(s.mean())

# -- CSV emission --------------------------------------------------------------------


def metric_rows_csv(rows, config_hash: str, seed: int) -> str:
    """RFC-4180 CSV with header ``metric,value,config_hash,seed``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["metric", "value", "config_hash", "seed"])
    for name, value in rows:
        w.writerow([name, repr(float(value)) if isinstance(value, (float, np.floating)) else value,
                    config_hash, seed])
    return buf.getvalue()
