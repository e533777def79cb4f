"""Sparsifying transforms, top-k hard thresholding and ``S_k`` projections."""
from __future__ import annotations

import itertools
import math

import numpy as np

from .. import kernels
from ..diffengine import Tensor, as_tensor, no_grad, ops
from ..errors import BudgetError, ConfigError

_KINDS = ("identity", "discrete-gradient-2d")


def gradient_sigma_min(shape) -> float:
    """Smallest singular value of the unscaled anchored gradient stack.

    ``D^T D`` is the Neumann grid Laplacian (eigenvalues
    ``4 sin^2(pi p / 2H) + 4 sin^2(pi q / 2W)``); the mean row lifts the
    constant mode to eigenvalue 1.
    """
    h, w = shape
    side = max(h, w)
    lap = 4.0 * math.sin(math.pi / (2.0 * side)) ** 2 if side > 1 else math.inf
    return math.sqrt(min(1.0, lap))


class SparsityModel:
    """``Phi`` with sparsity level ``k``.

    ``discrete-gradient-2d`` stacks horizontal and vertical forward
    differences (no wrap) and one mean row ``1^T f / sqrt(n)``, then divides
    by the smallest singular value so that ``||Phi^+||_2 = 1``. The mean row
    makes ``Phi`` injective; without it constants are in the null space.
    """

    def __init__(self, kind: str, k: int, shape):
        if kind not in _KINDS:
            raise ConfigError(f"unknown sparsity transform {kind!r}; expected one of {_KINDS}")
        if int(k) <= 0:
            raise ConfigError("sparsity level k must be positive")
        self.kind, self.k = kind, int(k)
        self.shape = tuple(int(s) for s in shape)
        self.n = int(np.prod(self.shape))
        if kind == "identity":
            self.l = self.n
            self.scale = 1.0
        else:
            if len(self.shape) != 2:
                raise ConfigError(f"discrete-gradient-2d needs a 2-D shape, got {self.shape}")
            h, w = self.shape
            self.l = h * (w - 1) + (h - 1) * w + 1
            self.scale = 1.0 / gradient_sigma_min(self.shape)
        if self.k > self.l:
            raise ConfigError(f"k={self.k} exceeds transform length {self.l}")

    def sparsify(self, f) -> Tensor:
        """``c = Phi f`` for ``[B, n]`` (or ``[n]``) input; differentiable."""
        f = as_tensor(f)
        single = f.ndim == 1
        if single:
            f = ops.reshape(f, (1, f.shape[0]))
        if f.shape[-1] != self.n:
            raise ConfigError(f"sparsify: expected width {self.n}, got {f.shape[-1]}")
        if self.kind == "identity":
            c = f
        else:
            b = f.shape[0]
            h, w = self.shape
            img = ops.reshape(f, (b, h, w))
            parts = []
            if w > 1:
                dx = ops.sub(img[:, :, 1:], img[:, :, :-1])
                parts.append(ops.reshape(dx, (b, h * (w - 1))))
            if h > 1:
                dy = ops.sub(img[:, 1:, :], img[:, :-1, :])
                parts.append(ops.reshape(dy, (b, (h - 1) * w)))
            parts.append(ops.mul(ops.sum(f, axis=-1, keepdims=True), 1.0 / math.sqrt(self.n)))
            c = ops.mul(ops.concat(parts, axis=-1), self.scale)
        return ops.reshape(c, (self.l,)) if single else c

    def matrix(self) -> np.ndarray:
        """Dense ``[l, n]`` matrix of ``Phi``."""
        with no_grad():
            return self.sparsify(Tensor(np.eye(self.n))).data.T.copy()

    def penalty(self, f) -> Tensor:
        """Row-wise ``||Phi f - topk(Phi f)||_1``.

        The thresholded target is a constant of the step, so the subgradient
        is ``sign(c)`` off the support and zero on it.
        """
        c = self.sparsify(f)
        target = project_topk(c.data, self.k)
        return ops.sum(ops.abs(ops.sub(c, target)), axis=-1)

    def descriptor(self) -> dict:
        return {"kind": self.kind, "k": self.k, "shape": list(self.shape)}


def project_topk(c, k: int) -> np.ndarray:
    """Keep the ``k`` largest-magnitude entries per row; ties go to the lowest index."""
    if int(k) <= 0:
        raise ConfigError("k must be positive")
    c = np.asarray(c.data if isinstance(c, Tensor) else c, dtype=np.float64)
    if k > c.shape[-1]:
        raise ConfigError(f"k={k} exceeds length {c.shape[-1]}")
    return np.where(kernels.topk_mask(c, k), c, 0.0)


def topk_residual(c, k: int) -> np.ndarray:
    """``||c - topk(c)||_1`` row-wise, without building a graph."""
    c = np.asarray(c, dtype=np.float64)
    return np.abs(c - project_topk(c, k)).sum(axis=-1)


def support_bases(phi: np.ndarray, s: int, budget: int = 10**6):
    """Orthonormal bases of ``{v : supp(Phi v) within T}`` for every ``|T| = s``.

    Returns ``(supports, bases)`` where ``bases`` is ``[S, n, d]``. When the
    subspace dimension varies between supports the narrower bases are padded
    with zero columns, which leaves projections unchanged.
    """
    phi = np.asarray(phi, dtype=np.float64)
    l, n = phi.shape
    if not 1 <= s <= l:
        raise ConfigError(f"support size {s} outside [1, {l}]")
    count = math.comb(l, s)
    if count > budget:
        raise BudgetError(f"C({l}, {s}) = {count} supports exceeds the budget {budget}; "
                          "use sampled supports instead")
    supports = list(itertools.combinations(range(l), s))
    square = l == n and abs(np.linalg.det(phi)) > 0
    if square:
        inv = np.linalg.inv(phi)
    blocks, dims = [], []
    for t in supports:
        if square:
            q, _ = np.linalg.qr(inv[:, list(t)])
        else:
            rest = np.delete(phi, list(t), axis=0)
            _, sv, vt = np.linalg.svd(rest, full_matrices=True)
            rank = int((sv > 1e-10 * max(sv.max(initial=0.0), 1.0)).sum())
            q = vt[rank:].T
        blocks.append(q)
        dims.append(q.shape[1])
    d = max(dims)
    bases = np.zeros((len(supports), n, d))
    for i, q in enumerate(blocks):
        bases[i, :, :q.shape[1]] = q
    return np.array(supports, dtype=np.int64), bases, np.array(dims)


def project_sk(x, model: SparsityModel, budget: int = 10**6) -> np.ndarray:
    """Exact nearest point of each row of ``x`` in ``S_k`` (signal domain)."""
    _, bases, _ = support_bases(model.matrix(), model.k, budget)
    proj, _ = kernels.union_projection(np.asarray(x, dtype=np.float64).reshape(-1, model.n), bases)
    return proj
