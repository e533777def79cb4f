"""Invertible building blocks.

Convention: ``forward`` maps latent -> data (the generative direction) and
``inverse`` maps data -> latent. Both return ``(output, logdet)`` where
``logdet`` is a ``[B]`` tensor holding log|det| of the Jacobian of the map
actually applied.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg

from ..diffengine import ParameterStore, Tensor, ops
from ..errors import ConfigError


def _batch_logdet(value: Tensor, batch: int) -> Tensor:
    return ops.broadcast_to(value, (batch,))


class Block:
    kind = "block"

    def forward(self, z: Tensor, cond: Tensor | None = None):
        raise NotImplementedError

    def inverse(self, x: Tensor, cond: Tensor | None = None):
        raise NotImplementedError

    def descriptor(self) -> dict:
        raise NotImplementedError


class MLP:
    """Two hidden tanh layers; the output layer starts at zero."""

    def __init__(self, params: ParameterStore, prefix: str, n_in: int, n_out: int,
                 width: int, rng: np.random.Generator, zero_out: bool = True):
        self.w1 = params.add(f"{prefix}.w1", rng.standard_normal((n_in, width)) / np.sqrt(max(n_in, 1)))
        self.b1 = params.add(f"{prefix}.b1", np.zeros(width))
        self.w2 = params.add(f"{prefix}.w2", rng.standard_normal((width, width)) / np.sqrt(width))
        self.b2 = params.add(f"{prefix}.b2", np.zeros(width))
        w3 = np.zeros((width, n_out)) if zero_out else rng.standard_normal((width, n_out)) * 0.01
        self.w3 = params.add(f"{prefix}.w3", w3)
        self.b3 = params.add(f"{prefix}.b3", np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        h = ops.tanh(ops.linear(x, self.w1, self.b1))
        h = ops.tanh(ops.linear(h, self.w2, self.b2))
        return ops.linear(h, self.w3, self.b3)


class AffineCoupling(Block):
    """Affine coupling: one half of the vector shifts/scales the other.

    The log-scale passes through ``alpha * tanh(. / alpha)`` so a single block
    can never expand or contract volume by more than ``exp(alpha)`` per
    coordinate.
    """

    kind = "affine-coupling"

    def __init__(self, params: ParameterStore, prefix: str, dim: int, width: int,
                 parity: int, rng: np.random.Generator, cond_width: int = 0,
                 alpha: float = 1.9):
        if dim < 2:
            raise ConfigError("affine coupling needs dim >= 2")
        self.dim, self.width, self.parity = dim, width, parity % 2
        self.cond_width, self.alpha = cond_width, alpha
        half = dim // 2
        self.n_keep = half if self.parity == 0 else dim - half
        self.n_move = dim - self.n_keep
        self.net = MLP(params, f"{prefix}.net", self.n_keep + cond_width, 2 * self.n_move, width, rng)

    def _split(self, v: Tensor):
        if self.parity == 0:
            return ops.split(v, [self.n_keep, self.n_move], axis=-1)
        move, keep = ops.split(v, [self.n_move, self.n_keep], axis=-1)
        return keep, move

    def _join(self, keep: Tensor, move: Tensor) -> Tensor:
        parts = [keep, move] if self.parity == 0 else [move, keep]
        return ops.concat(parts, axis=-1)

    def _scale_shift(self, keep: Tensor, cond: Tensor | None):
        if self.cond_width:
            if cond is None or cond.shape[-1] != self.cond_width:
                got = None if cond is None else cond.shape[-1]
                raise ConfigError(f"coupling expects conditioning width {self.cond_width}, got {got}")
            inp = ops.concat([keep, cond], axis=-1)
        else:
            inp = keep
        raw = self.net(inp)
        s_raw, t = ops.split(raw, [self.n_move, self.n_move], axis=-1)
        return ops.soft_clamp(s_raw, self.alpha), t

    def forward(self, z, cond=None):
        keep, move = self._split(z)
        s, t = self._scale_shift(keep, cond)
        out = ops.affine(move, ops.exp(s), t)
        return self._join(keep, out), ops.sum(s, axis=-1)

    def inverse(self, x, cond=None):
        keep, move = self._split(x)
        s, t = self._scale_shift(keep, cond)
        out = ops.mul(ops.sub(move, t), ops.exp(ops.neg(s)))
        return self._join(keep, out), ops.neg(ops.sum(s, axis=-1))

    def descriptor(self):
        return {"kind": self.kind, "dim": self.dim, "width": self.width, "parity": self.parity,
                "cond_width": self.cond_width, "alpha": self.alpha}


class Permutation(Block):
    kind = "channel-permutation"

    def __init__(self, perm):
        self.perm = np.asarray(perm, dtype=np.int64)
        if sorted(self.perm.tolist()) != list(range(self.perm.size)):
            raise ConfigError("permutation must contain each index exactly once")
        self.inv_perm = np.argsort(self.perm)

    def forward(self, z, cond=None):
        return z[..., self.perm], _batch_logdet(Tensor(0.0), z.shape[0])

    def inverse(self, x, cond=None):
        return x[..., self.inv_perm], _batch_logdet(Tensor(0.0), x.shape[0])

    def descriptor(self):
        return {"kind": self.kind, "perm": self.perm.tolist()}


class Squeeze(Permutation):
    """Space-to-channel reshuffle of a flattened ``(C, H, W)`` image."""

    kind = "squeeze"

    def __init__(self, image_shape):
        c, h, w = image_shape
        if h % 2 or w % 2:
            raise ConfigError(f"squeeze needs even spatial dims, got {(h, w)}")
        self.image_shape = (c, h, w)
        idx = np.arange(c * h * w).reshape(c, h // 2, 2, w // 2, 2)
        super().__init__(idx.transpose(0, 2, 4, 1, 3).reshape(-1))

    def descriptor(self):
        return {"kind": self.kind, "image_shape": list(self.image_shape)}


class ActNorm(Block):
    """Per-coordinate affine map, initialised from the first data batch."""

    kind = "actnorm"

    def __init__(self, params: ParameterStore, prefix: str, dim: int):
        self.dim = dim
        self.log_scale = params.add(f"{prefix}.log_scale", np.zeros(dim))
        self.shift = params.add(f"{prefix}.shift", np.zeros(dim))
        self.initialized = False

    def init_from(self, x: np.ndarray) -> None:
        """Set parameters so that ``inverse(x)`` is zero-mean, unit-variance."""
        x = np.asarray(x).reshape(-1, self.dim)
        std = x.std(axis=0)
        self.shift.data = x.mean(axis=0)
        self.log_scale.data = np.log(np.maximum(std, 1e-6))
        self.initialized = True

    def forward(self, z, cond=None):
        out = ops.affine(z, ops.exp(self.log_scale), self.shift)
        return out, _batch_logdet(ops.sum(self.log_scale), z.shape[0])

    def inverse(self, x, cond=None):
        out = ops.mul(ops.sub(x, self.shift), ops.exp(ops.neg(self.log_scale)))
        return out, _batch_logdet(ops.neg(ops.sum(self.log_scale)), x.shape[0])

    def descriptor(self):
        return {"kind": self.kind, "dim": self.dim, "initialized": self.initialized}


class LUMix(Block):
    """Learned invertible linear mix ``W = P L (U + diag(sign * exp(log_s)))``.

    log|det W| is simply ``sum(log_s)``.
    """

    kind = "invertible-1x1-mix"

    def __init__(self, params: ParameterStore, prefix: str, dim: int,
                 rng: np.random.Generator | None = None, *, perm=None, sign=None):
        self.dim = dim
        if perm is None:
            q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
            p, lower, upper = scipy.linalg.lu(q)
            diag = np.diag(upper)
            perm_mat, sign = p, np.sign(diag)
            log_s, l_init, u_init = np.log(np.abs(diag)), np.tril(lower, -1), np.triu(upper, 1)
        else:
            perm_mat = np.asarray(perm, dtype=np.float64)
            sign = np.asarray(sign, dtype=np.float64)
            log_s, l_init, u_init = np.zeros(dim), np.zeros((dim, dim)), np.zeros((dim, dim))
        self.perm_mat = perm_mat
        self.sign = np.asarray(sign, dtype=np.float64)
        self.lower_mask = np.tril(np.ones((dim, dim)), -1)
        self.upper_mask = np.triu(np.ones((dim, dim)), 1)
        self.eye = np.eye(dim)
        self.lower = params.add(f"{prefix}.lower", l_init)
        self.upper = params.add(f"{prefix}.upper", u_init)
        self.log_s = params.add(f"{prefix}.log_s", log_s)

    def weight(self) -> Tensor:
        lower = ops.add(ops.mul(self.lower, self.lower_mask), self.eye)
        diag = ops.mul(ops.reshape(ops.mul(ops.exp(self.log_s), self.sign), (1, self.dim)), self.eye)
        upper = ops.add(ops.mul(self.upper, self.upper_mask), diag)
        return ops.matmul(self.perm_mat, ops.matmul(lower, upper))

    def forward(self, z, cond=None):
        w = self.weight()
        return ops.matmul(z, ops.transpose(w)), _batch_logdet(ops.sum(self.log_s), z.shape[0])

    def inverse(self, x, cond=None):
        w = self.weight()
        out = ops.transpose(ops.solve(w, ops.transpose(x)))
        return out, _batch_logdet(ops.neg(ops.sum(self.log_s)), x.shape[0])

    def descriptor(self):
        return {"kind": self.kind, "dim": self.dim, "perm": self.perm_mat.tolist(),
                "sign": self.sign.tolist()}
