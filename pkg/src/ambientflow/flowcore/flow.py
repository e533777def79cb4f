"""Unconditional and conditional normalizing flows."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..diffengine import ParameterStore, Streams, Tensor, as_tensor, no_grad, ops
from ..errors import ConfigError, NumericError
from .blocks import ActNorm, AffineCoupling, Block, LUMix, Permutation, Squeeze

_LOG_2PI = math.log(2.0 * math.pi)


def _as_batch(x) -> tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == 1:
        return ops.reshape(x, (1, x.shape[0])), True
    return x, False


def _unbatch(x: Tensor, ld: Tensor, single: bool):
    if single:
        return ops.reshape(x, (x.shape[-1],)), ops.reshape(ld, ())
    return x, ld


class FlowModel:
    """``G: z -> x`` as a composition of invertible blocks with latent N(0, I)."""

    def __init__(self, dim: int, blocks: Sequence[Block], params: ParameterStore):
        self.dim = dim
        self.blocks = list(blocks)
        self.params = params

    def _run(self, v, cond, inverse: bool):
        v, single = _as_batch(v)
        if v.shape[-1] != self.dim:
            raise ConfigError(f"expected input of width {self.dim}, got {v.shape[-1]}")
        total = None
        order = range(len(self.blocks) - 1, -1, -1) if inverse else range(len(self.blocks))
        for i in order:
            block = self.blocks[i]
            try:
                v, ld = block.inverse(v, cond) if inverse else block.forward(v, cond)
            except NumericError as exc:
                raise NumericError(f"block {i} ({block.kind}): {exc}") from exc
            total = ld if total is None else ops.add(total, ld)
        if total is None:
            total = Tensor(np.zeros(v.shape[0]))
        return _unbatch(v, total, single)

    def forward(self, z):
        """Return ``(G(z), log|det dG/dz|)``."""
        return self._run(z, None, inverse=False)

    def inverse(self, x):
        """Return ``(G^-1(x), log|det dG^-1/dx|)``."""
        return self._run(x, None, inverse=True)

    def log_prob(self, x) -> Tensor:
        z, ld = self.inverse(x)
        return ops.add(ops.std_normal_logpdf(z), ld)

    def sample(self, count: int, streams: Streams, stream: str = "sample", index: int = 0) -> np.ndarray:
        if count < 1:
            raise ConfigError("sample count must be >= 1")
        z = streams.normal(stream, (count, self.dim), index)
        with no_grad():
            x, _ = self.forward(Tensor(z))
        return x.data

    def init_actnorm(self, x: np.ndarray) -> None:
        """Data-dependent actnorm initialisation from a batch in data space."""
        v = Tensor(np.asarray(x, dtype=np.float64).reshape(-1, self.dim))
        with no_grad():
            for block in reversed(self.blocks):
                if isinstance(block, ActNorm) and not block.initialized:
                    block.init_from(v.data)
                v, _ = block.inverse(v, None)

    def descriptor(self) -> dict:
        return {"type": "flow", "dim": self.dim, "blocks": [b.descriptor() for b in self.blocks]}


class Conditioner:
    """Feature extractor for the measurement: a tanh perceptron plus linear skip.

    With ``image_shape`` set, ``g`` is viewed as ``(C, H, W)`` and a 2x
    average-pooled copy is appended before the perceptron (a two-scale
    feature stack).
    """

    def __init__(self, params: ParameterStore, prefix: str, in_dim: int, width: int,
                 out_dim: int, rng: np.random.Generator, image_shape=None):
        self.in_dim, self.width, self.out_dim = in_dim, width, out_dim
        self.image_shape = tuple(image_shape) if image_shape else None
        feat_dim = in_dim
        if self.image_shape:
            c, h, w = self.image_shape
            if c * h * w != in_dim or h % 2 or w % 2:
                raise ConfigError(f"image shape {self.image_shape} incompatible with width {in_dim}")
            feat_dim += c * (h // 2) * (w // 2)
        self.feat_dim = feat_dim
        scale = 1.0 / np.sqrt(feat_dim)
        self.w1 = params.add(f"{prefix}.w1", rng.standard_normal((feat_dim, width)) * scale)
        self.b1 = params.add(f"{prefix}.b1", np.zeros(width))
        self.w2 = params.add(f"{prefix}.w2", rng.standard_normal((width, out_dim)) / np.sqrt(width))
        self.b2 = params.add(f"{prefix}.b2", np.zeros(out_dim))
        self.skip = params.add(f"{prefix}.skip", rng.standard_normal((feat_dim, out_dim)) * scale)

    def _stack(self, g: Tensor) -> Tensor:
        if not self.image_shape:
            return g
        c, h, w = self.image_shape
        b = g.shape[0]
        pooled = ops.mean(ops.reshape(g, (b, c, h // 2, 2, w // 2, 2)), axis=(3, 5))
        return ops.concat([g, ops.reshape(pooled, (b, -1))], axis=-1)

    def __call__(self, g: Tensor) -> Tensor:
        feats = self._stack(g)
        h = ops.tanh(ops.linear(feats, self.w1, self.b1))
        return ops.add(ops.linear(h, self.w2, self.b2), ops.matmul(feats, self.skip))

    def descriptor(self) -> dict:
        return {"in_dim": self.in_dim, "width": self.width, "out_dim": self.out_dim,
                "image_shape": list(self.image_shape) if self.image_shape else None}


class ConditionalFlowModel:
    """``h(zeta; g)``: for each fixed ``g`` an invertible map of ``zeta``."""

    def __init__(self, dim: int, cond_dim: int, blocks: Sequence[Block],
                 conditioner: Conditioner, params: ParameterStore):
        self.dim, self.cond_dim = dim, cond_dim
        self.blocks = list(blocks)
        self.conditioner = conditioner
        self.params = params

    def _features(self, g, batch: int) -> Tensor:
        g = as_tensor(g)
        if g.ndim == 1:
            g = ops.reshape(g, (1, g.shape[0]))
        if g.shape[-1] != self.cond_dim:
            raise ConfigError(f"conditioning width mismatch: expected {self.cond_dim}, got {g.shape[-1]}")
        if g.shape[0] != batch:
            if g.shape[0] != 1:
                raise ConfigError(f"batch mismatch: {g.shape[0]} measurements for {batch} latents")
            g = ops.broadcast_to(g, (batch, self.cond_dim))
        return self.conditioner(g)

    def _run(self, v, g, inverse: bool):
        v, single = _as_batch(v)
        if v.shape[-1] != self.dim:
            raise ConfigError(f"expected input of width {self.dim}, got {v.shape[-1]}")
        feats = self._features(g, v.shape[0])
        total = None
        order = range(len(self.blocks) - 1, -1, -1) if inverse else range(len(self.blocks))
        for i in order:
            block = self.blocks[i]
            try:
                v, ld = block.inverse(v, feats) if inverse else block.forward(v, feats)
            except NumericError as exc:
                raise NumericError(f"posterior block {i} ({block.kind}): {exc}") from exc
            total = ld if total is None else ops.add(total, ld)
        if total is None:
            total = Tensor(np.zeros(v.shape[0]))
        return _unbatch(v, total, single)

    def forward(self, zeta, g):
        """``(h(zeta; g), log|det dh/dzeta|)`` at fixed ``g``."""
        return self._run(zeta, g, inverse=False)

    def inverse(self, f, g):
        return self._run(f, g, inverse=True)

    def log_prob(self, f, g) -> Tensor:
        zeta, ld = self.inverse(f, g)
        return ops.add(ops.std_normal_logpdf(zeta), ld)

    def sample_with_log_prob(self, zeta, g):
        """Forward pass returning ``(f, log p(f | g))`` from the same graph."""
        f, ld = self.forward(zeta, g)
        return f, ops.sub(ops.std_normal_logpdf(zeta), ld)

    def sample(self, g, count: int, streams: Streams, stream: str = "posterior", index: int = 0):
        if count < 1:
            raise ConfigError("sample count must be >= 1")
        zeta = streams.normal(stream, (count, self.dim), index)
        g = np.broadcast_to(np.asarray(g, dtype=np.float64).reshape(1, -1), (count, self.cond_dim))
        with no_grad():
            f, _ = self.forward(Tensor(zeta), Tensor(g))
        return f.data

    def init_actnorm(self, f: np.ndarray) -> None:
        """Initialise actnorm blocks so that object-space batch ``f`` maps to unit scale."""
        v = Tensor(np.asarray(f, dtype=np.float64).reshape(-1, self.dim))
        with no_grad():
            for block in reversed(self.blocks):
                if isinstance(block, ActNorm) and not block.initialized:
                    block.init_from(v.data)
                if isinstance(block, AffineCoupling):
                    continue  # couplings start at identity
                v, _ = block.inverse(v, None)

    def descriptor(self) -> dict:
        return {"type": "conditional-flow", "dim": self.dim, "cond_dim": self.cond_dim,
                "blocks": [b.descriptor() for b in self.blocks],
                "conditioner": self.conditioner.descriptor()}


# -- builders ---------------------------------------------------------------

def default_coupling_count(dim: int) -> int:
    """Coupling blocks grow with log2 of the dimension; 8 at the 2-D minimum."""
    return max(8, 4 * math.ceil(math.log2(max(dim, 2))))


def _stack_blocks(params: ParameterStore, dim: int, n_couplings: int, width: int,
                  rng: np.random.Generator, cond_width: int, mix: str, actnorm: bool,
                  image_shape=None, alpha: float = 1.9) -> list[Block]:
    blocks: list[Block] = []
    if image_shape is not None:
        blocks.append(Squeeze(image_shape))
    for i in range(n_couplings):
        if actnorm:
            blocks.append(ActNorm(params, f"b{i}.actnorm", dim))
        if mix == "lu":
            blocks.append(LUMix(params, f"b{i}.mix", dim, rng))
        elif mix == "reverse":
            blocks.append(Permutation(np.arange(dim)[::-1]))
        elif mix == "random":
            blocks.append(Permutation(rng.permutation(dim)))
        elif mix != "none":
            raise ConfigError(f"unknown mix {mix!r}")
        blocks.append(AffineCoupling(params, f"b{i}.coupling", dim, width, parity=i,
                                     rng=rng, cond_width=cond_width, alpha=alpha))
    return blocks


def build_flow(dim: int, n_couplings: int | None = None, width: int = 64, seed: int = 0,
               mix: str = "lu", actnorm: bool = True, image_shape=None,
               alpha: float = 1.9) -> FlowModel:
    params = ParameterStore(seed)
    rng = np.random.default_rng(seed)
    n_couplings = default_coupling_count(dim) if n_couplings is None else n_couplings
    blocks = _stack_blocks(params, dim, n_couplings, width, rng, 0, mix, actnorm, image_shape, alpha)
    return FlowModel(dim, blocks, params)


def build_conditional_flow(dim: int, cond_dim: int, n_couplings: int | None = None,
                           width: int = 64, cond_features: int = 32, seed: int = 0,
                           mix: str = "lu", actnorm: bool = True, image_shape=None,
                           cond_image_shape=None, alpha: float = 1.9) -> ConditionalFlowModel:
    params = ParameterStore(seed)
    rng = np.random.default_rng(seed)
    n_couplings = default_coupling_count(dim) if n_couplings is None else n_couplings
    conditioner = Conditioner(params, "cond", cond_dim, width, cond_features, rng, cond_image_shape)
    blocks = _stack_blocks(params, dim, n_couplings, width, rng, cond_features, mix, actnorm,
                           image_shape, alpha)
    return ConditionalFlowModel(dim, cond_dim, blocks, conditioner, params)


def blocks_from_descriptor(descs: list[dict], params: ParameterStore) -> list[Block]:
    blocks: list[Block] = []
    coupling_i = 0
    for d in descs:
        kind = d["kind"]
        if kind == "affine-coupling":
            blocks.append(AffineCoupling(params, f"b{coupling_i}.coupling", d["dim"], d["width"],
                                         d["parity"], np.random.default_rng(0),
                                         d["cond_width"], d["alpha"]))
            coupling_i += 1
        elif kind == "actnorm":
            blk = ActNorm(params, f"b{coupling_i}.actnorm", d["dim"])
            blk.initialized = bool(d.get("initialized", True))
            blocks.append(blk)
        elif kind == "invertible-1x1-mix":
            blocks.append(LUMix(params, f"b{coupling_i}.mix", d["dim"], perm=d["perm"], sign=d["sign"]))
        elif kind == "channel-permutation":
            blocks.append(Permutation(d["perm"]))
        elif kind == "squeeze":
            blocks.append(Squeeze(d["image_shape"]))
        else:
            raise ConfigError(f"unknown block kind {kind!r}")
    return blocks


def model_from_descriptor(desc: dict):
    params = ParameterStore(0)
    if desc["type"] == "flow":
        return FlowModel(desc["dim"], blocks_from_descriptor(desc["blocks"], params), params)
    if desc["type"] == "conditional-flow":
        c = desc["conditioner"]
        conditioner = Conditioner(params, "cond", c["in_dim"], c["width"], c["out_dim"],
                                  np.random.default_rng(0), c["image_shape"])
        blocks = blocks_from_descriptor(desc["blocks"], params)
        return ConditionalFlowModel(desc["dim"], desc["cond_dim"], blocks, conditioner, params)
    raise ConfigError(f"unknown model type {desc['type']!r}")
