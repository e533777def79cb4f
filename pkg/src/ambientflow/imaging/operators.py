"""Linear forward operators ``H`` with isotropic Gaussian noise.

All operators act on flattened batches ``[B, n]`` and return ``[B, m]`` so
that they compose directly with the flows. Image operators view each row as
a single-channel ``(H, W)`` image.
"""
from __future__ import annotations

import math

import numpy as np

from ..diffengine import Streams, Tensor, aftn, as_tensor, no_grad, ops
from ..errors import ConfigError

_KINDS = ("identity", "gaussian-blur", "subsampled-fourier", "dense")


def gaussian_kernel(shape, sigma: float) -> np.ndarray:
    """Wrapped Gaussian kernel truncated at 4 sigma and normalised to sum 1."""
    h, w = shape
    if sigma <= 0:
        raise ConfigError("blur sigma must be positive")
    r = int(math.ceil(4.0 * sigma))
    ker = np.zeros((h, w))
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy * dy + dx * dx > 16.0 * sigma * sigma:
                continue
            ker[dy % h, dx % w] += math.exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma))
    return ker / ker.sum()


def fourier_rows(height: int, ratio: float) -> np.ndarray:
    """DC row plus equispaced rows keeping ``round(height / ratio)`` of them."""
    if ratio < 1:
        raise ConfigError("undersampling ratio n/m must be >= 1")
    keep = max(1, int(round(height / ratio)))
    rows = np.unique(np.round(np.arange(keep) * (height / keep)).astype(np.int64) % height)
    return rows


class MeasurementModel:
    """``g = H f + n`` with ``n ~ N(0, sigma_n^2 I_m)``.

    For ``subsampled-fourier`` the measurement stacks real and imaginary
    channels; noise is iid on both, so ``m`` counts real numbers.
    """

    def __init__(self, kind: str, input_shape, sigma_n: float = 0.0, *,
                 blur_sigma: float | None = None, ratio: float | None = None,
                 matrix=None):
        if kind not in _KINDS:
            raise ConfigError(f"unknown operator kind {kind!r}; expected one of {_KINDS}")
        if sigma_n < 0 or not np.isfinite(sigma_n):
            raise ConfigError("sigma_n must be finite and >= 0")
        self.kind = kind
        self.input_shape = tuple(int(s) for s in input_shape)
        self.n = int(np.prod(self.input_shape))
        self.sigma_n = float(sigma_n)
        self.complex = kind == "subsampled-fourier"
        self.kernel = self.rows = self._matrix = None
        self.blur_sigma, self.ratio = blur_sigma, ratio
        if kind in ("gaussian-blur", "subsampled-fourier") and len(self.input_shape) != 2:
            raise ConfigError(f"{kind} needs a 2-D input shape, got {self.input_shape}")
        if kind == "identity":
            self.m = self.n
        elif kind == "gaussian-blur":
            if blur_sigma is None:
                raise ConfigError("gaussian-blur needs blur_sigma")
            self.kernel = gaussian_kernel(self.input_shape, blur_sigma)
            self.m = self.n
        elif kind == "subsampled-fourier":
            if ratio is None:
                raise ConfigError("subsampled-fourier needs ratio")
            self.rows = fourier_rows(self.input_shape[0], ratio)
            self.m = 2 * len(self.rows) * self.input_shape[1]
        else:
            if matrix is None:
                raise ConfigError("dense operator needs a matrix")
            mat = np.asarray(matrix, dtype=np.float64)
            if mat.ndim != 2 or mat.shape[1] != self.n:
                raise ConfigError(f"dense matrix shape {mat.shape} incompatible with n={self.n}")
            self._matrix = mat
            self.m = mat.shape[0]

    @property
    def output_shape(self) -> tuple[int, ...]:
        if self.kind == "subsampled-fourier":
            return (2, len(self.rows), self.input_shape[1])
        if self.kind == "dense":
            return (self.m,)
        return self.input_shape

    def _check(self, v: Tensor, width: int, what: str) -> tuple[Tensor, bool]:
        single = v.ndim == 1
        if single:
            v = ops.reshape(v, (1, v.shape[0]))
        if v.shape[-1] != width:
            raise ConfigError(f"{what}: expected width {width}, got {v.shape[-1]}")
        return v, single

    def apply(self, f) -> Tensor:
        """Noiseless ``H f``; differentiable."""
        f, single = self._check(as_tensor(f), self.n, "apply")
        b = f.shape[0]
        if self.kind == "identity":
            out = f
        elif self.kind == "gaussian-blur":
            img = ops.reshape(f, (b,) + self.input_shape)
            out = ops.reshape(ops.conv2d_circular(img, self.kernel), (b, self.n))
        elif self.kind == "subsampled-fourier":
            h, w = self.input_shape
            img = ops.reshape(f, (b, 1, h, w))
            pair = ops.concat([img, Tensor(np.zeros((b, 1, h, w)))], axis=1)
            spec = ops.index(ops.fft2(pair), (slice(None), slice(None), self.rows))
            out = ops.reshape(spec, (b, self.m))
        else:
            out = ops.matmul(f, self._matrix.T)
        return ops.reshape(out, (self.m,)) if single else out

    def adjoint(self, g) -> Tensor:
        """``H^T g``; differentiable."""
        g, single = self._check(as_tensor(g), self.m, "adjoint")
        b = g.shape[0]
        if self.kind == "identity":
            out = g
        elif self.kind == "gaussian-blur":
            flipped = np.roll(self.kernel[::-1, ::-1], 1, axis=(0, 1))
            img = ops.reshape(g, (b,) + self.input_shape)
            out = ops.reshape(ops.conv2d_circular(img, flipped), (b, self.n))
        elif self.kind == "subsampled-fourier":
            h, w = self.input_shape
            spec = ops.reshape(g, (b, 2, len(self.rows), w))
            full = np.zeros((len(self.rows), h))
            full[np.arange(len(self.rows)), self.rows] = 1.0
            # zero-fill the unsampled rows: S^T as a matmul over the row axis
            filled = ops.transpose(ops.matmul(ops.transpose(spec, (0, 1, 3, 2)), full), (0, 1, 3, 2))
            real = ops.index(ops.ifft2(filled), (slice(None), 0))
            out = ops.reshape(real, (b, self.n))
        else:
            out = ops.matmul(g, self._matrix)
        return ops.reshape(out, (self.n,)) if single else out

    def matrix(self) -> np.ndarray:
        """Dense ``[m, n]`` matrix of ``H`` (small problems only)."""
        if self._matrix is not None:
            return self._matrix.copy()
        with no_grad():
            return self.apply(Tensor(np.eye(self.n))).data.T.copy()

    def opnorm(self) -> float:
        """Spectral norm ``||H||_2``."""
        if self.kind == "identity":
            return 1.0
        if self.kind == "gaussian-blur":
            return float(np.abs(np.fft.fft2(self.kernel)).max())
        if self.kind == "subsampled-fourier":
            return 1.0
        return float(np.linalg.norm(self._matrix, 2))

    def measure(self, f, streams: Streams, stream: str = "noise", index: int = 0) -> np.ndarray:
        """``H f + n`` with the noise draw keyed by ``(stream, index)``."""
        with no_grad():
            clean = self.apply(Tensor(np.asarray(f, dtype=np.float64))).data
        if self.sigma_n == 0:
            return clean
        return clean + self.sigma_n * streams.normal(stream, clean.shape, index)

    def noise_log_density(self, residual) -> Tensor:
        """Row-wise ``log q_n(residual)`` for ``residual`` of shape ``[B, m]`` or ``[m]``."""
        r = as_tensor(residual)
        if self.sigma_n <= 0:
            raise ConfigError("noise density undefined for sigma_n = 0")
        if r.shape[-1] != self.m:
            raise ConfigError(f"residual width {r.shape[-1]} != m={self.m}")
        var = self.sigma_n ** 2
        quad = ops.mul(ops.sum(ops.square(r), axis=-1), -0.5 / var)
        return ops.sub(quad, 0.5 * self.m * math.log(2.0 * math.pi * var))

    def log_likelihood(self, g, f) -> Tensor:
        """``log q_n(g - H f)``."""
        return self.noise_log_density(ops.sub(as_tensor(g), self.apply(f)))

    def export(self, path) -> None:
        """Write the kernel or sampling mask as an AFTN tensor."""
        if self.kind == "gaussian-blur":
            aftn.save(path, self.kernel, self.descriptor())
        elif self.kind == "subsampled-fourier":
            mask = np.zeros(self.input_shape)
            mask[self.rows] = 1.0
            aftn.save(path, mask, self.descriptor())
        else:
            aftn.save(path, self.matrix(), self.descriptor())

    def descriptor(self) -> dict:
        d = {"kind": self.kind, "input_shape": list(self.input_shape), "sigma_n": self.sigma_n}
        if self.blur_sigma is not None:
            d["blur_sigma"] = self.blur_sigma
        if self.ratio is not None:
            d["ratio"] = self.ratio
        if self.kind == "dense":
            d["matrix"] = self._matrix.tolist()
        return d

    @classmethod
    def from_descriptor(cls, d: dict) -> "MeasurementModel":
        return cls(d["kind"], d["input_shape"], d.get("sigma_n", 0.0), blur_sigma=d.get("blur_sigma"),
                   ratio=d.get("ratio"), matrix=d.get("matrix"))
