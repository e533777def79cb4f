"""Forward operators, noise models and sparsity machinery."""
from .operators import MeasurementModel, fourier_rows, gaussian_kernel
from .sparsity import (SparsityModel, gradient_sigma_min, project_sk, project_topk,
                       support_bases, topk_residual)

__all__ = [
    "MeasurementModel",
    "SparsityModel",
    "fourier_rows",
    "gaussian_kernel",
    "gradient_sigma_min",
    "project_sk",
    "project_topk",
    "support_bases",
    "topk_residual",
]
