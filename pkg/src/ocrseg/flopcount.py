"""Analytic cost conventions shared by the models and the profiler.

One multiply-add counts as 2 FLOPs. Softmax is billed a nominal 5 FLOPs per
element (shift, exp, sum share, divide), ReLU 1, and a frozen-stats batchnorm
2 (scale, shift). Upsampling and concatenation are free; pooling pays one FLOP
per input element plus one per output cell.
"""
from __future__ import annotations

from .errors import ParameterError


def matmul_flops(m: int, k: int, n: int) -> int:
    """(m x k) @ (k x n): 2 m k n."""
    _check_positive(m=m, k=k, n=n)
    return 2 * m * k * n


def conv1x1_flops(c_in: int, c_out: int, n: int, bias: bool = False) -> int:
    _check_positive(c_in=c_in, c_out=c_out, n=n)
    flops = 2 * c_in * c_out * n
    if bias:
        flops += c_out * n
    return flops


def conv_kxk_flops(c_in: int, c_out: int, n: int, k: int, bias: bool = False) -> int:
    _check_positive(c_in=c_in, c_out=c_out, n=n, k=k)
    flops = 2 * k * k * c_in * c_out * n
    if bias:
        flops += c_out * n
    return flops


def block_flops(c_in: int, c_out: int, n: int, kernel: int = 1) -> int:
    """Transform block: bias-free conv, batchnorm affine (2/elt), ReLU (1/elt)."""
    return conv_kxk_flops(c_in, c_out, n, kernel) + 3 * c_out * n


def softmax_flops(rows: int, cols: int) -> int:
    _check_positive(rows=rows, cols=cols)
    return 5 * rows * cols


def relu_flops(n: int) -> int:
    _check_positive(n=n)
    return n


def pool_flops(c: int, n_in: int, cells: int) -> int:
    _check_positive(c=c, n_in=n_in, cells=cells)
    return c * (n_in + cells)


def mean_flops(c: int, n: int) -> int:
    _check_positive(c=c, n=n)
    return c * (n + 1)


def _check_positive(**kwargs: int) -> None:
    for name, value in kwargs.items():
        if int(value) < 1:
            raise ParameterError(f"{name} must be >= 1, got {value}")
