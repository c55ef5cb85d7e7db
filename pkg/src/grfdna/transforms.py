"""Unnormalised DCT-I, DST-I and FFT, in 1-d and as tensor products.

Conventions (length ``L`` along the transformed axis)::

    dct1:  y[m] = sum_{k=0}^{L-1} x[k] cos(pi m k / (L-1)),   m = 0..L-1
    dst1:  y[m] = sum_{k=1}^{L}   x[k] sin(pi m k / (L+1)),   m = 1..L
    fft:   y[m] = sum_{k=0}^{L-1} x[k] exp(-2 pi i m k / L)

``dst1`` works on interior points only: a sine series on a closed grid with
``L + 2`` points has vanishing end values, so they are not stored.  The fast
paths call :mod:`scipy.fft`, whose type-1 transforms double the interior
(DCT) or all (DST) terms; the factor is undone here.  Short transforms whose
underlying FFT length has a large prime factor are done as a cached dense
matrix product instead, which is much faster than a Bluestein FFT there.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft as sfft

DCT1 = "dct1"
DST1 = "dst1"
FFT = "fft"
KINDS = (DCT1, DST1, FFT)


_DENSE_MAX = 1024


def _largest_prime_factor(n):
    p, f = n, 2
    best = 1
    while f * f <= p:
        while p % f == 0:
            best, p = f, p // f
        f += 1
    return max(best, p)


def _use_dense(fft_len, length):
    return length <= _DENSE_MAX and _largest_prime_factor(fft_len) > 13


@lru_cache(maxsize=32)
def _dense_matrix(kind, length):
    k = np.arange(length, dtype=float)
    if kind == DCT1:
        mat = np.cos(np.pi * np.outer(k, k) / (length - 1))
    else:
        mat = np.sin(np.pi * np.outer(k + 1, k + 1) / (length + 1))
    mat.setflags(write=False)
    return mat


def _apply_dense(x, mat, axis):
    y = np.tensordot(x, mat, axes=([axis], [1]))
    return np.moveaxis(y, -1, axis)


def _complex_split(func, x, axis, workers):
    return func(x.real, axis, workers) + 1j * func(x.imag, axis, workers)


def dct1(x, axis=-1, workers=None):
    x = np.asarray(x)
    if np.iscomplexobj(x):
        return _complex_split(dct1, x, axis, workers)
    x = x.astype(float, copy=False)
    n = x.shape[axis]
    if n < 2:
        raise ValueError("dct1 needs at least 2 points")
    if _use_dense(2 * (n - 1), n):
        return _apply_dense(x, _dense_matrix(DCT1, n), axis)
    y = x.copy()
    idx = [slice(None)] * y.ndim
    idx[axis] = slice(1, n - 1)
    y[tuple(idx)] *= 0.5
    return sfft.dct(y, type=1, axis=axis, overwrite_x=True, workers=workers)


def dst1(x, axis=-1, workers=None):
    x = np.asarray(x)
    if np.iscomplexobj(x):
        return _complex_split(dst1, x, axis, workers)
    x = x.astype(float, copy=False)
    n = x.shape[axis]
    if n < 1:
        raise ValueError("dst1 needs at least 1 point")
    if _use_dense(2 * (n + 1), n):
        return _apply_dense(x, _dense_matrix(DST1, n), axis)
    return 0.5 * sfft.dst(x, type=1, axis=axis, workers=workers)


def fft(x, axis=-1, workers=None):
    x = np.asarray(x)
    if x.shape[axis] < 1:
        raise ValueError("fft needs at least 1 point")
    return sfft.fft(x, axis=axis, workers=workers)


_FUNCS = {DCT1: dct1, DST1: dst1, FFT: fft}


@dataclass(frozen=True)
class TensorPlan:
    """Per-axis transform kinds for the trailing ``len(kinds)`` axes of an array."""

    kinds: tuple
    lengths: tuple

    def __post_init__(self):
        kinds = tuple(str(k).lower() for k in self.kinds)
        lengths = tuple(int(n) for n in self.lengths)
        if len(kinds) != len(lengths) or not kinds:
            raise ValueError("kinds and lengths must be non-empty and of equal length")
        for k, n in zip(kinds, lengths):
            if k not in KINDS:
                raise ValueError(f"unknown transform kind {k!r}")
            if k == DCT1 and n < 2:
                raise ValueError("DCT-I axis needs length >= 2")
            if n < 1:
                raise ValueError("axis length must be >= 1")
        object.__setattr__(self, "kinds", kinds)
        object.__setattr__(self, "lengths", lengths)

    @property
    def ndim(self):
        return len(self.kinds)


def tensor_apply(plan: TensorPlan, x, order=None, workers=None):
    """Apply ``plan`` over the trailing axes of ``x``; leading axes are a batch.

    ``order`` permutes the sequence in which axes are processed (the result
    does not depend on it).
    """
    x = np.asarray(x)
    d = plan.ndim
    if x.ndim < d or tuple(x.shape[-d:]) != plan.lengths:
        raise ValueError(f"input shape {x.shape} does not match plan {plan.lengths}")
    axes = range(d) if order is None else order
    if sorted(axes) != list(range(d)):
        raise ValueError("order must be a permutation of the plan axes")
    y = x
    for j in axes:
        y = _FUNCS[plan.kinds[j]](y, axis=x.ndim - d + j, workers=workers)
    return y
