"""Periodised covariances, circulant-embedding spectra and the embedding search.

Two periodisations are used.  The DNA sampler works with period ``2*alpha``
(its cosine/sine modes live on ``[0, alpha]`` and extend evenly), the naive
periodic sampler with period ``alpha``.  A :class:`SpectrumTable` records
which one it was built for.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from itertools import product

import numpy as np
import scipy.fft as sfft

from .covariance import CovarianceModel, FAMILIES, SpectralDensity, stationary

DNA = "dna"
PERIODIC = "periodic"
CONVENTIONS = (DNA, PERIODIC)

_MAGIC = b"GRFT"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIdddII")


@dataclass(frozen=True)
class PeriodisationParams:
    alpha: float
    n: int
    dim: int = 1

    def __post_init__(self):
        if not self.alpha >= 1:
            raise ValueError("alpha must be >= 1")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("n must be a positive integer")
        if self.dim not in (1, 2, 3):
            raise ValueError("dim must be 1, 2 or 3")
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "n", int(self.n))


def _radius_grid(n, dim):
    k = np.arange(n + 1, dtype=float)
    grids = np.meshgrid(*([k] * dim), indexing="ij")
    return np.sqrt(sum(g * g for g in grids))


@dataclass(frozen=True, eq=False)
class SpectrumTable:
    """lambda_mu = phi^(mu / P) for mu in {0..n}^d, with P the period."""

    model: CovarianceModel
    params: PeriodisationParams
    coeffs: np.ndarray = field(repr=False)
    convention: str = DNA

    def __post_init__(self):
        if self.convention not in CONVENTIONS:
            raise ValueError(f"convention must be one of {CONVENTIONS}")
        shape = (self.params.n + 1,) * self.params.dim
        if self.coeffs.shape != shape:
            raise ValueError(f"coeffs must have shape {shape}")
        self.coeffs.setflags(write=False)

    @classmethod
    def build(cls, model, alpha, n, dim=1, convention=DNA):
        params = PeriodisationParams(alpha, n, dim)
        period = 2.0 * params.alpha if convention == DNA else params.alpha
        sd = SpectralDensity(model, dim)
        coeffs = np.ascontiguousarray(sd.radial(_radius_grid(params.n, dim) / period))
        return cls(model, params, coeffs, convention)

    @property
    def alpha(self):
        return self.params.alpha

    @property
    def n(self):
        return self.params.n

    @property
    def dim(self):
        return self.params.dim

    @property
    def period(self):
        return 2.0 * self.alpha if self.convention == DNA else self.alpha

    def with_coeffs(self, coeffs):
        """Copy of the table with replaced coefficients (testing helper)."""
        return SpectrumTable(self.model, self.params, np.array(coeffs, dtype=float), self.convention)

    # --- binary round trip -------------------------------------------------
    def to_bytes(self) -> bytes:
        m = self.model
        head = _HEADER.pack(_MAGIC, _VERSION, FAMILIES.index(m.family),
                            CONVENTIONS.index(self.convention),
                            m.nu if m.nu is not None else 0.0, m.ell, self.alpha,
                            self.n, self.dim)
        return head + np.ascontiguousarray(self.coeffs, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes):
        if len(buf) < _HEADER.size:
            raise ValueError("truncated spectrum table")
        magic, version, fam, conv, nu, ell, alpha, n, dim = _HEADER.unpack_from(buf)
        if magic != _MAGIC or version != _VERSION:
            raise ValueError("not a spectrum table file")
        model = CovarianceModel(FAMILIES[fam], ell, nu if FAMILIES[fam] == "matern" else None)
        count = (n + 1) ** dim
        payload = np.frombuffer(buf, dtype="<f8", count=count, offset=_HEADER.size)
        coeffs = payload.astype(float).reshape((n + 1,) * dim)
        return cls(model, PeriodisationParams(alpha, n, dim), coeffs, CONVENTIONS[conv])

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def build_spectrum_table(model, alpha, n, dim=1, convention=DNA) -> SpectrumTable:
    return SpectrumTable.build(model, alpha, n, dim, convention)


def _as_deltas(delta, dim):
    d = np.asarray(delta, dtype=float)
    if dim == 1 and (d.ndim == 0 or d.shape[-1] != 1):
        d = d[..., None]
    if d.shape[-1] != dim:
        raise ValueError(f"delta must have trailing axis of length {dim}")
    return d


def _infer_dim(delta, dim):
    # scalars and flat arrays are 1-d separations; otherwise the trailing axis is the dimension
    if dim is None:
        dim = 1 if np.ndim(delta) <= 1 else np.shape(delta)[-1]
    if dim not in (1, 2, 3):
        raise ValueError("dim must be 1, 2 or 3")
    return dim


def _lattice(model, period, delta, shell_cutoff, dim, skip_origin):
    if shell_cutoff < 1:
        raise ValueError("shell_cutoff must be >= 1")
    d = _as_deltas(delta, dim)
    shape = d.shape[:-1]
    flat = d.reshape(-1, dim)
    r = np.arange(-shell_cutoff, shell_cutoff + 1)
    eta = np.array(list(product(r, repeat=dim)), dtype=float)
    if skip_origin:
        eta = eta[np.any(eta != 0, axis=1)]
    shifts = period * eta
    out = np.empty(len(flat))
    chunk = max(1, 2_000_000 // len(shifts))
    for i in range(0, len(flat), chunk):
        block = flat[i:i + chunk, None, :] + shifts[None, :, :]
        vals = stationary(model, block)
        # sum small terms first
        out[i:i + chunk] = np.sort(vals, axis=1).sum(axis=1)
    out = out.reshape(shape)
    return float(out) if out.ndim == 0 else out


def periodised_cov_lattice(model, period, delta, shell_cutoff=60, dim=None):
    """Brute-force lattice sum  sum_{|eta|_inf <= cutoff} phi(delta + period*eta).

    This is the reference oracle for the periodised covariance.  ``delta``
    has trailing axis ``dim``; when ``dim`` is omitted a flat array holds
    1-d separations and a 2-d or higher array carries the dimension last.
    """
    dim = _infer_dim(delta, dim)
    return _lattice(model, period, delta, shell_cutoff, dim, skip_origin=False)


def periodisation_tail(model, period, delta, shell_cutoff=60, dim=None):
    """Lattice sum without the eta = 0 term, i.e. phi^prd - phi without cancellation."""
    dim = _infer_dim(delta, dim)
    return _lattice(model, period, delta, shell_cutoff, dim, skip_origin=True)


def cauchy_periodised_1d(ell, period, delta):
    """Closed form of the d=1 Cauchy lattice sum (all shells)."""
    a = 2.0 * np.pi * ell / period
    b = 2.0 * np.pi * np.asarray(delta, dtype=float) / period
    return (np.pi * ell / period) * np.sinh(a) / (np.cosh(a) - np.cos(b))


def periodised_cov_spectral(table: SpectrumTable, delta):
    """Truncated Fourier series P^{-d} sum_{|mu|_inf<=n} lambda_mu cos(2 pi mu.delta / P).

    Evaluated over mu in {0..n}^d with multiplicity 2^{#nonzero components}.
    """
    dim, n, P = table.dim, table.n, table.period
    d = _as_deltas(delta, dim)
    shape = d.shape[:-1]
    flat = d.reshape(-1, dim)
    mu = np.arange(n + 1)
    weight = np.where(mu == 0, 1.0, 2.0)
    # reduce phases modulo one so shifts by a full period cancel exactly
    factors = []
    for j in range(dim):
        frac = np.mod(flat[:, j] / P, 1.0)
        factors.append(weight * np.cos(2.0 * np.pi * np.mod(np.outer(frac, mu), 1.0)))
    lam = table.coeffs
    if dim == 1:
        out = factors[0] @ lam
    elif dim == 2:
        out = np.einsum("ka,kb,ab->k", factors[0], factors[1], lam, optimize=True)
    else:
        out = np.einsum("ka,kb,kc,abc->k", factors[0], factors[1], factors[2], lam, optimize=True)
    out = out / P ** dim
    out = out.reshape(shape)
    return float(out) if out.ndim == 0 else out


# --- circulant embedding ----------------------------------------------------

def _wrapped_lags(m, h):
    k = np.arange(m)
    return np.minimum(k, m - k) * h


def ce_spectrum(model, alpha, m, dim=1):
    """Eigenvalues of the circulant embedding on ``m`` points per axis over [-alpha, alpha)^d.

    Returns a real array of shape ``(m,)*dim``; entries may be negative.
    """
    if m < 1:
        raise ValueError("m must be positive")
    h = 2.0 * alpha / m
    lag = _wrapped_lags(m, h)
    grids = np.meshgrid(*([lag] * dim), indexing="ij", sparse=True)
    r = np.sqrt(sum(g * g for g in grids))
    col = np.broadcast_to(model.rho(r / model.ell), (m,) * dim)
    ev = sfft.fftn(col)
    return ev.real


def embedding_size(n_grid, tau):
    """FFT length per axis for grid spacing 1/(n_grid-1) and domain factor tau."""
    return int(2 * tau * (n_grid - 1))


def is_nonnegative(eigs, tol=0.0):
    """True iff min(eigs) >= -tol * max(eigs)."""
    eigs = np.asarray(eigs)
    return bool(eigs.min() >= -tol * eigs.max())


def minimal_embedding(model, n_grid, max_factor, dim=1, tol=0.0):
    """Smallest power-of-two domain factor tau <= max_factor with a nonnegative CE spectrum.

    The target grid has ``n_grid`` points per axis on [0, 1].  Factor ``tau``
    embeds it in a period of length ``2*tau``, i.e. an FFT of length
    ``2*tau*(n_grid-1)`` per axis.  Returns ``None`` when no factor works.
    """
    if max_factor < 1:
        raise ValueError("max_factor must be >= 1")
    if n_grid < 2:
        raise ValueError("n_grid must be >= 2")
    top = int(np.floor(np.log2(max_factor)))

    def ok(e):
        tau = 2 ** e
        return is_nonnegative(ce_spectrum(model, tau, embedding_size(n_grid, tau), dim), tol)

    if not ok(top):
        return None
    lo, hi = -1, top  # ok(hi) holds; lo is a known failure (or below range)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return 2 ** hi
