"""Field samplers: naive periodic (FFT), circulant embedding and DNA.

Every sampler separates the noise draw from the linear noise-to-field map
(``*_from_noise`` functions), so the map can be assembled densely in tests.

DNA fields live on the closed grid ``x_k = k*alpha/n``, ``k = 0..n`` per
axis.  For a boundary mask ``b`` the cosine modes (``b_j = 0``) use
``mu_j = 0..n`` and the sine modes (``b_j = 1``) use ``mu_j = 1..n``.  A
zero cosine index carries an extra factor ``1/sqrt(2)``, which makes the
constant mode orthonormal on ``[0, alpha]`` and is what gives the averaged
field the exact covariance ``phi^prd_{2 alpha, n}``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .periodisation import (DNA, PERIODIC, SpectrumTable, ce_spectrum, embedding_size,
                            is_nonnegative)
from .transforms import DCT1, DST1, FFT, TensorPlan, tensor_apply


class NegativeSpectrum(RuntimeError):
    """The circulant embedding is not positive semidefinite; increase tau
    (see :func:`grfdna.periodisation.minimal_embedding`)."""


@dataclass(frozen=True)
class RngStream:
    """Reproducible normal stream keyed by ``(seed, stream, *subkeys)``."""

    seed: int
    stream: int = 0

    def generator(self, *subkeys) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream),) + tuple(int(k) for k in subkeys))
        return np.random.Generator(np.random.PCG64(ss))

    def normal(self, shape, *subkeys):
        return self.generator(*subkeys).standard_normal(shape)


@dataclass(frozen=True)
class BoundaryMask:
    """b_j = 0: Neumann (cosine) on the faces normal to axis j; b_j = 1: Dirichlet (sine)."""

    bits: tuple

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if not bits or any(b not in (0, 1) for b in bits):
            raise ValueError("mask bits must be 0 or 1")
        object.__setattr__(self, "bits", bits)

    @property
    def dim(self):
        return len(self.bits)

    @property
    def index(self):
        """Position in :func:`all_masks` order."""
        return int("".join(map(str, self.bits)), 2)

    @property
    def kinds(self):
        return tuple(DST1 if b else DCT1 for b in self.bits)

    def __str__(self):
        return "".join(map(str, self.bits))


def all_masks(dim):
    return [BoundaryMask(bits) for bits in product((0, 1), repeat=dim)]


_FIELD_MAGIC = b"GRFF"
_FIELD_HEAD = struct.Struct("<4sII")
_FIELD_META = struct.Struct("<ddQQ")


@dataclass(eq=False)
class FieldRealisation:
    """Field values on a uniform grid plus the metadata needed to place them."""

    values: np.ndarray
    alpha: float
    n: int
    spacing: float
    seed: int = 0
    stream: int = 0

    @property
    def dim(self):
        return self.values.ndim

    def coords(self, axis=0):
        return np.arange(self.values.shape[axis]) * self.spacing

    def to_bytes(self) -> bytes:
        v = np.ascontiguousarray(self.values, dtype="<f8")
        head = _FIELD_HEAD.pack(_FIELD_MAGIC, 1, v.ndim)
        sizes = struct.pack(f"<{v.ndim}I", *v.shape)
        meta = _FIELD_META.pack(self.alpha, self.spacing, self.seed & (2 ** 64 - 1), self.stream & (2 ** 64 - 1))
        return head + sizes + meta + struct.pack("<I", self.n) + v.tobytes()

    @classmethod
    def from_buffer(cls, buf, offset=0):
        """Decode one record; returns ``(field, next_offset)``."""
        magic, version, dim = _FIELD_HEAD.unpack_from(buf, offset)
        if magic != _FIELD_MAGIC or version != 1:
            raise ValueError("not a field record")
        offset += _FIELD_HEAD.size
        shape = struct.unpack_from(f"<{dim}I", buf, offset)
        offset += 4 * dim
        alpha, spacing, seed, stream = _FIELD_META.unpack_from(buf, offset)
        offset += _FIELD_META.size
        (n,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        count = int(np.prod(shape))
        values = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(float).reshape(shape)
        return cls(values, alpha, n, spacing, seed, stream), offset + 8 * count


def write_fields(path, fields):
    """Write realisations as consecutive binary records."""
    with open(path, "wb") as fh:
        for f in fields:
            fh.write(f.to_bytes())


def read_fields(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    out, off = [], 0
    while off < len(buf):
        f, off = FieldRealisation.from_buffer(buf, off)
        out.append(f)
    return out


def write_fields_csv(path, fields):
    """d=1 only: columns ``x, r0, r1, ...``."""
    if any(f.dim != 1 for f in fields):
        raise ValueError("CSV export is only available for 1-d fields")
    x = fields[0].coords()
    cols = np.column_stack([x] + [f.values for f in fields])
    header = ",".join(["x"] + [f"r{i}" for i in range(len(fields))])
    np.savetxt(path, cols, delimiter=",", header=header, comments="", fmt="%.17g")


# --- DNA -------------------------------------------------------------------

def _check_dna(table):
    if table.convention != DNA:
        raise ValueError("DNA sampling needs a table built with the 2*alpha convention")


def noise_shape(n, mask):
    """Noise array shape of a single-mask field: n+1 cosine or n sine modes per axis."""
    return tuple(n if b else n + 1 for b in mask.bits)


def _mode_scale(table, mask):
    """sqrt(lambda_mu) (2/alpha)^{d/2} 2^{-z/2} over the mask's index set."""
    d = table.dim
    lam = table.coeffs[tuple(slice(1, None) if b else slice(None) for b in mask.bits)]
    scale = np.sqrt(lam) * (2.0 / table.alpha) ** (d / 2.0)
    for j, b in enumerate(mask.bits):
        if not b:
            w = np.ones(table.n + 1)
            w[0] = np.sqrt(0.5)
            shape = [1] * d
            shape[j] = -1
            scale = scale * w.reshape(shape)
    return scale


def single_bc_from_noise(table: SpectrumTable, mask: BoundaryMask, xi):
    """Single-mask field on the closed grid from noise of shape ``(..., *noise_shape)``."""
    _check_dna(table)
    n, d = table.n, table.dim
    if mask.dim != d:
        raise ValueError("mask dimension does not match the table")
    xi = np.asarray(xi, dtype=float)
    if xi.shape[xi.ndim - d:] != noise_shape(n, mask):
        raise ValueError(f"noise must end with shape {noise_shape(n, mask)}")
    coef = xi * _mode_scale(table, mask)
    batch = xi.shape[:xi.ndim - d]
    if any(mask.bits) and n < 2:
        return np.zeros(batch + (n + 1,) * d)
    # the sine mode mu = n vanishes on every grid point
    keep = tuple(slice(0, n - 1) if b else slice(None) for b in mask.bits)
    coef = coef[(Ellipsis,) + keep]
    plan = TensorPlan(mask.kinds, coef.shape[coef.ndim - d:])
    vals = tensor_apply(plan, coef)
    pad = [(0, 0)] * len(batch) + [(1, 1) if b else (0, 0) for b in mask.bits]
    return np.pad(vals, pad)


def draw_noise(table, mask, rng: RngStream, count=None):
    shape = noise_shape(table.n, mask)
    if count is not None:
        shape = (count,) + shape
    return rng.normal(shape, mask.index)


def dna_from_noise(table: SpectrumTable, noises):
    """2^{-d/2} sum_b u^b with ``noises[mask.index]`` feeding mask ``b``."""
    masks = all_masks(table.dim)
    if len(noises) != len(masks):
        raise ValueError(f"need {len(masks)} noise arrays")
    total = None
    for mask in masks:
        u = single_bc_from_noise(table, mask, noises[mask.index])
        total = u if total is None else total + u
    return total * 2.0 ** (-table.dim / 2.0)


def grid_spacing(table):
    return table.alpha / table.n


def _wrap(values, table, rng, stream_offset=0):
    return FieldRealisation(values, table.alpha, table.n, grid_spacing(table), rng.seed, rng.stream + stream_offset)


def sample_single_bc(table, mask, rng: RngStream, count=None):
    """Single-mask realisation(s).  Uses the same stream as the mask's DNA component."""
    vals = single_bc_from_noise(table, mask, draw_noise(table, mask, rng, count))
    if count is not None:
        return vals
    return _wrap(vals, table, rng)


def sample_dna_components(table, rng: RngStream, count=None):
    """All 2^d single-mask fields (unweighted), in :func:`all_masks` order."""
    return [single_bc_from_noise(table, m, draw_noise(table, m, rng, count)) for m in all_masks(table.dim)]


def sample_dna(table, rng: RngStream, count=None):
    """DNA realisation on the closed grid; ``count`` returns a plain stacked array."""
    _check_dna(table)
    noises = [draw_noise(table, m, rng, count) for m in all_masks(table.dim)]
    vals = dna_from_noise(table, noises)
    if count is not None:
        return vals
    return _wrap(vals, table, rng)


def dna_direct_from_noise(table, noises, points):
    """Direct O(K n^d) summation of the DNA field at arbitrary ``points`` (K, d)."""
    _check_dna(table)
    d, n, a = table.dim, table.n, table.alpha
    pts = np.asarray(points, dtype=float).reshape(-1, d)
    total = np.zeros(len(pts))
    letters = "abc"[:d]
    for mask in all_masks(d):
        coef = np.asarray(noises[mask.index], dtype=float) * _mode_scale(table, mask)
        basis = []
        for j, b in enumerate(mask.bits):
            mu = np.arange(1, n + 1) if b else np.arange(n + 1)
            arg = np.pi * np.outer(pts[:, j], mu) / a
            basis.append(np.sin(arg) if b else np.cos(arg))
        expr = ",".join("k" + c for c in letters) + "," + letters + "->k"
        total += np.einsum(expr, *basis, coef)
    return total * 2.0 ** (-d / 2.0)


def sample_dna_direct(table, rng: RngStream, points):
    """Evaluate the field :func:`sample_dna` would produce for ``rng`` at ``points``."""
    noises = [draw_noise(table, m, rng) for m in all_masks(table.dim)]
    return dna_direct_from_noise(table, noises, points)


# --- naive periodic ---------------------------------------------------------

def periodic_noise_shape(table):
    return (2 * table.n + 1,) * table.dim


def periodic_from_noise(table: SpectrumTable, xi_re, xi_im, m=None):
    """Real and imaginary parts of W Lambda^{1/2} xi on ``m`` points per axis over [0, alpha)."""
    if table.convention != PERIODIC:
        raise ValueError("periodic sampling needs a table built with the alpha convention")
    n, d = table.n, table.dim
    m = 2 * n + 1 if m is None else int(m)
    if m < 2 * n + 1:
        raise ValueError("m must be at least 2n+1")
    mu = np.arange(-n, n + 1)
    sub = np.ix_(*([np.abs(mu)] * d))
    scale = np.sqrt(table.coeffs[sub] / table.alpha ** d)
    xi = (np.asarray(xi_re, dtype=float) + 1j * np.asarray(xi_im, dtype=float)) * scale
    batch = xi.shape[:xi.ndim - d]
    full = np.zeros(batch + (m,) * d, dtype=complex)
    full[(Ellipsis,) + np.ix_(*([mu % m] * d))] = xi
    z = tensor_apply(TensorPlan((FFT,) * d, (m,) * d), full)
    return z.real, z.imag


def sample_periodic(table, rng: RngStream, m=None, count=None):
    """Two independent realisations (real, imaginary part) with covariance phi^prd_{alpha, n}."""
    shape = periodic_noise_shape(table)
    if count is not None:
        shape = (count,) + shape
    g = rng.generator(0)
    re = g.standard_normal(shape)
    im = g.standard_normal(shape)
    a, b = periodic_from_noise(table, re, im, m)
    if count is not None:
        return a, b
    m = a.shape[0]
    return (FieldRealisation(a, table.alpha, table.n, table.alpha / m, rng.seed, rng.stream),
            FieldRealisation(b, table.alpha, table.n, table.alpha / m, rng.seed, rng.stream))


# --- circulant embedding ----------------------------------------------------

@dataclass(eq=False)
class CirculantEmbedding:
    """Exact sampler on ``n_grid`` points per axis over [0, 1], embedded with factor ``tau``."""

    model: object
    n_grid: int
    dim: int = 1
    tau: int = 1
    tol: float = 0.0
    eigenvalues: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_grid < 2:
            raise ValueError("n_grid must be >= 2")
        self.m = embedding_size(self.n_grid, self.tau)
        ev = ce_spectrum(self.model, self.tau, self.m, self.dim)
        if not is_nonnegative(ev, self.tol):
            raise NegativeSpectrum(
                f"circulant embedding with tau={self.tau} has negative eigenvalues "
                f"(min/max = {ev.min() / ev.max():.3g}); use minimal_embedding to pick tau")
        self.eigenvalues = np.maximum(ev, 0.0)

    @property
    def spacing(self):
        return 1.0 / (self.n_grid - 1)

    @property
    def noise_shape(self):
        return (self.m,) * self.dim

    def from_noise(self, xi_re, xi_im):
        d = self.dim
        xi = (np.asarray(xi_re, dtype=float) + 1j * np.asarray(xi_im, dtype=float))
        xi = xi * np.sqrt(self.eigenvalues / self.m ** d)
        z = tensor_apply(TensorPlan((FFT,) * d, (self.m,) * d), xi)
        keep = (Ellipsis,) + (slice(0, self.n_grid),) * d
        return z.real[keep], z.imag[keep]

    def sample(self, rng: RngStream, count=None):
        shape = self.noise_shape if count is None else (count,) + self.noise_shape
        g = rng.generator(0)
        re = g.standard_normal(shape)
        im = g.standard_normal(shape)
        return self.from_noise(re, im)


def sample_ce(model, n_grid, rng: RngStream, tau=1, dim=1, count=None, tol=0.0):
    ce = CirculantEmbedding(model, n_grid, dim, tau, tol)
    a, b = ce.sample(rng, count)
    if count is not None:
        return a, b
    n = n_grid - 1
    return (FieldRealisation(a, 1.0, n, ce.spacing, rng.seed, rng.stream),
            FieldRealisation(b, 1.0, n, ce.spacing, rng.seed, rng.stream))


# --- uniform sampler interface used by the statistics harness ---------------

def _grid_coords(shape, spacing):
    axes = [np.arange(s) * spacing for s in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


class DNASampler:
    """``draw(rng, count)`` -> array ``(count, (n+1,)*d)``."""

    name = "dna"

    def __init__(self, table: SpectrumTable):
        _check_dna(table)
        self.table = table
        self.shape = (table.n + 1,) * table.dim
        self.spacing = grid_spacing(table)

    def coords(self):
        return _grid_coords(self.shape, self.spacing)

    def draw(self, rng, count):
        return sample_dna(self.table, rng, count)


class SingleBCSampler(DNASampler):
    name = "single-bc"

    def __init__(self, table, mask):
        super().__init__(table)
        self.mask = mask

    def draw(self, rng, count):
        return sample_single_bc(self.table, self.mask, rng, count)


class PeriodicSampler:
    """Naive periodisation; real and imaginary parts are interleaved as separate realisations."""

    name = "periodic"

    def __init__(self, table, m=None):
        self.table = table
        self.m = 2 * table.n + 1 if m is None else m
        self.shape = (self.m,) * table.dim
        self.spacing = table.alpha / self.m

    def coords(self):
        return _grid_coords(self.shape, self.spacing)

    def draw(self, rng, count):
        half = -(-count // 2)
        a, b = sample_periodic(self.table, rng, self.m, half)
        return np.stack([a, b], axis=1).reshape((2 * half,) + self.shape)[:count]


class CESampler:
    name = "ce"

    def __init__(self, embedding: CirculantEmbedding):
        self.embedding = embedding
        self.shape = (embedding.n_grid,) * embedding.dim
        self.spacing = embedding.spacing

    def coords(self):
        return _grid_coords(self.shape, self.spacing)

    def draw(self, rng, count):
        half = -(-count // 2)
        a, b = self.embedding.sample(rng, half)
        return np.stack([a, b], axis=1).reshape((2 * half,) + self.shape)[:count]
