"""Monte-Carlo covariance estimation and analytic error bounds.

The Monte-Carlo harness splits ``N`` realisations into ``groups`` blocks,
each drawn from its own fixed RNG stream, so the result does not depend on
how the blocks are scheduled over threads.  Per-block moments are merged
with Chan's pairwise update.  Batches (``N / batches`` realisations each)
are unions of whole groups; the reported error is the mean over batches of
the batch-wise maximal covariance error, and its spread is the batch
standard deviation.  When there are more groups than batches the grouping
into batches is repeated over several random partitions and averaged.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import special
from threadpoolctl import threadpool_limits

from .covariance import CovarianceModel, matern_constant
from .periodisation import SpectrumTable, periodised_cov_spectral
from .sampler import RngStream

log = logging.getLogger(__name__)

DEFAULT_GROUPS = 40
# elements per draw call inside a group; fixed so chunking never depends on threads
_CHUNK_ELEMS = 4_000_000
_CHUNK_STRIDE = 1 << 20


class MomentAccumulator:
    """Streaming mean/co-moments of vectors of length ``size``.

    Keeps the diagonal co-moment, co-moments of the ``ref`` entries against
    all entries and, if ``full`` is set, the full co-moment matrix.
    """

    def __init__(self, size, ref=(), full=False):
        self.size = int(size)
        self.ref = np.asarray(ref, dtype=int)
        self.count = 0
        self.mean = np.zeros(self.size)
        self.m2 = np.zeros(self.size)
        self.cross = np.zeros((len(self.ref), self.size))
        self.full = np.zeros((self.size, self.size)) if full else None

    def _blank(self):
        return MomentAccumulator(self.size, self.ref, self.full is not None)

    def _combine(self, n_b, mean_b, m2_b, cross_b, full_b):
        n_a = self.count
        n = n_a + n_b
        if n_b == 0:
            return
        delta = mean_b - self.mean
        f = n_a * n_b / n
        self.mean = self.mean + delta * (n_b / n)
        self.m2 = self.m2 + m2_b + f * delta * delta
        if len(self.ref):
            self.cross = self.cross + cross_b + f * np.outer(delta[self.ref], delta)
        if self.full is not None:
            self.full = self.full + full_b + f * np.outer(delta, delta)
        self.count = n

    def update(self, batch):
        """Add rows of ``batch`` (shape ``(k, size)``, or a single vector)."""
        x = np.asarray(batch, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        x = x.reshape(len(x), -1)
        if x.shape[1] != self.size:
            raise ValueError("batch width does not match accumulator size")
        k = len(x)
        if k == 0:
            return self
        mb = x.mean(axis=0)
        dev = x - mb
        m2b = np.einsum("ij,ij->j", dev, dev)
        crossb = dev[:, self.ref].T @ dev if len(self.ref) else None
        fullb = dev.T @ dev if self.full is not None else None
        self._combine(k, mb, m2b, crossb, fullb)
        return self

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        """Return a new accumulator equal to accumulating both inputs."""
        if other.size != self.size or not np.array_equal(other.ref, self.ref):
            raise ValueError("incompatible accumulators")
        out = self.copy()
        out._combine(other.count, other.mean, other.m2, other.cross, other.full)
        return out

    def copy(self):
        out = self._blank()
        out.count = self.count
        out.mean = self.mean.copy()
        out.m2 = self.m2.copy()
        out.cross = self.cross.copy()
        if self.full is not None:
            out.full = self.full.copy()
        return out

    def variance(self, ddof=1):
        return self.m2 / (self.count - ddof)

    def covariance_rows(self, ddof=1):
        return self.cross / (self.count - ddof)

    def covariance(self, ddof=1):
        if self.full is None:
            raise ValueError("full co-moments were not tracked")
        return self.full / (self.count - ddof)


def merge_all(accs):
    out = accs[0].copy()
    for a in accs[1:]:
        out = out.merge(a)
    return out


@dataclass(frozen=True, eq=False)
class ProbeSet:
    """Which covariance entries are compared.

    ``select`` indexes the flattened field.  With ``full`` the complete
    covariance among the selected points is used, otherwise the rows of the
    ``ref`` positions (within ``select``) plus all variances.
    """

    select: np.ndarray
    ref: tuple = (0,)
    full: bool = False

    @classmethod
    def rows(cls, size, ref=(0,)):
        return cls(np.arange(size), tuple(ref), False)

    @classmethod
    def diagonal(cls, shape):
        """Points (i, i, ..) of a cubic grid, compared pairwise."""
        n = shape[0]
        if any(s != n for s in shape):
            raise ValueError("diagonal probe needs a cubic grid")
        idx = np.ravel_multi_index(tuple(np.arange(n) for _ in shape), shape)
        return cls(idx, (), True)

    @classmethod
    def default(cls, shape):
        return cls.rows(int(np.prod(shape))) if len(shape) == 1 else cls.diagonal(shape)

    def accumulator(self):
        return MomentAccumulator(len(self.select), () if self.full else self.ref, self.full)

    def target(self, coords, cov):
        """Reference values (rows/variances, or full matrix) from ``cov(delta)``."""
        x = coords[self.select]
        if self.full:
            return cov(x[:, None, :] - x[None, :, :])
        rows = cov(x[None, :, :] - x[np.asarray(self.ref)][:, None, :])
        var = cov(np.zeros((1, x.shape[1])))
        return rows, np.broadcast_to(var, (len(x),))

    def error(self, acc, target):
        if self.full:
            return float(np.max(np.abs(acc.covariance() - target)))
        rows, var = target
        e_rows = np.max(np.abs(acc.covariance_rows() - rows))
        e_var = np.max(np.abs(acc.variance() - var))
        return float(max(e_rows, e_var))


def _stationary_target(model):
    return lambda delta: model.stationary(delta)


def periodised_target(table: SpectrumTable):
    """Covariance target phi^prd_{P,n} instead of the pristine one."""
    return lambda delta: periodised_cov_spectral(table, delta)


def _run_group(sampler, probe, seed, g, count, transform=None):
    acc = probe.accumulator()
    width = int(np.prod(sampler.shape))
    chunk = max(1, _CHUNK_ELEMS // width)
    for c, start in enumerate(range(0, count, chunk)):
        k = min(chunk, count - start)
        fields = sampler.draw(RngStream(seed, g * _CHUNK_STRIDE + c), k)
        flat = fields.reshape(k, -1)
        if transform is not None:
            flat = transform(flat)
        acc.update(flat[:, probe.select])
    return acc


def accumulate_groups(sampler, probe, N, groups, seed=0, threads=1, transform=None):
    """One accumulator per group, in group order (independent of ``threads``)."""
    if N % groups:
        raise ValueError(f"N={N} must be divisible by the number of groups ({groups})")
    per = N // groups
    with threadpool_limits(1):
        if threads <= 1:
            return [_run_group(sampler, probe, seed, g, per, transform) for g in range(groups)]
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(lambda g: _run_group(sampler, probe, seed, g, per, transform), range(groups)))


@dataclass
class CovErrorReport:
    """Monte-Carlo maximal covariance error.

    ``max_error`` is the mean of ``batch_errors`` (each from ``N/batches``
    realisations); ``batch_sd`` their standard deviation; ``std_error`` the
    standard error of ``max_error``; ``pooled_error`` uses all ``N``.
    """

    max_error: float
    batch_errors: np.ndarray
    batch_sd: float
    std_error: float
    pooled_error: float
    params: dict = field(default_factory=dict)

    def as_row(self):
        row = dict(self.params)
        row.update(max_error=self.max_error, batch_sd=self.batch_sd,
                   std_error=self.std_error, pooled_error=self.pooled_error)
        return row


def _default_groups(batches):
    return DEFAULT_GROUPS if DEFAULT_GROUPS % batches == 0 else batches


def empirical_max_cov_error(sampler, model, N, batches=DEFAULT_GROUPS, seed=0, *, groups=None,
                            partitions=20, probe=None, threads=1, target=None, params=None):
    """Maximal covariance error of ``sampler`` against ``model`` (or ``target``).

    ``target`` is a function of separation vectors (default: the pristine
    stationary covariance).  ``partitions`` is used only when groups
    outnumber batches.
    """
    if N <= 0 or batches <= 0:
        raise ValueError("N and batches must be positive")
    if N % batches:
        raise ValueError("N must be divisible by batches")
    groups = _default_groups(batches) if groups is None else groups
    if groups % batches:
        raise ValueError("groups must be a multiple of batches")
    probe = ProbeSet.default(sampler.shape) if probe is None else probe
    cov = _stationary_target(model) if target is None else target
    tgt = probe.target(sampler.coords(), cov)
    accs = accumulate_groups(sampler, probe, N, groups, seed, threads)

    per_batch = groups // batches
    n_part = 1 if per_batch == 1 else partitions
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(1 << 40,))))
    errs = np.empty((n_part, batches))
    for p in range(n_part):
        order = np.arange(groups) if p == 0 else rng.permutation(groups)
        for b in range(batches):
            members = [accs[i] for i in order[b * per_batch:(b + 1) * per_batch]]
            errs[p, b] = probe.error(merge_all(members), tgt)
    pooled = probe.error(merge_all(accs), tgt)
    if batches > 1:
        sd = float(np.sqrt(np.mean(errs.var(axis=1, ddof=1))))
    else:
        sd = float("nan")
    report = CovErrorReport(float(errs.mean()), errs.ravel(), sd, sd / np.sqrt(batches), pooled,
                            dict(params or {}, N=N, batches=batches, groups=groups, seed=seed))
    log.info("cov_error %s max_error=%.6g batch_sd=%.3g pooled=%.6g",
             " ".join(f"{k}={v}" for k, v in report.params.items()), report.max_error, sd, pooled)
    return report


def marginal_variance_profile(sampler, N, seed=0, groups=DEFAULT_GROUPS, threads=1):
    """Pointwise empirical variance over the sampler grid and its Gaussian standard error."""
    size = int(np.prod(sampler.shape))
    probe = ProbeSet(np.arange(size), (), False)
    accs = accumulate_groups(sampler, probe, N, groups, seed, threads)
    var = merge_all(accs).variance().reshape(sampler.shape)
    se = var * np.sqrt(2.0 / (N - 1))
    return var, se


def analytic_max_cov_error(model, alpha, n, dim, probe_grid, convention="dna"):
    """max over probes of |phi^prd_{P,n}(delta) - phi(delta)| (no Monte-Carlo)."""
    table = SpectrumTable.build(model, alpha, n, dim, convention)
    deltas = np.asarray(probe_grid, dtype=float)
    if dim == 1 and (deltas.ndim == 0 or deltas.shape[-1] != 1):
        deltas = deltas[..., None]
    if np.any(np.abs(deltas) > 1 + 1e-12):
        raise ValueError("probe points must lie in [-1, 1]^d")
    approx = periodised_cov_spectral(table, deltas)
    exact = model.stationary(deltas)
    return float(np.max(np.abs(approx - exact)))


# --- analytic bounds -----------------------------------------------------------

def bound_theta(nu, dim):
    return special.gamma(dim + nu + 0.5) ** (-1.0 / (dim + nu - 0.5))


def periodisation_precondition(nu, ell, alpha, dim):
    """Return None if the periodisation bound applies, else the violated condition."""
    kappa = np.sqrt(2.0 * nu) / ell
    if nu < 0.5:
        return f"nu >= 1/2 (got nu={nu})"
    if alpha < 1:
        return f"alpha >= 1 (got alpha={alpha})"
    if not 2 * alpha * kappa > 1.5:
        return f"2*alpha*kappa > 3/2 (got {2 * alpha * kappa:.4g})"
    if not 2 * alpha * kappa > dim + nu - 1.5:
        return f"2*alpha*kappa > d + nu - 3/2 (got {2 * alpha * kappa:.4g} <= {dim + nu - 1.5:.4g})"
    return None


def periodisation_error_bound(nu, ell, alpha, dim):
    """Upper bound on sup_{[-1,1]^d} |phi^prd_{2 alpha} - phi| for Matérn covariances."""
    bad = periodisation_precondition(nu, ell, alpha, dim)
    if bad:
        raise ValueError(f"periodisation bound needs {bad}")
    kappa = np.sqrt(2.0 * nu) / ell
    theta = bound_theta(nu, dim)
    c1 = dim * 2.0 ** (dim + 2 * nu - 1) * np.exp(1.0 + kappa)
    ak = alpha * kappa
    return float(c1 * np.exp(-2 * theta * ak)
                 * (ak ** (nu - 0.5) + special.gamma(dim + nu + 0.5) / ak ** (1 + dim)))


def truncation_error_bound(nu, ell, alpha, n, dim):
    """Upper bound on sup |phi^prd_{2 alpha, n} - phi^prd_{2 alpha}| for Matérn covariances."""
    if min(nu, ell, alpha, n) <= 0:
        raise ValueError("parameters must be positive")
    kappa = np.sqrt(2.0 * nu) / ell
    c2 = dim * matern_constant(nu, dim) * (2 * kappa) ** dim * np.pi ** (-(2 * nu + dim)) * (1 + 1 / (2 * nu))
    return float(c2 * (alpha * kappa) ** (2 * nu + dim) * float(n) ** (-2 * nu))


def matern_bounds(model: CovarianceModel, alpha, n, dim):
    """(periodisation bound or nan, truncation bound) for a Matérn model."""
    if model.family != "matern":
        return float("nan"), float("nan")
    try:
        pb = periodisation_error_bound(model.nu, model.ell, alpha, dim)
    except ValueError:
        pb = float("nan")
    return pb, truncation_error_bound(model.nu, model.ell, alpha, n, dim)
