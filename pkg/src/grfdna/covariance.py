"""Isotropic covariance families and their spectral densities.

Three families are supported: Matérn (smoothness ``nu``), Gaussian and
Cauchy.  All are normalised to unit marginal variance.  ``rho`` works on the
scaled distance ``s = |delta| / ell``, ``stationary`` on separation vectors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

FAMILIES = ("matern", "gaussian", "cauchy")

# beyond this the Matérn kernel is below double precision
_MATERN_CUTOFF = 700.0


class UnsupportedConfiguration(ValueError):
    """Raised when a model is used outside the dimensions it is defined for."""


@dataclass(frozen=True)
class CovarianceModel:
    """Isotropic covariance model.

    Parameters
    ----------
    family : {'matern', 'gaussian', 'cauchy'}
    ell : float
        Correlation length.
    nu : float, optional
        Matérn smoothness; ignored by the other families.
    """

    family: str
    ell: float
    nu: float | None = None

    def __post_init__(self):
        fam = str(self.family).lower()
        if fam not in FAMILIES:
            raise ValueError(f"unknown covariance family {self.family!r}")
        object.__setattr__(self, "family", fam)
        if not self.ell > 0:
            raise ValueError("ell must be positive")
        if fam == "matern":
            if self.nu is None or not self.nu > 0:
                raise ValueError("Matern model needs nu > 0")
            object.__setattr__(self, "nu", float(self.nu))
        else:
            object.__setattr__(self, "nu", None)
        object.__setattr__(self, "ell", float(self.ell))

    @classmethod
    def matern(cls, nu, ell):
        return cls("matern", ell, nu)

    @classmethod
    def gaussian(cls, ell):
        return cls("gaussian", ell)

    @classmethod
    def cauchy(cls, ell):
        return cls("cauchy", ell)

    @property
    def kappa(self) -> float:
        """sqrt(2 nu) / ell (Matérn only)."""
        if self.family != "matern":
            raise UnsupportedConfiguration("kappa is only defined for Matern")
        return np.sqrt(2.0 * self.nu) / self.ell

    def label(self) -> str:
        if self.family == "matern":
            return f"matern(nu={self.nu:g},ell={self.ell:g})"
        return f"{self.family}(ell={self.ell:g})"

    def rho(self, s):
        return rho(self, s)

    def stationary(self, delta):
        return stationary(self, delta)

    def spectral_density(self, y, dim=1):
        return SpectralDensity(self, dim)(y)


def _matern_rho(nu, s):
    x = np.sqrt(2.0 * nu) * s
    out = np.zeros_like(x)
    zero = x == 0
    out[zero] = 1.0
    mid = (~zero) & (x <= _MATERN_CUTOFF)
    if np.any(mid):
        xm = x[mid]
        # log form keeps large nu and small x from overflowing
        with np.errstate(divide="ignore", over="ignore"):
            logk = np.log(special.kve(nu, xm))
        val = np.exp((1.0 - nu) * np.log(2.0) - special.gammaln(nu)
                     + nu * np.log(xm) + logk - xm)
        # K_nu overflows only for tiny arguments, where rho is 1 to machine precision
        val[~np.isfinite(logk)] = 1.0
        out[mid] = np.minimum(val, 1.0)
    return out


def rho(model: CovarianceModel, s):
    """Isotropic covariance as a function of the scaled distance ``s >= 0``."""
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr < 0) or np.any(np.isnan(s_arr)):
        raise ValueError("rho is defined for s >= 0 only")
    flat = np.atleast_1d(s_arr).ravel()
    if model.family == "matern":
        out = _matern_rho(model.nu, flat)
    elif model.family == "gaussian":
        out = np.exp(-0.5 * flat ** 2)
    else:
        out = 1.0 / (1.0 + flat ** 2)
    out = out.reshape(s_arr.shape)
    return float(out) if out.ndim == 0 else out


def stationary(model: CovarianceModel, delta):
    """phi(delta) = rho(|delta| / ell).  The last axis of ``delta`` is the dimension.

    A scalar or 1-d input of length 1 is treated as a single 1-d separation.
    """
    d = np.asarray(delta, dtype=float)
    if d.ndim == 0:
        r = np.abs(d)
    else:
        r = np.sqrt(np.sum(d * d, axis=-1))
    return rho(model, r / model.ell)


def matern_constant(nu, dim):
    """C_nu = (4 pi)^{d/2} Gamma(nu + d/2) / Gamma(nu)."""
    return (4.0 * np.pi) ** (dim / 2.0) * np.exp(special.gammaln(nu + dim / 2.0) - special.gammaln(nu))


@dataclass(frozen=True)
class SpectralDensity:
    """Fourier transform of ``stationary`` in ``dim`` dimensions.

    The transform convention is ``f^(y) = int f(x) exp(-2 pi i x.y) dx``.
    """

    model: CovarianceModel
    dim: int = 1

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ValueError("dim must be 1, 2 or 3")
        if self.model.family != "matern" and self.dim != 1:
            raise UnsupportedConfiguration(
                f"{self.model.family} spectral density is only available for d=1")

    def radial(self, r):
        """Density as a function of |y|."""
        r = np.abs(np.asarray(r, dtype=float))
        m, d = self.model, self.dim
        ell = m.ell
        if m.family == "matern":
            nu = m.nu
            # ell^d C_nu (2nu)^nu (2nu + (2 pi ell r)^2)^{-(nu+d/2)}, rearranged
            t = (2.0 * np.pi * ell * r) ** 2 / (2.0 * nu)
            return (ell ** d * matern_constant(nu, d) * (2.0 * nu) ** (-d / 2.0)
                    * np.exp(-(nu + d / 2.0) * np.log1p(t)))
        if m.family == "gaussian":
            return np.sqrt(2.0 * np.pi) * ell * np.exp(-2.0 * np.pi ** 2 * ell ** 2 * r ** 2)
        return np.pi * ell * np.exp(-2.0 * np.pi * ell * r)

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        if self.dim == 1 and (y.ndim == 0 or y.shape[-1] != 1):
            r = np.abs(y)
        else:
            if y.shape[-1] != self.dim:
                raise ValueError(f"expected last axis of length {self.dim}")
            r = np.sqrt(np.sum(y * y, axis=-1))
        out = self.radial(r)
        return float(out) if np.ndim(out) == 0 else out

    value = __call__


def spectral_density(sd: SpectralDensity, y):
    return sd(y)


def assumption_constants(model: CovarianceModel, dim: int):
    """(A, eps) such that phi^(y) <= A (1+|y|)^{-(d+eps)} is claimed for Matérn."""
    if model.family != "matern":
        raise UnsupportedConfiguration("assumption constants are only given for Matern")
    nu = model.nu
    A = matern_constant(nu, dim) * model.ell ** dim * nu ** (-dim / 2.0) * 2.0 ** (2 * nu + dim / 2.0)
    return A, 2.0 * nu


def check_assumption_bound(model: CovarianceModel, dim: int, samples) -> bool:
    """True iff phi^(y) <= A (1+|y|)^{-(d+2nu)} at every sample point.

    The ratio of the two sides is (kappa (1+|y|) / (2 sqrt(kappa^2 + 4 pi^2 |y|^2)))^{2nu+d},
    so the inequality holds for every y exactly when kappa = sqrt(2nu)/ell
    <= 2 sqrt(3) pi.  For larger kappa this returns False at suitable |y|.
    """
    A, eps = assumption_constants(model, dim)
    y = np.asarray(samples, dtype=float)
    if dim == 1 and (y.ndim <= 1):
        r = np.abs(y)
    else:
        y = y.reshape(-1, dim)
        r = np.sqrt(np.sum(y * y, axis=-1))
    lhs = SpectralDensity(model, dim).radial(r)
    rhs = A * (1.0 + r) ** (-(dim + eps))
    return bool(np.all(lhs <= rhs * (1 + 1e-12)))
