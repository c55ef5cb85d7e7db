"""P1 finite elements for the Whittle SPDE ``(kappa^2 - Laplace) u = s W`` on squares.

Only the case nu = 1 in two dimensions is handled (first-order operator
power).  Nodes of a structured right-triangle mesh are numbered
``ix * (m+1) + iy`` so nodal vectors reshape to ``(m+1, m+1)`` arrays indexed
``[ix, iy]``.  Dirichlet conditions are imposed by dropping boundary nodes;
Neumann conditions are natural.  The white-noise load uses an exact
element-wise factor of the consistent mass matrix.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .covariance import matern_constant
from .sampler import BoundaryMask, RngStream, all_masks

log = logging.getLogger(__name__)

NU = 1.0
DIM = 2


class MeshError(ValueError):
    """Degenerate mesh (a local mass matrix could not be factorised)."""


class SolverError(RuntimeError):
    """Linear solve did not reach the residual tolerance."""


@dataclass(eq=False)
class StructuredMesh:
    """Uniform right-triangle mesh of (0, L)^2 with ``m`` cells per axis."""

    m: int
    length: float = 1.0
    nodes: np.ndarray = field(init=False, repr=False)
    triangles: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        m = self.m
        t = np.linspace(0.0, self.length, m + 1)
        X, Y = np.meshgrid(t, t, indexing="ij")
        self.nodes = np.column_stack([X.ravel(), Y.ravel()])
        ix, iy = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
        a = (ix * (m + 1) + iy).ravel()
        b = a + (m + 1)
        c = b + 1
        d = a + 1
        self.triangles = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])

    @property
    def h(self):
        return self.length / self.m

    @property
    def n_nodes(self):
        return (self.m + 1) ** 2

    @property
    def shape(self):
        return (self.m + 1, self.m + 1)

    def on_face(self, axis):
        """Nodes on the two faces normal to ``axis``."""
        k = np.arange(self.m + 1)
        idx = np.meshgrid(k, k, indexing="ij")[axis].ravel()
        return (idx == 0) | (idx == self.m)

    def boundary_tags(self):
        """Boolean array (n_nodes, 2): node lies on a face normal to axis j."""
        return np.column_stack([self.on_face(0), self.on_face(1)])


def _element_geometry(mesh):
    p = mesh.nodes[mesh.triangles]  # (T, 3, 2)
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    area = 0.5 * np.abs(det)
    B = np.stack([e1, e2], axis=2)  # columns are edge vectors
    ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    grads = ref @ np.linalg.inv(B)  # (T, 3, 2)
    return area, grads


_MASS_REF = (np.ones((3, 3)) + np.eye(3)) / 12.0


def assemble_matrices(mesh: StructuredMesh):
    """Full stiffness K and consistent mass M (csr), before boundary conditions."""
    area, grads = _element_geometry(mesh)
    Ke = area[:, None, None] * np.einsum("tik,tjk->tij", grads, grads)
    Me = area[:, None, None] * _MASS_REF
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    shape = (mesh.n_nodes,) * 2
    K = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=shape).tocsr()
    M = sp.coo_matrix((Me.ravel(), (rows, cols)), shape=shape).tocsr()
    return K, M


def retained_nodes(mesh: StructuredMesh, mask: BoundaryMask):
    """Indices of nodes kept after eliminating Dirichlet faces (Dirichlet wins at corners)."""
    drop = np.zeros(mesh.n_nodes, dtype=bool)
    for j, b in enumerate(mask.bits):
        if b:
            drop |= mesh.on_face(j)
    return np.flatnonzero(~drop)


@dataclass(frozen=True)
class BVPConfig:
    mask: BoundaryMask
    ell: float
    length: float = 1.0
    nu: float = NU

    def __post_init__(self):
        if self.nu != NU:
            raise ValueError("only nu = 1 (operator power beta = 1 in d = 2) is supported")
        if self.mask.dim != DIM:
            raise ValueError("the finite-element solver is two-dimensional")
        if not self.ell > 0:
            raise ValueError("ell must be positive")

    @property
    def kappa(self):
        return np.sqrt(2.0 * self.nu) / self.ell

    @property
    def scaling(self):
        """sqrt(C_nu) kappa^nu, which gives unit marginal variance."""
        return float(np.sqrt(matern_constant(self.nu, DIM)) * self.kappa ** self.nu)


def assemble(mesh: StructuredMesh, config: BVPConfig):
    """(A, M) on retained nodes with A = kappa^2 M + K."""
    K, M = assemble_matrices(mesh)
    keep = retained_nodes(mesh, config.mask)
    A = config.kappa ** 2 * M + K
    return A[keep][:, keep].tocsr(), M[keep][:, keep].tocsr()


class WhiteNoise:
    """Load vectors g with E[g g^T] = M, drawn as g = G xi.

    G stacks the Cholesky factors of the element mass matrices, one 3x3
    block per triangle, so G G^T equals the assembled mass matrix exactly.
    """

    def __init__(self, mesh: StructuredMesh):
        area, _ = _element_geometry(mesh)
        Me = area[:, None, None] * _MASS_REF
        try:
            L = np.linalg.cholesky(Me)
        except np.linalg.LinAlgError as exc:
            raise MeshError("element mass matrix is not positive definite") from exc
        T = len(mesh.triangles)
        rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
        cols = (3 * np.arange(T)[:, None, None] + np.arange(3)[None, None, :]).repeat(3, axis=1).ravel()
        self.factor = sp.csr_matrix((L.ravel(), (rows, cols)), shape=(mesh.n_nodes, 3 * T))
        self.n_noise = 3 * T

    def load(self, xi):
        """Loads for noise ``xi`` of shape (n_noise,) or (count, n_noise)."""
        xi = np.asarray(xi, dtype=float)
        return (self.factor @ xi.T).T


def sample_white_noise_load(noise: WhiteNoise, rng, count=None):
    """Draw white-noise loads; ``rng`` is a numpy Generator or an :class:`RngStream`."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    shape = noise.n_noise if count is None else (count, noise.n_noise)
    return noise.load(gen.standard_normal(shape))


class SPDESolver:
    """Factorised operator for one boundary mask; ``solve`` maps noise to nodal fields."""

    def __init__(self, mesh: StructuredMesh, config: BVPConfig, method="direct", noise=None):
        if abs(config.length - mesh.length) > 1e-12 * mesh.length:
            raise ValueError("config length and mesh length differ")
        self.mesh, self.config, self.method = mesh, config, method
        self.keep = retained_nodes(mesh, config.mask)
        self.A, self.M = assemble(mesh, config)
        self.noise = WhiteNoise(mesh) if noise is None else noise
        if method == "direct":
            self._lu = spla.splu(self.A.tocsc())
        elif method != "cg":
            raise ValueError("method must be 'direct' or 'cg'")
        log.debug("spde_setup mask=%s m=%d length=%g nnz=%d", config.mask, mesh.m, mesh.length, self.A.nnz)

    def _solve(self, rhs):
        if self.method == "direct":
            u = self._lu.solve(np.asfortranarray(rhs))
        else:
            u = np.empty_like(rhs)
            for k in range(rhs.shape[1]):
                u[:, k], _ = spla.cg(self.A, rhs[:, k], rtol=1e-12, atol=0.0)
        res = np.linalg.norm(self.A @ u - rhs, axis=0)
        scale = np.maximum(np.linalg.norm(rhs, axis=0), np.finfo(float).tiny)
        worst = float(np.max(res / scale)) if rhs.size else 0.0
        if worst > 1e-10:
            raise SolverError(f"relative residual {worst:.3g} exceeds 1e-10")
        return u

    def from_noise(self, xi):
        """Nodal fields (count, n_nodes) for noise (count, n_noise); dropped nodes are 0."""
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        g = self.noise.load(xi)[:, self.keep]
        u = self._solve(self.config.scaling * g.T)
        out = np.zeros((len(xi), self.mesh.n_nodes))
        out[:, self.keep] = u.T
        return out

    def sample(self, rng: RngStream, count=1):
        gen = rng.generator(self.config.mask.index)
        return self.from_noise(gen.standard_normal((count, self.noise.n_noise)))


def solve_single_bc(config: BVPConfig, mesh: StructuredMesh, rng: RngStream, count=None):
    """Nodal realisation(s) shaped (m+1, m+1), or (count, m+1, m+1)."""
    u = SPDESolver(mesh, config).sample(rng, 1 if count is None else count)
    u = u.reshape((-1,) + mesh.shape)
    return u[0] if count is None else u


def _unit_box(mesh_m_per_unit, alpha):
    m_tot = int(round(alpha * mesh_m_per_unit))
    if abs(m_tot - alpha * mesh_m_per_unit) > 1e-9:
        raise ValueError("alpha * m must be an integer so the unit square is meshed exactly")
    return StructuredMesh(m_tot, float(alpha))


class FEMSampler:
    """Averages SPDE solutions over ``masks`` on (0, alpha)^2 and restricts to a unit square.

    With all four masks this is the DNA construction (weight 1/2 each); with
    the pure Neumann mask alone it is the classical oversampling approach.
    The unit square sits at the origin corner unless ``centred`` is set, in
    which case it is padded by (alpha - 1)/2 on every side.
    """

    def __init__(self, ell, m, alpha=1.0, masks=None, method="direct", centred=False):
        if alpha < 1:
            raise ValueError("alpha must be >= 1")
        self.mesh = _unit_box(m, alpha)
        self.m = int(m)
        self.alpha = float(alpha)
        pad = (self.mesh.m - self.m) / 2.0 if centred else 0.0
        if pad != int(pad):
            raise ValueError("(alpha - 1) * m must be even to centre the unit square")
        self.offset = int(pad)
        self.masks = all_masks(DIM) if masks is None else list(masks)
        noise = WhiteNoise(self.mesh)
        self.solvers = [SPDESolver(self.mesh, BVPConfig(mk, ell, self.mesh.length), method, noise)
                        for mk in self.masks]
        self.weight = 2.0 ** (-DIM / 2.0) if len(self.masks) == 2 ** DIM else 1.0
        self.shape = (self.m + 1, self.m + 1)
        self.spacing = 1.0 / self.m
        self.name = "spde-dna" if len(self.masks) == 4 else "spde-" + "+".join(map(str, self.masks))

    def coords(self):
        t = np.arange(self.m + 1) * self.spacing
        X, Y = np.meshgrid(t, t, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel()])

    def components(self, rng: RngStream, count):
        """Unweighted per-mask fields restricted to the unit square."""
        out = []
        for s in self.solvers:
            u = s.sample(rng, count).reshape((count,) + self.mesh.shape)
            o = self.offset
            out.append(u[:, o:o + self.m + 1, o:o + self.m + 1])
        return out

    def draw(self, rng: RngStream, count):
        return self.weight * sum(self.components(rng, count))


def solve_dna(mesh_m, ell, rng: RngStream, count=None, alpha=1.0):
    """DNA finite-element realisation(s) on the unit square grid with ``mesh_m`` cells per unit."""
    u = FEMSampler(ell, mesh_m, alpha).draw(rng, 1 if count is None else count)
    return u[0] if count is None else u


def neumann_sampler(ell, target_m, extension_alpha=1.0, method="direct"):
    # padding on all sides; at the origin corner the reflection bump would never leave the target
    return FEMSampler(ell, target_m, extension_alpha, [BoundaryMask((0, 0))], method, centred=True)


def solve_neumann_oversampled(ell, target_m, extension_alpha, rng: RngStream, count=None):
    """Pure Neumann solve on (0, alpha)^2 at spacing 1/target_m, restricted to the centred unit square."""
    u = neumann_sampler(ell, target_m, extension_alpha).draw(rng, 1 if count is None else count)
    return u[0] if count is None else u


def laplace_eigenvalues(mesh: StructuredMesh, mask: BoundaryMask, k=5):
    """k smallest generalised eigenpairs of (K, M) after boundary elimination."""
    K, M = assemble_matrices(mesh)
    keep = retained_nodes(mesh, mask)
    K = K[keep][:, keep].tocsc()
    M = M[keep][:, keep].tocsc()
    vals, vecs = spla.eigsh(K, k=k, M=M, sigma=-1.0, which="LM")
    order = np.argsort(vals)
    return vals[order], vecs[:, order], keep


def exact_laplace_eigenvalues(mask: BoundaryMask, length, k=5):
    """Smallest k values of pi^2 |mu|^2 / L^2 over the mask's index set."""
    lo = [1 if b else 0 for b in mask.bits]
    r = int(np.ceil(np.sqrt(k))) + 3
    vals = sorted((np.pi / length) ** 2 * (a * a + b * b)
                  for a in range(lo[0], lo[0] + r) for b in range(lo[1], lo[1] + r))
    return np.array(vals[:k])
