import math

import numpy as np
import pytest
import scipy.sparse.linalg as spla

from grfdna.covariance import CovarianceModel
from grfdna.fem import (BVPConfig, FEMSampler, SPDESolver, StructuredMesh, WhiteNoise, assemble,
                        assemble_matrices, exact_laplace_eigenvalues, laplace_eigenvalues, neumann_sampler,
                        retained_nodes, sample_white_noise_load, solve_dna, solve_neumann_oversampled,
                        solve_single_bc)
from grfdna.periodisation import periodised_cov_lattice
from grfdna.sampler import BoundaryMask, RngStream, all_masks
from grfdna.stats import empirical_max_cov_error
from oracles import dense_map

ELL = 0.25
NEUMANN = BoundaryMask((0, 0))
DIRICHLET = BoundaryMask((1, 1))


def exact_cov(m, mask, ell=ELL, length=1.0):
    """s^2 A^{-1} M A^{-1} by dense inversion, embedded with zeros at eliminated nodes."""
    mesh = StructuredMesh(m, length)
    cfg = BVPConfig(mask, ell, length)
    A, M = assemble(mesh, cfg)
    keep = retained_nodes(mesh, mask)
    X = spla.splu(A.tocsc()).solve(np.eye(A.shape[0]))
    C = np.zeros((mesh.n_nodes,) * 2)
    C[np.ix_(keep, keep)] = cfg.scaling ** 2 * (X @ (M @ X))
    return C


def test_mesh_structure():
    mesh = StructuredMesh(4, 2.0)
    assert mesh.n_nodes == 25 and len(mesh.triangles) == 32 and mesh.h == 0.5
    p = mesh.nodes[mesh.triangles]
    e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    cross = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    assert np.all(cross > 0)
    assert np.sum(0.5 * cross) == pytest.approx(4.0)
    tags = mesh.boundary_tags()
    assert tags.sum() == 20  # four corners counted on both faces
    with pytest.raises(ValueError):
        StructuredMesh(0)


@pytest.mark.parametrize("length", [1.0, 2.5])
def test_matrix_identities(length):
    K, M = assemble_matrices(StructuredMesh(12, length))
    one = np.ones(K.shape[0])
    assert np.max(np.abs(K @ one)) <= 1e-12
    assert one @ (M @ one) == pytest.approx(length ** 2, rel=1e-12)
    assert abs(K - K.T).max() == 0 and abs(M - M.T).max() == 0


def test_dirichlet_elimination_at_corners():
    mesh = StructuredMesh(4)
    keep = retained_nodes(mesh, BoundaryMask((1, 0)))
    ix = keep // 5
    assert np.all((ix > 0) & (ix < 4))
    assert len(keep) == 15
    assert len(retained_nodes(mesh, DIRICHLET)) == 9
    assert len(retained_nodes(mesh, NEUMANN)) == 25


def test_white_noise_factor_is_exact():
    mesh = StructuredMesh(6, 1.3)
    noise = WhiteNoise(mesh)
    _, M = assemble_matrices(mesh)
    G = noise.factor
    assert abs(G @ G.T - M).max() <= 1e-15
    assert np.all(noise.load(np.zeros(noise.n_noise)) == 0)


def test_white_noise_monte_carlo():
    mesh = StructuredMesh(8)
    noise = WhiteNoise(mesh)
    _, M = assemble_matrices(mesh)
    M = M.toarray()
    N = 100_000
    g = sample_white_noise_load(noise, np.random.default_rng(0), N)
    emp = g.T @ g / N
    se = np.sqrt((np.outer(np.diag(M), np.diag(M)) + M ** 2) / N)
    assert np.max(np.abs(emp - M) / se) <= 5


def test_loads_for_two_masks_independent():
    mesh = StructuredMesh(4)
    noise = WhiteNoise(mesh)
    N = 100_000
    rng = RngStream(5)
    a = noise.load(rng.generator(0).standard_normal((N, noise.n_noise)))
    b = noise.load(rng.generator(1).standard_normal((N, noise.n_noise)))
    a /= a.std(axis=0)
    b /= b.std(axis=0)
    assert np.max(np.abs(a.T @ b / N)) <= 5 / math.sqrt(N)


def test_config_validation():
    with pytest.raises(ValueError, match="nu = 1"):
        BVPConfig(NEUMANN, 0.25, nu=2.0)
    with pytest.raises(ValueError):
        BVPConfig(BoundaryMask((0,)), 0.25)
    cfg = BVPConfig(NEUMANN, 0.25)
    assert cfg.kappa == pytest.approx(math.sqrt(2) / 0.25)
    assert cfg.scaling ** 2 == pytest.approx(4 * math.pi * cfg.kappa ** 2)
    with pytest.raises(ValueError):
        SPDESolver(StructuredMesh(4, 2.0), cfg)


@pytest.mark.parametrize("mask", all_masks(2), ids=str)
def test_dense_map_matches_operator_covariance(mask):
    mesh = StructuredMesh(8)
    solver = SPDESolver(mesh, BVPConfig(mask, ELL))
    H = dense_map(lambda p: solver.from_noise(p[0]), [(solver.noise.n_noise,)])
    C = exact_cov(8, mask)
    np.testing.assert_allclose(H @ H.T, C, rtol=0, atol=1e-10 * np.abs(C).max())
    dropped = np.setdiff1d(np.arange(mesh.n_nodes), solver.keep)
    assert np.all(H[dropped] == 0)


def test_dirichlet_boundary_values_zero_and_zero_noise():
    u = solve_single_bc(BVPConfig(DIRICHLET, ELL), StructuredMesh(10), RngStream(1), count=3)
    assert u.shape == (3, 11, 11)
    for face in (u[:, 0], u[:, -1], u[:, :, 0], u[:, :, -1]):
        assert np.all(face == 0)
    s = SPDESolver(StructuredMesh(6), BVPConfig(NEUMANN, ELL))
    assert np.all(s.from_noise(np.zeros((2, s.noise.n_noise))) == 0)


def test_cg_agrees_with_direct():
    mesh = StructuredMesh(10)
    cfg = BVPConfig(BoundaryMask((0, 1)), ELL)
    a = SPDESolver(mesh, cfg).sample(RngStream(3), 4)
    b = SPDESolver(mesh, cfg, method="cg").sample(RngStream(3), 4)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-8 * np.abs(a).max())
    with pytest.raises(ValueError):
        SPDESolver(mesh, cfg, method="qr")


def test_neumann_centre_variance():
    m = 64
    mesh = StructuredMesh(m)
    cfg = BVPConfig(NEUMANN, ELL)
    A, M = assemble(mesh, cfg)
    c = (m // 2) * (m + 1) + m // 2
    e = np.zeros(A.shape[0])
    e[c] = 1.0
    x = spla.spsolve(A.tocsc(), e)
    var = cfg.scaling ** 2 * x @ (M @ x)
    assert abs(var - 1.0) <= 0.1
    # Monte-Carlo estimate agrees with the exact value
    N = 10_000
    solver = SPDESolver(mesh, cfg)
    u = np.concatenate([solver.sample(RngStream(8, k), 1000)[:, c] for k in range(N // 1000)])
    assert abs(u.var() - var) <= 5 * var * math.sqrt(2 / N)


def test_eigenvalues_dirichlet_m32():
    vals, _, _ = laplace_eigenvalues(StructuredMesh(32), DIRICHLET, k=1)
    assert vals[0] == pytest.approx(2 * math.pi ** 2, rel=0.02)


@pytest.mark.parametrize("mask", [NEUMANN, DIRICHLET, BoundaryMask((0, 1))], ids=str)
@pytest.mark.parametrize("length", [1.0, 2.0])
def test_eigenvalues_m64(mask, length):
    vals, vecs, keep = laplace_eigenvalues(StructuredMesh(64, length), mask, k=5)
    ref = exact_laplace_eigenvalues(mask, length, 5)
    if mask == NEUMANN:
        assert abs(vals[0]) <= 1e-8
        np.testing.assert_allclose(vals[1:], ref[1:], rtol=0.02)
    else:
        np.testing.assert_allclose(vals, ref, rtol=0.02)


def test_first_neumann_eigenvector_is_cosine():
    mesh = StructuredMesh(32)
    vals, vecs, keep = laplace_eigenvalues(mesh, NEUMANN, k=3)
    x = mesh.nodes[:, 0]
    y = mesh.nodes[:, 1]
    basis = np.column_stack([np.cos(np.pi * x), np.cos(np.pi * y)])
    # modes 1 and 2 are degenerate; their span must contain the cosines
    V = vecs[:, 1:3]
    proj = V @ np.linalg.lstsq(V, basis, rcond=None)[0]
    assert np.max(np.abs(proj - basis)) <= 0.01


def test_exact_eigenvalue_helper():
    assert exact_laplace_eigenvalues(DIRICHLET, 1.0, 3) == pytest.approx(
        [2 * math.pi ** 2, 5 * math.pi ** 2, 5 * math.pi ** 2])
    assert exact_laplace_eigenvalues(NEUMANN, 2.0, 2) == pytest.approx([0.0, math.pi ** 2 / 4])


def test_dna_variance_flat_compared_to_masks():
    m = 64
    covs = [exact_cov(m, mk) for mk in all_masks(2)]
    dna = 0.25 * sum(covs)
    spread = np.ptp(np.diag(dna))
    mask_spreads = [np.ptp(np.diag(c)) for c in covs]
    assert spread <= 0.02  # FE discretisation at h = 1/64
    assert min(mask_spreads) >= 3 * spread


def test_dna_fem_converges_to_periodised_covariance():
    model = CovarianceModel.matern(1.0, ELL)
    errs = []
    for m in (8, 16, 32):
        dna = 0.25 * sum(exact_cov(m, mk) for mk in all_masks(2))
        idx = np.arange(m + 1) * (m + 2)
        pts = StructuredMesh(m).nodes[idx]
        ref = periodised_cov_lattice(model, 2.0, pts[:, None, :] - pts[None, :, :], shell_cutoff=6)
        errs.append(np.max(np.abs(dna[np.ix_(idx, idx)] - ref)))
    assert errs[0] > errs[1] > errs[2]
    assert errs[1] / errs[2] >= 1.8


def test_fem_sampler_exact_dense_map():
    s = FEMSampler(ELL, 4)
    n_noise = s.solvers[0].noise.n_noise
    H = dense_map(lambda p: s.weight * sum(sv.from_noise(q) for sv, q in zip(s.solvers, p)), [(n_noise,)] * 4)
    dna = 0.25 * sum(exact_cov(4, mk) for mk in all_masks(2))
    np.testing.assert_allclose(H @ H.T, dna, atol=1e-12)


def test_dna_and_neumann_shapes_and_zero_noise():
    u = solve_dna(8, ELL, RngStream(0), count=2, alpha=1.5)
    assert u.shape == (2, 9, 9)
    v = solve_neumann_oversampled(ELL, 8, 3.0, RngStream(0))
    assert v.shape == (9, 9)
    s = neumann_sampler(ELL, 8, 3.0)
    assert s.mesh.m == 24 and s.offset == 8
    with pytest.raises(ValueError):
        FEMSampler(ELL, 8, 0.5)
    with pytest.raises(ValueError):
        neumann_sampler(ELL, 8, 1.125)  # (alpha - 1) m is odd
    z = np.zeros(s.solvers[0].noise.n_noise)
    assert np.all(s.solvers[0].from_noise(z) == 0)


def test_neumann_boundary_bump_and_extension():
    model = CovarianceModel.matern(1.0, ELL)
    var = np.diag(exact_cov(16, NEUMANN))
    assert var[0] > 2.0 and var[(8 * 17) + 8] < 1.2
    N = 4000
    e1 = empirical_max_cov_error(neumann_sampler(ELL, 16, 1.0), model, N, 2, seed=5)
    e3 = empirical_max_cov_error(neumann_sampler(ELL, 16, 3.0), model, N, 2, seed=5)
    d1 = empirical_max_cov_error(FEMSampler(ELL, 16, 1.0), model, N, 2, seed=5)
    assert e3.max_error + 2 * e3.batch_sd < e1.max_error
    assert d1.max_error + 2 * d1.batch_sd < e1.max_error
