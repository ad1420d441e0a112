import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.fft import dct

from parmaj import analysis, convex
from parmaj.analysis import (FilterBank, FilterBankFamily, ScaledFamily, dct_atoms, denoise, orthogonal_init, psnr,
                             tv_denoise)
from parmaj.errors import ContractError
from parmaj.linops import FiniteDifference
from parmaj.solvers import SolverConfig, grid_search
from parmaj.surrogates import bregman_surrogate_dual, minimize_energy

TIGHT = SolverConfig(max_iter=20000, tol=1e-10)


@pytest.mark.parametrize("f", [2, 3, 5, 7])
def test_dct_atoms_match_scipy(f):
    C = dct(np.eye(f), type=2, norm="ortho", axis=0)
    ref = np.einsum("ia,jb->ijab", C, C).reshape(f * f, f, f)[1:]
    assert np.allclose(dct_atoms(f), ref, atol=1e-14)


@pytest.mark.parametrize("f", [3, 5])
def test_dct_atoms_orthonormal_and_zero_mean(f):
    A = dct_atoms(f).reshape(f * f - 1, -1)
    assert np.allclose(A @ A.T, np.eye(f * f - 1), atol=1e-13)
    assert np.allclose(A.sum(axis=1), 0.0, atol=1e-13)


def test_filter_side_one_is_rejected():
    with pytest.raises(ContractError):
        dct_atoms(1)


def test_coefficient_count_is_checked():
    with pytest.raises(ContractError):
        FilterBank(np.zeros((2, 9)), 3)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), K=st.integers(1, 4))
def test_filters_are_zero_mean_for_any_coefficients(seed, K):
    bank = FilterBank(np.random.default_rng(seed).standard_normal((K, 8)), 3)
    assert np.allclose(bank.kernels().sum(axis=(1, 2)), 0.0, atol=1e-12)


def test_bank_adjoint():
    rng = np.random.default_rng(0)
    bank = FilterBank(rng.standard_normal((3, 24)), 5)
    x = rng.standard_normal((2, 11, 13))
    p = rng.standard_normal((2, 3, 11, 13))
    lhs = np.sum(analysis.filterbank_apply(bank, x) * p)
    rhs = np.sum(x * analysis.filterbank_adjoint(bank, p))
    assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.parametrize("K, f", [(3, 3), (8, 3), (10, 3), (4, 5)])
def test_orthogonal_init(K, f):
    bank = orthogonal_init(K, f, scale=0.5, seed=2)
    M = bank.coeffs / 0.5
    gram = M @ M.T if K <= f * f - 1 else M.T @ M
    assert np.allclose(gram, np.eye(min(K, f * f - 1)), atol=1e-12)


def test_orthogonal_init_default_scale():
    assert np.allclose(np.linalg.norm(orthogonal_init(3, 3).coeffs, axis=1), 0.01)
    assert np.allclose(np.linalg.norm(orthogonal_init(3, 9).coeffs, axis=1), 0.001)


def test_zero_bank_returns_the_noisy_image():
    y = np.random.default_rng(1).uniform(0, 255, (8, 8))
    assert np.array_equal(denoise(FilterBank(np.zeros((3, 8)), 3), y), y)


def fd_bank(alpha):
    kv = np.zeros((3, 3))
    kv[1, 1], kv[2, 1] = -1.0, 1.0
    kh = np.zeros((3, 3))
    kh[1, 1], kh[1, 2] = -1.0, 1.0
    atoms = dct_atoms(3).reshape(8, 9)
    coeffs = alpha * np.stack([atoms @ kv.ravel(), atoms @ kh.ravel()])
    return FilterBank(coeffs, 3)


def test_difference_bank_is_the_zero_boundary_gradient():
    x = np.random.default_rng(2).standard_normal((6, 7))
    assert np.allclose(fd_bank(1.0).operator().forward(x), FiniteDifference("zero").forward(x), atol=1e-13)


def test_difference_bank_denoising_matches_tv():
    y = np.random.default_rng(3).uniform(0, 255, (10, 10))
    a = denoise(fd_bank(20.0), y, TIGHT)
    b = tv_denoise(y, 20.0, TIGHT, boundary="zero")
    assert np.max(np.abs(a - b)) <= 1e-3


@pytest.mark.parametrize("mse, expected", [(1.0, 48.130803608679106), (255.0 ** 2, 0.0), (100.0, 28.130803608679106)])
def test_psnr_examples(mse, expected):
    ref = np.zeros((4, 4))
    assert psnr(ref + np.sqrt(mse), ref) == pytest.approx(expected, abs=1e-12)


def test_psnr_identical_is_infinite_and_shapes_must_match():
    x = np.ones((3, 3))
    assert psnr(x, x) == np.inf
    with pytest.raises(ContractError):
        psnr(x, np.ones((3, 4)))


def test_tv_baseline_prefers_strong_smoothing_of_flat_images():
    rng = np.random.default_rng(4)
    clean = np.full((12, 12), 100.0)
    pairs = [(clean, clean + 25 * rng.standard_normal(clean.shape)) for _ in range(2)]
    alpha, value = analysis.tv_baseline(pairs, 0.0, 200.0, points=5, refine_levels=0)
    assert alpha == 200.0 and value > analysis.mean_psnr([y for _, y in pairs], [clean, clean])


def test_tv_baseline_needs_pairs():
    with pytest.raises(ContractError):
        analysis.tv_baseline([])


def test_bregman_surrogate_majorizes_the_loss_on_small_patches():
    rng = np.random.default_rng(5)
    fam = FilterBankFamily(3, 3)
    theta = orthogonal_init(3, 3, scale=3.0, seed=5).theta
    for _ in range(3):
        x_star = rng.uniform(0, 255, (8, 8))
        y = x_star + 25 * rng.standard_normal((8, 8))
        E = fam.split(theta, y)
        x, _ = fam.solve(theta, y, TIGHT)
        loss = 0.5 * float(np.sum((x_star - x) ** 2))
        assert bregman_surrogate_dual(E, x_star)[0] >= loss - 1e-6 * max(1.0, loss)


def test_zero_bank_surrogate_is_the_noise_energy():
    rng = np.random.default_rng(6)
    corpus = [(rng.uniform(0, 255, (8, 8)), rng.uniform(0, 255, (8, 8))) for _ in range(2)]
    bank = FilterBank(np.zeros((2, 8)), 3)
    expected = sum(0.5 * float(np.sum((x - y) ** 2)) for x, y in corpus)
    assert analysis.surrogate_value(corpus, bank) == pytest.approx(expected, rel=1e-12)


def test_scale_training_matches_surrogate_grid_search():
    rng = np.random.default_rng(7)
    corpus = []
    for _ in range(2):
        x = np.zeros((8, 8))
        x[:, 4:] = 200.0
        corpus.append((x, x + 25 * rng.standard_normal(x.shape)))
    fam = ScaledFamily()

    def surrogate(alpha):
        th = np.array([alpha])
        return sum(bregman_surrogate_dual(fam.split(th, y), x)[0] for x, y in corpus)

    ref, _ = grid_search(surrogate, 0.0, 60.0, points=61, refine_levels=1)
    alpha, run = analysis.train_scale_surrogate(corpus, alpha0=1.0, step=1.0, iterations=3000)
    assert abs(alpha - ref) <= 0.5
    assert all(b <= a for a, b in zip(run.trace, run.trace[1:]))


def test_batched_solve_matches_individual_solves():
    rng = np.random.default_rng(8)
    fam = FilterBankFamily(2, 3)
    theta = orthogonal_init(2, 3, scale=2.0, seed=0).theta
    ys = [rng.uniform(0, 255, (8, 8)) for _ in range(3)]
    batch, _ = fam.solve_batch(theta, ys, TIGHT)
    for y, xb in zip(ys, batch):
        x, _ = minimize_energy(fam.split(theta, y), TIGHT)
        assert np.max(np.abs(x - xb)) <= 1e-4
