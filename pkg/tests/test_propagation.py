import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from twirls.energy import quadratic_energy
from twirls.graph import build_graph, sym_norm_apply
from twirls.penalty import PenaltySpec
from twirls.propagation import (PropagationConfig, PropagationError, closed_form_solve, edge_attention,
                                jacobi_step, max_step_size, mean_pairwise_cosine, normalized_energy,
                                normalized_step, prox_relu, row_dispersion, sgc_step, spectral_norm, unfold,
                                zspace_reparam)

from conftest import random_graph

F2 = np.array([[1.0], [0.0]])
DESCENT_PENALTIES = [PenaltySpec("log_eps", eps=0.5), PenaltySpec("truncated_quadratic", tau=0.8),
                     PenaltySpec("truncated_lp", p=0.1, tau=0.2, T=2.0)]


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_closed_form_examples(edge2):
    rng = np.random.default_rng(0)
    g = random_graph(10, 0.3, 0)
    F = rng.standard_normal((10, 3))
    assert np.allclose(closed_form_solve(g, F, 0.0), F)
    assert np.allclose(closed_form_solve(edge2, F2, 1.0), [[2 / 3], [1 / 3]])
    const = np.tile([1.0, -2.0], (10, 1))
    assert np.allclose(closed_form_solve(g, const, 7.0), const)


def test_closed_form_size_guard():
    g = build_graph(4097, [])
    with pytest.raises(PropagationError):
        closed_form_solve(g, np.zeros((4097, 1)), 1.0)


def test_jacobi_examples(edge2):
    assert np.allclose(jacobi_step(edge2, F2, F2, 1.0, 1.0), [[0.5], [0.5]])
    Y = np.array([[0.3], [-2.0]])
    assert np.array_equal(jacobi_step(edge2, Y, F2, 0.0, 1.0), Y)
    assert np.allclose(jacobi_step(edge2, Y, F2, 0.4, 3.0, w=[0.0]), 0.6 * Y + 0.4 * F2)


def test_prox_examples():
    assert prox_relu([[-1.0, 2.0]]).tolist() == [[0.0, 2.0]]
    P = np.abs(np.random.default_rng(0).standard_normal((4, 3)))
    assert np.array_equal(prox_relu(P), P)
    assert np.all(prox_relu(-P - 1) == 0)


def test_normalized_examples(edge2):
    rng = np.random.default_rng(1)
    g = random_graph(8, 0.4, 1)
    Y, Y0 = rng.standard_normal((2, 8, 2))
    assert np.allclose(normalized_step(g, Y, Y0, 0.0, 2.0), Y)
    assert np.allclose(normalized_step(g, Y, Y0, 1.0, 0.0), Y0)
    assert np.allclose(normalized_step(edge2, F2, F2, 1.0, 1.0), [[0.5], [0.5]])


def test_normalized_unfold_converges_to_its_minimizer():
    rng = np.random.default_rng(2)
    g = random_graph(20, 0.2, 2, connected=True)
    F = rng.standard_normal((20, 2))
    lam = 2.0
    out = unfold(g, F, PropagationConfig(steps=400, alpha=1 / (1 + lam), lam=lam, mode="normalized",
                                         record_trace=True)).final
    M = sym_norm_apply(g, np.eye(20))
    target = np.linalg.solve((1 + lam) * np.eye(20) - lam * M, F)
    assert rel(out, target) < 1e-8
    # the normalized energy is minimized there
    assert normalized_energy(g, target, F, lam) <= normalized_energy(g, target + 1e-3, F, lam)


def test_sgc_examples(edge2):
    Z = F2
    for _ in range(5):
        Z = sgc_step(edge2, Z)
    assert np.allclose(Z, [[0.5], [0.5]])
    star = build_graph(11, [(0, i) for i in range(1, 11)])
    Z = np.random.default_rng(0).random((11, 4)) + 0.1
    for _ in range(50):
        Z = sgc_step(star, Z)
    assert mean_pairwise_cosine(Z) > 0.999


def test_max_step_size_examples(edge2):
    assert max_step_size(build_graph(4, []), None, 1.0) == 0.5
    assert max_step_size(edge2, [1.0], 1.0) == pytest.approx(1 / 6)
    g = random_graph(30, 0.2, 4)
    w = np.random.default_rng(4).random(g.num_edges) + 0.1
    assert max_step_size(g, 2 * w, 1.0) < max_step_size(g, w, 1.0)


def test_max_step_size_power_iteration_matches_dense():
    g = random_graph(120, 0.05, 9)
    w = np.random.default_rng(9).random(g.num_edges)
    dense = 0.5 / np.linalg.eigvalsh(g.laplacian(w).toarray() + 0.5 * np.eye(120))[-1]
    assert max_step_size(g, w, 0.5) == pytest.approx(dense, rel=1e-6)


def test_spectral_norm_reports_nonconvergence():
    from twirls.propagation import SpectralNormError

    assert spectral_norm(np.eye(3), 3) == pytest.approx(1.0)
    # nearly equal top eigenvalues converge too slowly for 20 iterations
    with pytest.raises(SpectralNormError) as info:
        spectral_norm(np.diag([2.0, 1.999999, 0.1]), 3, tol=1e-15, max_iter=20)
    assert info.value.estimate > 1.9


def test_unfold_zero_steps_returns_input():
    g = random_graph(6, 0.5, 0)
    F = np.random.default_rng(0).standard_normal((6, 2))
    assert np.array_equal(unfold(g, F, PropagationConfig(steps=0)).final, F)


def test_unfold_matches_closed_form_n50():
    g = random_graph(50, 0.1, 3, connected=True)
    F = np.random.default_rng(3).standard_normal((50, 4))
    out = unfold(g, F, PropagationConfig(steps=200, alpha=1.0, lam=1.0)).final
    assert rel(out, closed_form_solve(g, F, 1.0)) < 1e-6


def test_trace_lengths():
    g = random_graph(10, 0.4, 1)
    F = np.random.default_rng(1).standard_normal((10, 2))
    cfg = PropagationConfig(steps=7, attention=PenaltySpec("log_eps"), attention_schedule="pre_and_mid",
                            record_trace=True)
    tr = unfold(g, F, cfg)
    assert len(tr.energies) == 8 and all(np.isfinite(tr.energies))
    assert len(tr.gammas) == 2
    assert cfg.attention_positions() == {0, 3}
    assert PropagationConfig(steps=7, attention=PenaltySpec("abs")).attention_positions() == {3}


def test_early_stop():
    g = random_graph(20, 0.3, 5, connected=True)
    F = np.random.default_rng(5).standard_normal((20, 2))
    tr = unfold(g, F, PropagationConfig(steps=1000, tol=1e-7))
    assert tr.steps_run < 1000


@pytest.mark.parametrize("kwargs", [
    dict(steps=-1), dict(alpha=0.0), dict(lam=-1.0), dict(mode="other"), dict(prox="abs"),
    dict(attention_schedule="sometimes"), dict(mode="normalized", attention=PenaltySpec("abs")),
])
def test_config_validation(kwargs):
    with pytest.raises(PropagationError):
        PropagationConfig(**kwargs)


def test_zspace_examples():
    rng = np.random.default_rng(6)
    g = random_graph(10, 0.3, 6)
    Y = rng.standard_normal((10, 3))
    assert np.array_equal(zspace_reparam(g, Y, 0.0), Y)
    back = zspace_reparam(g, zspace_reparam(g, Y, 2.5), 2.5, inverse=True)
    assert np.allclose(back, Y, rtol=0, atol=1e-12)


@given(st.integers(0, 10**6))
def test_gcn_identity(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(10, 0.3, seed)
    Z0 = rng.standard_normal((10, 3))
    Y0 = zspace_reparam(g, Z0, 1.0, inverse=True)
    Z1 = zspace_reparam(g, jacobi_step(g, Y0, Y0, 1.0, 1.0), 1.0)
    assert np.allclose(Z1, sym_norm_apply(g, Z0), rtol=0, atol=1e-9)


@given(st.integers(0, 10**6), st.floats(0.1, 10.0))
def test_fixed_point_solves_linear_system(seed, lam):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 31))
    g = random_graph(n, 0.25, seed)
    F = rng.standard_normal((n, 2))
    Y = closed_form_solve(g, F, lam)
    assert np.allclose(jacobi_step(g, Y, F, 1.0, lam), Y, rtol=0, atol=1e-8)


@given(st.integers(0, 10**6), st.sampled_from(DESCENT_PENALTIES))
def test_irls_descent(seed, spec):
    rng = np.random.default_rng(seed)
    g = random_graph(int(rng.integers(5, 25)), 0.3, seed)
    F = rng.standard_normal((g.num_nodes, 2))
    alpha = max_step_size(g, edge_attention(g, F, spec), 1.0)
    tr = unfold(g, F, PropagationConfig(steps=30, alpha=alpha, lam=1.0, attention=spec,
                                        attention_schedule="every_step", record_trace=True))
    assert np.all(np.diff(tr.energies) <= 1e-10)


@given(st.integers(0, 10**6))
def test_prox_descent(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(int(rng.integers(5, 25)), 0.3, seed)
    F = rng.standard_normal((g.num_nodes, 2))
    alpha = max_step_size(g, None, 1.0)
    tr = unfold(g, F, PropagationConfig(steps=40, alpha=alpha, lam=1.0, prox="relu", record_trace=True))
    assert np.all(tr.final >= 0)
    assert np.all(np.diff(tr.energies[1:]) <= 1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_no_oversmoothing(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(30, 0.15, seed, connected=True)
    F = rng.standard_normal((30, 3))
    floor = row_dispersion(closed_form_solve(g, F, 1.0))
    for S in (10, 100, 1000):
        assert row_dispersion(unfold(g, F, PropagationConfig(steps=S)).final) >= floor - 1e-6
    Z = F
    for _ in range(200):
        Z = sgc_step(g, Z)
    assert mean_pairwise_cosine(Z) > 0.999


def test_attention_zeroing_all_edges_is_safe(edge2):
    spec = PenaltySpec("truncated_quadratic", tau=0.1)
    Y = np.array([[5.0], [0.0]])
    w = edge_attention(edge2, Y, spec)
    assert w.tolist() == [0.0]
    assert np.allclose(jacobi_step(edge2, Y, Y, 1.0, 1.0, w), Y)


def test_normalized_negative_coefficient_permitted(edge2):
    cfg = PropagationConfig(steps=3, alpha=1.0, lam=1.0, mode="normalized")
    assert np.all(np.isfinite(unfold(edge2, F2, cfg).final))
    assert math.isclose(1 - cfg.alpha - cfg.alpha * cfg.lam, -1.0)
