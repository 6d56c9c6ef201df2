from types import SimpleNamespace

import numpy as np
import pytest

from energydiff.core import ModelParams, PhaseState, laplacian
from energydiff.observables import (
    PAIR_FIELD,
    TRIPLE_FIELD,
    continuity_check,
    current_hamiltonian,
    current_noise,
    divergence,
    hamiltonian,
    hamiltonian_energy_drift,
    noise_energy_drift,
    noise_potential,
    site_energy,
)


def _random_state(params, rng, batch=()):
    shape = batch + params.shape + (params.d,)
    return PhaseState(rng.standard_normal(shape), rng.standard_normal(shape))


def test_site_energy_delta_momentum():
    params = ModelParams(d=2, N=6)
    st = PhaseState.zeros(params)
    st.p[0, 0] = [0.6, 0.8]
    e = site_energy(st, params).e
    assert e[0, 0] == pytest.approx(0.5)
    assert np.count_nonzero(e) == 1


@pytest.mark.parametrize("d,N", [(1, 17), (2, 7), (3, 5)])
def test_energy_sums_to_hamiltonian(d, N):
    params = ModelParams(d=d, N=N, alpha=1.7, nu=0.4)
    st = _random_state(params, np.random.default_rng(d), batch=(4,))
    field = site_energy(st, params)
    np.testing.assert_allclose(field.total(d), hamiltonian(st, params), rtol=1e-12)
    assert np.all(field.e >= 0)


def test_constant_q_unpinned_has_zero_energy():
    params = ModelParams(d=3, N=5, nu=0.0)
    st = PhaseState(np.full(params.shape + (3,), 2.0), np.zeros(params.shape + (3,)))
    assert np.all(site_energy(st, params).e == 0)


def test_current_hamiltonian_values():
    params = SimpleNamespace(d=1, alpha=2.0, nu=1.0, gamma=1.0)
    q = np.array([0, 1, 0, 0.0])[:, None]
    p = np.array([1, 0, 0, 0.0])[:, None]
    j = current_hamiltonian(PhaseState(q, p), params)[..., 0]
    assert j[0] == pytest.approx(-1.0)
    assert np.all(current_hamiltonian(PhaseState(np.zeros_like(q), p), params) == 0)
    assert np.all(current_hamiltonian(PhaseState(q, np.zeros_like(p)), params) == 0)


def test_current_noise_d2_delta():
    params = ModelParams(d=2, N=5)
    st = PhaseState.zeros(params)
    st.p[0, 0, 0] = 1.0
    js = current_noise(st, params)
    assert js[0, 0, 0] == pytest.approx(1.0) and js[0, 0, 1] == pytest.approx(1.0)
    assert js[4, 0, 0] == pytest.approx(-1.0) and js[0, 4, 1] == pytest.approx(-1.0)
    assert np.count_nonzero(js) == 4
    st.p[...] = 0.3
    assert np.all(current_noise(st, params) == 0)


def test_current_noise_d1_hand():
    params = ModelParams(d=1, N=5)
    p = np.array([0, 1, 0, 0, 0.0])[:, None]
    np.testing.assert_allclose(noise_potential(p), [1 / 6, 4 / 6, 1 / 6, 0, 0])
    js = current_noise(PhaseState(np.zeros_like(p), p), params)[:, 0]
    np.testing.assert_allclose(js, [-0.5, 0.5, 1 / 6, 0, -1 / 6], atol=1e-15)


def test_noise_fields_are_antisymmetric_and_conservative():
    for M in (PAIR_FIELD, TRIPLE_FIELD):
        np.testing.assert_array_equal(M, -M.T)
    # rotations in the (p^i, p^j) planes leave both momentum sums fixed
    assert np.all(PAIR_FIELD[0] + PAIR_FIELD[2] == 0) and np.all(PAIR_FIELD[1] + PAIR_FIELD[3] == 0)
    assert np.all(TRIPLE_FIELD.sum(axis=0) == 0)


@pytest.mark.parametrize("d,N", [(1, 32), (2, 8), (3, 5)])
def test_continuity_identity_random_states(d, N):
    rng = np.random.default_rng(100 + d)
    params = ModelParams(d=d, N=N, alpha=0.9, nu=1.3, gamma=0.7)
    st = _random_state(params, rng, batch=(10,))
    assert continuity_check(st, params) <= 1e-10
    # residual does not depend on beta
    assert continuity_check(st, params.with_(beta=5.0)) <= 1e-10


def test_q_zero_has_no_hamiltonian_part():
    params = ModelParams(d=2, N=6)
    st = _random_state(params, np.random.default_rng(0))
    st.q[...] = 0
    assert np.all(hamiltonian_energy_drift(st, params) == 0)
    assert np.all(current_hamiltonian(st, params) == 0)


@pytest.mark.parametrize("d,N", [(1, 9), (2, 5)])
def test_hamiltonian_drift_is_directional_derivative(d, N):
    # e is quadratic, so the central difference along (p, -Kq) is exact
    params = ModelParams(d=d, N=N, alpha=1.4, nu=0.6)
    st = _random_state(params, np.random.default_rng(5))
    lap = np.moveaxis(laplacian(np.moveaxis(st.q, -1, 0), d), 0, -1)
    vq, vp = st.p, -(params.nu * st.q - params.alpha * lap)
    fwd = site_energy(PhaseState(st.q + vq, st.p + vp), params).e
    bwd = site_energy(PhaseState(st.q - vq, st.p - vp), params).e
    np.testing.assert_allclose(hamiltonian_energy_drift(st, params), (fwd - bwd) / 2, atol=1e-11)


def test_noise_drift_closed_forms():
    rng = np.random.default_rng(8)
    p1 = ModelParams(d=1, N=11)
    s1 = _random_state(p1, rng)
    np.testing.assert_allclose(noise_energy_drift(s1, p1), laplacian(noise_potential(s1.p)), atol=1e-12)
    p3 = ModelParams(d=3, N=5)
    s3 = _random_state(p3, rng)
    p2 = np.sum(s3.p**2, axis=-1)
    np.testing.assert_allclose(noise_energy_drift(s3, p3), laplacian(p2), atol=1e-12)


def test_divergence_of_uniform_current_vanishes():
    j = np.ones((6, 6, 2))
    assert np.all(divergence(j, 2) == 0)
