import json
import math

import numpy as np
import pytest

from energydiff.core import ModelParams
from energydiff import estimators as E
from energydiff.spectral import max_group_speed

from oracles import ClosureD1, minimal_image

TIMES = [2.0, 4.0, 8.0]


@pytest.fixture(scope="module")
def closure32():
    params = ModelParams(d=1, N=32, seed=3)
    ts = E.simulate(params, 2, TIMES)[0].times  # step-rounded output times
    return params, ts, ClosureD1(32).solve(list(ts))


@pytest.fixture(scope="module")
def tangent32(closure32):
    params, _, _ = closure32
    return E.estimate_correlation(params, 2000, TIMES, method="tangent")


@pytest.fixture(scope="module")
def direct32(closure32):
    params, _, _ = closure32
    return E.estimate_correlation(params.with_(seed=4), 2000, TIMES, method="direct")


@pytest.mark.parametrize("which", ["tangent32", "direct32"])
def test_profile_matches_second_moment_closure(which, closure32, request):
    _, ts, ref = closure32
    prof = request.getfixturevalue(which)
    np.testing.assert_allclose(prof.times, ts)
    z = (prof.S - ref) / prof.stderr
    assert np.max(np.abs(z)) < 4.5
    assert np.mean(z**2) < 1.6
    x2 = minimal_image(32) ** 2
    m_ref = (ref * x2).sum(1) / ref.sum(1)
    fit = E.msd(prof)
    assert np.all(np.abs(fit.m - m_ref) < 4 * fit.stderr)


def test_static_profile(direct32, closure32):
    _, _, ref = closure32
    S0 = direct32.S[0]
    assert S0[0] > 0
    assert abs(S0[0] - ref[0, 0]) < 4 * direct32.stderr[0, 0]
    assert np.all(np.abs(ref[0, 4:-3]) < 1e-2 * ref[0, 0])


def test_tangent_totals_are_conserved(tangent32, direct32):
    for prof in (tangent32, direct32):
        tot = prof.total()
        np.testing.assert_allclose(tot, tot[0], rtol=1e-10)
        assert abs(tot[0] - 1.0) < 4 * prof.total_stderr()[0]


def test_profile_is_symmetric(tangent32):
    S, se = tangent32.S[-1], tangent32.stderr[-1]
    mirrored = np.roll(S[::-1], 1)
    z = (S - mirrored) / np.sqrt(se**2 + np.roll(se[::-1], 1) ** 2 + 1e-300)
    assert np.max(np.abs(z[1:])) < 4.5


def test_exact_harmonic_profile_matches_closure():
    params = ModelParams(d=1, N=32, gamma=0.0)
    prof = E.exact_tangent_profile(params, [1.0, 3.0])
    ref = ClosureD1(32, gamma=0.0).solve(list(prof.times))
    np.testing.assert_allclose(prof.S, ref, atol=1e-7)
    with pytest.raises(ValueError):
        E.exact_tangent_profile(params.with_(gamma=1.0), [1.0])


def test_ballistic_spreading_without_noise():
    params = ModelParams(d=1, N=256, gamma=0.0)
    prof = E.exact_tangent_profile(params, E.geometric_times(64, 3))
    fit = E.msd(prof)
    growth = np.log(fit.m[-1] / fit.m[-2]) / np.log(prof.times[-1] / prof.times[-2])
    assert growth > 1.8
    d = E.profile_shape_test(prof, prof.times[-1], fit.slope)
    assert d > 0.3


def _synthetic(N, d, kappa, times, m0=0.0):
    S = np.stack([E.gaussian_profile(N, d, (m0 + d * kappa * t) / d) for t in times])
    return E.CorrelationProfile(
        times=np.asarray(times, float), S=S, stderr=np.zeros_like(S), replicas=2,
        centering=1.0, method="synthetic", samples=np.stack([S, S]),
    )


@pytest.mark.parametrize("d,N", [(1, 400), (2, 120)])
def test_msd_of_heat_kernel(d, N):
    prof = _synthetic(N, d, 1.3, [10.0, 20.0, 40.0, 80.0])
    fit = E.msd(prof, window=(10.0, 80.0))
    assert fit.slope == pytest.approx(d * 1.3, rel=1e-6)
    assert not fit.signed_weights
    assert E.profile_shape_test(prof, 80.0, 1.3, m0=0.0) < 1e-3


def test_msd_rejects_nonpositive_normalization():
    prof = _synthetic(64, 1, 1.0, [0.0, 1.0, 2.0])
    prof.S = -prof.S
    prof.samples = -prof.samples
    with pytest.raises(ValueError):
        E.msd(prof)


def test_shape_distance_decreases_for_diffusive_run():
    params = ModelParams(d=1, N=128, seed=12)
    prof = E.estimate_correlation(params, 400, E.geometric_times(40, 3))
    fit = E.msd(prof)
    kfit = fit.slope / params.d
    m0 = fit.m[0]
    dist = [E.profile_shape_test(prof, t, kfit, m0=m0) for t in prof.times[1:]]
    assert dist[-1] < dist[0]


def test_doubling_gamma_tracks_quadrature():
    from energydiff.spectral import thermal_diffusivity

    slopes, kappas = [], []
    for g in (1.0, 2.0):
        params = ModelParams(d=1, N=128, gamma=g, seed=20)
        fit = E.msd(E.estimate_correlation(params, 400, E.geometric_times(40, 3)))
        slopes.append(fit.slope)
        kappas.append(thermal_diffusivity(params).kappa)
    assert slopes[1] > slopes[0]
    assert slopes[1] / slopes[0] == pytest.approx(kappas[1] / kappas[0], rel=0.2)


def test_sound_cone_guard():
    params = ModelParams(d=1, N=64)
    free = params.with_(gamma=0.0)
    assert E.ballistic_reach(free, 10.0) == pytest.approx(10 * max_group_speed(free, 4096), rel=1e-3)
    assert E.ballistic_reach(params, 1e6) < E.ballistic_reach(free, 1e6)
    with pytest.raises(E.SoundConeError):
        E.simulate(free, 2, [60.0])
    assert E.check_sound_cone(params, 10.0) < 32


def test_geometric_times():
    np.testing.assert_allclose(E.geometric_times(16.0, 2, 2), [4, 4 * 2**0.5, 8, 8 * 2**0.5, 16])


def test_records_roundtrip_and_csv(tmp_path):
    params = ModelParams(d=2, N=8, seed=2)
    recs = E.simulate(params, 3, [0.5, 1.0], kind="direct", with_current=True)
    path = tmp_path / "r.npz"
    E.save_records(path, recs, params)
    back, p2 = E.load_records(path)
    assert p2 == params
    for a, b in zip(recs, back):
        np.testing.assert_array_equal(a.energy, b.energy)
        np.testing.assert_array_equal(a.current, b.current)
        assert a.seed == b.seed and a.replica == b.replica
    E.save_records(tmp_path / "r2.npz", recs, params)
    assert (tmp_path / "r.npz").read_bytes() == (tmp_path / "r2.npz").read_bytes()
    prof = E.profile_from_records(back, p2)
    E.write_profile_csv(prof, tmp_path / "p.csv")
    rows = np.loadtxt(tmp_path / "p.csv", delimiter=",", skiprows=1)
    assert rows.shape == (3 * 64, 5)
    np.testing.assert_array_equal(rows[:64, 3], prof.S[0].ravel())


def test_profile_needs_two_replicas():
    params = ModelParams(d=1, N=16)
    with pytest.raises(ValueError):
        E.profile_from_records(E.simulate(params, 1, [0.1]), params)


def test_fluctuation_field():
    params = ModelParams(d=1, N=64, seed=5)
    F = np.sin(2 * np.pi * np.arange(64) / 64)
    fv = E.fluctuation_field_variance(params, 2000, 4.0, F)
    assert abs(fv.variance[1] - fv.variance[0]) < 3 * math.hypot(*fv.stderr)
    const = E.fluctuation_field_variance(params, 20, 4.0, lambda x: np.ones(x.shape[:-1]))
    np.testing.assert_allclose(const.samples[:, 1], const.samples[:, 0], atol=1e-10)


def test_fluctuation_field_scales_with_temperature():
    base = None
    F = np.cos(2 * np.pi * np.arange(32) / 32) + 0.5
    for beta in (0.5, 1.0, 2.0):
        params = ModelParams(d=1, N=32, beta=beta, seed=1)
        recs = E.simulate(params, 200, [], kind="direct")
        v = E.field_variance_from_records(recs, params, F).variance[0] * beta**2
        base = v if base is None else base
        assert v == pytest.approx(base, rel=1e-10)


def test_autocorrelation_against_brute_force():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 50))
    ac = E._autocorr(x, 7)
    for k in range(8):
        np.testing.assert_allclose(ac[:, k], np.mean(x[:, k:] * x[:, : 50 - k], axis=1), atol=1e-12)


def test_green_kubo_basic():
    params = ModelParams(d=1, N=64, seed=8)
    gk = E.green_kubo(params, 16, horizon=15.0, run_length=60.0)
    assert gk.C[0] > 0
    late = gk.lags > 10
    assert np.mean(np.abs(gk.C[late]) < 4 * gk.stderr[late] + 0.05 * gk.C[0]) > 0.9
    assert gk.kappa == pytest.approx(params.gamma + gk.plateau_value)
    json.loads(E.dumps(gk.as_json()))


def test_dumps_precision():
    text = E.dumps({"a": 0.1, "b": np.float64(1 / 3), "c": [np.int64(2)], "d": float("inf")})
    obj = json.loads(text)
    assert obj["a"] == 0.1 and obj["b"] == 1 / 3 and obj["c"] == [2] and obj["d"] is None
    assert "0.10000000000000001" in text
