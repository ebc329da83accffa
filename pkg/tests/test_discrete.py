import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hsps import model
from hsps.discrete import (DiscreteGrid, DiscreteSpectrum, FockOracle, build_spectrum, convergence_study,
                           detection_probability, discrete_moments, g2_cd, next_prime, suggest_grid,
                           temporal_correlations, wick_moment, write_convergence_csv)
from hsps.errors import ParameterError
from hsps.model import SpdcParams


def random_spectrum(rng, m, n_max):
    nu = np.sqrt(rng.uniform(0.2 * n_max, n_max, m)) * np.exp(1j * rng.uniform(0, 2 * np.pi, m))
    return DiscreteSpectrum.from_nu(nu)


def test_next_prime():
    assert [next_prime(n) for n in (0, 2, 3, 4, 14, 97, 100)] == [2, 2, 3, 5, 17, 97, 101]


def test_grid_validation():
    with pytest.raises(ParameterError):
        DiscreteGrid(10.0, 10.0)  # M = 201 is not prime
    with pytest.raises(ParameterError):
        DiscreteGrid(1.0, 1.0)  # M = 3 but T W below the minimum
    with pytest.raises(ParameterError):
        DiscreteGrid(1.25, 10.0)  # 2WT+1 not an integer
    with pytest.warns(UserWarning):
        DiscreteGrid(50.0, 1.0)  # M = 101, T W = 50
    g = suggest_grid(3e12, 1000 / 3e12)
    assert g.T * g.W >= 1000 and g.M == next_prime(2001)
    assert g.dt == pytest.approx(0.5 / 3e12) and g.df == pytest.approx(1 / g.T)
    assert len(g.modes) == g.M and g.modes[0] == -(g.M - 1) // 2


def test_spectrum_constraint():
    with pytest.raises(ParameterError):
        DiscreteSpectrum(np.ones(3), np.ones(3))
    with pytest.raises(ParameterError):
        DiscreteSpectrum(np.ones(2), np.zeros(2))
    s = DiscreteSpectrum.from_nu([0.1, 0.2j, 0.3])
    assert np.allclose(np.abs(s.mu) ** 2 - np.abs(s.nu) ** 2, 1)


def test_build_spectrum_requires_wide_lattice():
    p = SpdcParams(1.5e7, 3e12)
    with pytest.raises(ParameterError):
        build_spectrum(p, suggest_grid(1e12, 1e-9))


def test_correlations_sum_rules():
    p = SpdcParams(1.5e7, 3e12)
    g = suggest_grid(128 * 3e12, 2 / 3e12)
    tc = temporal_correlations(build_spectrum(p, g), g)
    # R_0 - 1 is the mean photon number per bin: R dt
    assert tc.R0 - 1 == pytest.approx(p.pair_rate * g.dt, rel=2e-2)
    # sum of |C_n|^2 over bins equals mean occupation per bin to first order
    assert np.sum(np.abs(tc.C) ** 2) == pytest.approx(tc.R0 - 1, rel=1e-3)
    assert tc.R_at(-1) == tc.R[-1]
    assert detection_probability(tc) == pytest.approx(1 - 1 / tc.R0)
    with pytest.raises(ParameterError):
        temporal_correlations(build_spectrum(p, g), suggest_grid(256 * 3e12, 2 / 3e12))


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("m", [1, 3])
def test_fock_oracle_matches_closed_form(seed, m):
    rng = np.random.default_rng(seed)
    s = random_spectrum(rng, m, 0.02)
    tc = temporal_correlations(s)
    fo = FockOracle(s, cutoff=4)
    assert fo.detection_probability() == pytest.approx(detection_probability(tc), rel=1e-3)
    h = (m - 1) // 2
    for k in range(-h, h + 1):
        for l in range(-h, h + 1):
            assert fo.g2(k, l) == pytest.approx(g2_cd(tc, k, l), rel=1e-3)


@pytest.mark.parametrize("seed", range(2))
def test_fock_oracle_higher_occupation_needs_larger_cutoff(seed):
    rng = np.random.default_rng(10 + seed)
    s = random_spectrum(rng, 3, 0.05)
    tc = temporal_correlations(s)
    fo = FockOracle(s, cutoff=5)
    for k, l in [(0, 0), (-1, 0), (1, -1), (1, 1)]:
        assert fo.g2(k, l) == pytest.approx(g2_cd(tc, k, l), rel=1e-3)


def test_fock_error_shrinks_with_cutoff():
    # the closed forms are exact: the Fock discrepancy is pure truncation error
    s = random_spectrum(np.random.default_rng(3), 3, 0.05)
    tc = temporal_correlations(s)
    errs = [abs(FockOracle(s, cutoff=c).g2(0, 0) / g2_cd(tc, 0, 0) - 1) for c in (3, 4, 5, 6)]
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-5


def test_fock_oracle_limits():
    s = DiscreteSpectrum.from_nu(np.full(5, 0.1))
    with pytest.raises(ParameterError):
        FockOracle(s)
    with pytest.raises(ParameterError):
        FockOracle(DiscreteSpectrum.from_nu([0.1]), cutoff=7)


def test_discrete_wick_matches_dense_state():
    rng = np.random.default_rng(0)
    s = random_spectrum(rng, 3, 0.02)
    tc = temporal_correlations(s)
    fo = FockOracle(s, cutoff=6)
    psi = fo.state
    idler0 = fo.M + 1  # axis of idler bin 0
    for k, l in [(0, 0), (1, -1), (0, 1)]:
        v = fo._annihilate(fo._signal_bin_annihilate(fo._signal_bin_annihilate(psi, k), l), idler0)
        dense = np.vdot(v, v).real
        ops = [("s", True, k), ("s", True, l), ("i", True, 0), ("i", False, 0), ("s", False, l), ("s", False, k)]
        assert wick_moment(discrete_moments(tc), ops).real == pytest.approx(dense, rel=1e-6)


def test_wick_moment_basics():
    table = lambda x, y: 1.0 + 0j
    assert wick_moment(table, []) == 1.0
    assert wick_moment(table, ["a", "b"]) == 1.0
    assert wick_moment(table, list("abcd")) == 3.0  # three pairings
    assert wick_moment(table, list("abcdef")) == 15.0
    with pytest.raises(ParameterError):
        wick_moment(table, ["a"])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e-6, 0.05), min_size=3, max_size=3), st.integers(-1, 1), st.integers(-1, 1))
def test_closed_form_bounds(occ, k, l):
    s = DiscreteSpectrum.from_nu(np.sqrt(np.array(occ)))
    tc = temporal_correlations(s)
    g = g2_cd(tc, k, l)
    assert g >= -1e-9
    if k == l:
        assert g <= 2.0 + 1e-12


def test_g2cd_argument_checks():
    tc = temporal_correlations(DiscreteSpectrum.from_nu([0.1, 0.1, 0.1]))
    with pytest.raises(ParameterError):
        g2_cd(tc, 3, 0)
    with pytest.raises(ParameterError):
        g2_cd(temporal_correlations(DiscreteSpectrum.from_nu([0.0, 0.0, 0.0])), 0, 1)


def test_convergence_to_continuous_limit(tmp_path):
    p = SpdcParams(1.5e7, 3e12)
    widths = [128 * 3e12 * 2**j for j in range(5)]
    rows = convergence_study(p, 0, 0, widths)
    errs = [r.rel_error for r in rows]
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-3 and all(r.T * r.W >= 1000 for r in rows)
    assert not any(r.flag for r in rows)
    assert rows[0].g2_cond == pytest.approx(model.g2_cond_at_zero(p))
    path = tmp_path / "conv.csv"
    write_convergence_csv(rows, path, header=["test"])
    assert path.read_text().count("\n") == 7


def test_convergence_off_diagonal():
    p = SpdcParams(1.5e7, 3e12)
    rows = convergence_study(p, 1, 3, [128 * 3e12 * 2**j for j in range(3)])
    assert rows[-1].rel_error < 1e-2


def test_convergence_argument_errors():
    p = SpdcParams(1.5e7, 3e12)
    with pytest.raises(ParameterError):
        convergence_study(p, 0, 0, [])
    with pytest.raises(ParameterError):
        convergence_study(p, 0, 0, [2e14, 1e14])
    with pytest.raises(ParameterError):
        convergence_study(p, 0, 0, [4e14, 6e14])
