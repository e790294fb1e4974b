import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from coldloop.core import TWO_PI, MechanicalMode, NoiseInputs, OpticalCavity, UnphysicalOccupationError
from coldloop.physics import (
    analytic_occupation,
    cavity_reflection,
    closed_loop_measured_psd,
    force_noise_psd,
    inferred_displacement_psd,
    mech_susceptibility,
    optical_spring_shift,
    phonon_from_psd,
    phonon_grid,
    rate_budget,
    single_photon_cooperativity,
    spring_curve,
    thermal_occupation,
)

from conftest import small_loop


@settings(max_examples=50, deadline=None)
@given(st.floats(1e3, 1e7), st.floats(1e-3, 1e4), st.floats(-1e8, 1e8))
def test_susceptibility_conjugate_symmetry(om, gm, w):
    mode = MechanicalMode(om, gm)
    a = mech_susceptibility(mode, w)
    b = mech_susceptibility(mode, -w)
    assert np.isclose(a, np.conj(b), rtol=1e-12, atol=0)


def test_susceptibility_on_resonance_is_imaginary():
    mode = MechanicalMode(TWO_PI * 1e6, 0.1)
    chi = mech_susceptibility(mode, mode.omega_m)
    assert np.isclose(chi, 1j * mode.omega_m / mode.gamma_m / mode.omega_m)


def test_force_psd_ground_state_and_thermal():
    mode = MechanicalMode(1e6, 2.0)
    assert force_noise_psd(0.0, mode) == pytest.approx(4.0)
    assert force_noise_psd(NoiseInputs(10.0, 5.0), mode) == pytest.approx(2 * 2.0 * 31)
    with pytest.raises(ValueError):
        force_noise_psd(-1.0, mode)


def test_thermal_occupation_value():
    n = thermal_occupation(18.3, TWO_PI * 1.045e6)
    assert n == pytest.approx(3.65e5, rel=0.01)
    assert thermal_occupation(0.0, 1.0) == 0.0


def test_cooperativity_value():
    c0 = single_photon_cooperativity(TWO_PI * 224e3, TWO_PI * 8.8e9, TWO_PI * 1.045e6 / 5.1e7)
    assert c0 == pytest.approx(4 * 224e3**2 / (8.8e9 * 1.045e6 / 5.1e7))
    with pytest.raises(ValueError):
        single_photon_cooperativity(0.0, 1.0, 1.0)


def test_budget_monotone_in_eta_and_nc(lhe_only):
    from dataclasses import replace

    cfg = lhe_only.loop
    ratios_eta = [rate_budget(replace(cfg, coupling=replace(cfg.coupling, eta_det=e))).ratio for e in (0.2, 0.4, 0.8)]
    ratios_nc = [rate_budget(replace(cfg, coupling=replace(cfg.coupling, n_c=n))).ratio for n in (100, 300, 1e4, 1e8)]
    assert np.all(np.diff(ratios_eta) < 0)
    assert np.all(np.diff(ratios_nc) < 0)
    assert ratios_nc[-1] == pytest.approx(1 / cfg.coupling.eta_det, rel=1e-3)


def test_budget_rejects_zero_efficiency(lhe_only):
    from dataclasses import replace

    cfg = lhe_only.loop
    with pytest.raises(ValueError, match="eta_det"):
        rate_budget(replace(cfg, coupling=replace(cfg.coupling, eta_det=0.0)))


def test_open_loop_measured_equals_numerator_bin_exact():
    cfg = small_loop(g_fb=0.0)
    w = np.linspace(0.5, 1.5, 101) * cfg.mode.omega_m
    expect = np.abs(mech_susceptibility(cfg.mode, w)) ** 2 * force_noise_psd(cfg.noise, cfg.mode) + cfg.channel.s_imp
    assert np.array_equal(closed_loop_measured_psd(cfg, w), expect)


def test_inferred_equals_measured_without_feedback():
    cfg = small_loop(g_fb=0.0)
    w = np.linspace(0.5, 1.5, 101) * cfg.mode.omega_m
    np.testing.assert_allclose(inferred_displacement_psd(cfg, w) + cfg.channel.s_imp,
                               closed_loop_measured_psd(cfg, w), rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.floats(1e4, 5e6), st.floats(-5, 5))
def test_psds_nonnegative(g, logw):
    cfg = small_loop(g_fb=g * 1e-3)
    w = cfg.mode.omega_m * 10.0**logw
    assert closed_loop_measured_psd(cfg, w, check=False) >= 0
    assert inferred_displacement_psd(cfg, w) >= 0


@pytest.mark.parametrize("q", [1e3, 1e5, 5e7])
def test_open_loop_integral_recovers_bath(q):
    cfg = small_loop(q=q, n_bath=200.0, g_fb=0.0)
    grid = phonon_grid(cfg.mode.omega_m, cfg.mode.gamma_m)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        est = phonon_from_psd(grid, inferred_displacement_psd(cfg, grid), cfg.mode.omega_m)
    assert est.n_bar == pytest.approx(200.0, rel=5e-3)


def test_zero_point_only_gives_zero():
    cfg = small_loop(q=1e4, n_bath=0.0)
    grid = phonon_grid(cfg.mode.omega_m, cfg.mode.gamma_m)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        est = phonon_from_psd(grid, inferred_displacement_psd(cfg, grid), cfg.mode.omega_m)
    assert abs(est.n_bar) < 0.01


def test_phonon_integral_against_quad():
    # independent quadrature of the same closed-loop spectrum
    cfg = small_loop(g_fb=3e3)
    om = cfg.mode.omega_m

    def f(w):
        return 0.5 * (1 + (w / om) ** 2) * float(inferred_displacement_psd(cfg, w)) / TWO_PI

    pts = [om * x for x in (0.9, 0.97, 1.0, 1.03, 1.1)]
    total = integrate.quad(f, 0, 3 * om, points=pts, limit=500)[0] + integrate.quad(f, 3 * om, 1e3 * om, limit=200)[0]
    assert analytic_occupation(cfg) == pytest.approx(total - 0.5, rel=2e-3)


def test_empty_spectrum_is_unphysical():
    w = np.linspace(1, 10, 50)
    with pytest.raises(UnphysicalOccupationError):
        phonon_from_psd(w, np.zeros_like(w), 5.0)


def test_reflection_values():
    cav = OpticalCavity(TWO_PI * 8.8e9, TWO_PI * 6.9e9)
    assert float(cavity_reflection(cav)) == pytest.approx((1 - 2 * 6.9 / 8.8) ** 2)
    assert float(cavity_reflection(cav, 1e6 * cav.kappa)) == pytest.approx(1.0, abs=1e-9)
    crit = OpticalCavity(2.0, 1.0)
    assert float(cavity_reflection(crit)) == pytest.approx(0.0, abs=1e-15)
    d = np.linspace(-10, 10, 201) * cav.kappa
    r = cavity_reflection(cav, d)
    assert np.all((r >= 0) & (r <= 1))


def test_spring_is_odd_and_signed(lhe_het):
    cfg = lhe_het.loop
    d = np.linspace(-3, 3, 61) * cfg.cavity.kappa
    s = optical_spring_shift(cfg.cavity, cfg.coupling, cfg.mode, d)
    np.testing.assert_allclose(s, -s[::-1], rtol=1e-12, atol=0)
    assert s[30] == 0.0
    assert np.all(np.sign(s[d != 0]) == np.sign(d[d != 0]))
    np.testing.assert_allclose(spring_curve(d, cfg.cavity.kappa, cfg.coupling.g0, cfg.coupling.n_c), s)
