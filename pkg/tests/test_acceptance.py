"""Acceptance criteria 1-10, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed together at the
end of the pytest run.
"""

import math
from dataclasses import replace

import numpy as np
import pytest

from coldloop import config
from coldloop.characterize import fit_optical_spring, fit_reflection, fit_ringdown
from coldloop.cli import write_characterization_data
from coldloop.control import (
    check_closed_loop_stability,
    design_filter,
    max_stable_gain,
    mode_damping_delta,
    optimize_gain,
)
from coldloop.core import TWO_PI, LoopInstabilityError
from coldloop.heterodyne import (
    HeterodyneFit,
    LaserNoise,
    OverlappingSidebandsError,
    band_sums,
    captured_fraction,
    estimate_amplitude_noise,
    fit_sidebands,
    phase_noise_correction,
    phase_quadrature_noise,
    phonon_from_sideband_fit,
    photon_flux,
    sideband_grid,
    synth_amplitude_noise_spectra,
    synth_heterodyne_psd,
)
from coldloop.physics import (
    closed_loop_measured_psd,
    effective_linewidth,
    single_photon_cooperativity,
    thermal_occupation,
)
from coldloop.pipeline import (
    HeterodyneSetup,
    design_spec_from_config,
    gain_for_occupation,
    heterodyne_spectrum,
    homodyne_point,
    is_u_shaped,
    run_sweep,
    segment_length,
)
from coldloop.sim import default_dt, simulate_closed_loop, simulate_psd

from conftest import ACCEPTANCE, small_loop

pytestmark = pytest.mark.acceptance

SPP = 32  # samples per mechanical period for the homodyne simulations


def record(n: int, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


# 1 -----------------------------------------------------------------------

def test_criterion_1_budget(lhe_het):
    mode = lhe_het.loop.mode
    c0 = single_photon_cooperativity(TWO_PI * 224e3, TWO_PI * 8.8e9, mode.gamma_m)
    n_th = thermal_occupation(18.3, TWO_PI * 1.045e6)
    ok = 1.0e3 <= c0 <= 1.2e3 and abs(n_th / 3.6e5 - 1) <= 0.03
    record(1, ok, f"C_0 = {c0:.4g} (need 1.0e3-1.2e3), n_th = {n_th:.4g} (need 3.6e5 +- 3%)")


# 2 -----------------------------------------------------------------------

def _random_stable_loops(n, seed):
    """Single-mode loops with a random mode, bath, imprecision and delay,
    at a gain giving Gamma_eff / Omega_M in [0.01, 0.03]."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        cfg = small_loop(f_hz=rng.uniform(0.3e6, 1.2e6), q=10 ** rng.uniform(5, 7.7),
                         n_bath=10 ** rng.uniform(2, 5), s_imp=10 ** rng.uniform(-6, -3),
                         tau=rng.uniform(5e-8, 7e-7), eps=rng.uniform(0, 1e-6))
        om = cfg.mode.omega_m
        im = float(np.imag(cfg.filter.transfer(om)))
        if im < 0.2:
            continue
        target = rng.uniform(0.01, 0.03) * om
        c = cfg.with_gain((target - cfg.mode.gamma_m) / im)
        if check_closed_loop_stability(c).stable:
            out.append(c)
    return out


def test_criterion_2_simulated_psd_matches_analytic():
    worst_signed = worst_abs = 0.0
    for i, cfg in enumerate(_random_stable_loops(10, 2024)):
        dt = default_dt(cfg, SPP)
        run = simulate_psd(cfg, 100 + i, segment_length(cfg, dt, 10), 1000, dt=dt)
        spec = run.spectra["measurement"]
        om, ge = cfg.mode.omega_m, effective_linewidth(cfg)
        w = TWO_PI * spec.freqs
        sel = (w >= om - 50 * ge) & (w <= om + 50 * ge) & (w > 0)
        rel = spec.psd[sel] / closed_loop_measured_psd(cfg, w[sel]) - 1.0
        worst_signed = max(worst_signed, abs(rel.mean()))
        worst_abs = max(worst_abs, np.abs(rel).mean())
    ok = worst_signed < 0.05 and worst_abs < 0.05
    record(2, ok, f"10 random loops, 1000 segments: worst |mean rel dev| = {worst_signed:.4f}, "
                  f"worst mean |rel dev| = {worst_abs:.4f} (need < 0.05)")


# 3 -----------------------------------------------------------------------

def test_criterion_3_homodyne_sweep(lhe_het):
    gains = lhe_het.sweep["gains"]
    rows = run_sweep(lhe_het.loop, gains, [1], int(lhe_het.sweep["n_segments"]), SPP)
    bad = [r for r in rows if "error" in r]
    rel = [r["n_fit"] / r["n_true"] - 1 for r in rows if "error" not in r]
    u = is_u_shaped([r["g_fb"] for r in rows if "error" not in r], [r["n_fit"] for r in rows if "error" not in r])
    worst = max(abs(x) for x in rel) if rel else math.inf
    ok = not bad and worst < 0.10 and u
    devs = " ".join(f"{x:+.3f}" for x in rel)
    record(3, ok, f"8-gain LHe sweep rel dev [{devs}], worst {worst:.3f} (need < 0.10), U-shaped={u}"
                  + (f", {len(bad)} failed points" if bad else ""))


# 4 -----------------------------------------------------------------------

def _with_probe(sc, n_c_probe):
    # probe photons for the heterodyne only; the loop (and its n_ba) is unchanged
    loop = sc.loop
    return replace(loop, coupling=replace(loop.coupling, n_c_probe=n_c_probe))


@pytest.mark.parametrize("name,n_target", [("lhe_only", 0.76), ("lhe_het", 1.06), ("ln2_het", 3.45),
                                            ("lhe_het", 10.0)])
def test_criterion_4_homodyne_heterodyne_agree(name, n_target):
    sc = config.load_reference(name)
    loop = sc.loop
    g = gain_for_occupation(loop, n_target, "low")
    cfg = loop.with_gain(g)
    hom = homodyne_point(cfg, seed=1, n_segments=2000, samples_per_period=SPP)
    het_cfg = _with_probe(sc, 100.0).with_gain(g) if loop.coupling.n_c_probe == 0 else cfg
    setup = HeterodyneSetup.from_dict(sc.heterodyne or config.load_reference("lhe_het").heterodyne)
    _, spec, _ = heterodyne_spectrum(het_cfg, setup, seed=2, n_avg=1e6)
    n_het = phonon_from_sideband_fit(fit_sidebands(spec, setup.omega_het))
    rel = hom.n_fit / n_het - 1
    record(4, abs(rel) < 0.10, f"{name} at n = {n_target}: homodyne {hom.n_fit:.4g}, heterodyne {n_het:.4g}, "
                              f"rel diff {rel:+.3f} (need < 0.10)")


# 5 -----------------------------------------------------------------------

def test_criterion_5_asymmetry_inverse_and_gain_invariance(lhe_het):
    om_het, om_eff, gam = TWO_PI * 2.81e6, TWO_PI * 1.045e6, TWO_PI * 2e3
    worst = 0.0
    for n in (0.0, 0.1, 0.76, 1.06, 3.45, 10.0, 100.0):
        het = HeterodyneFit.for_occupation(n, 2 * gam, om_het, om_eff, gam, 1.0, 1.0)
        assert het.k_r / het.k_l == pytest.approx(n / (n + 1), rel=1e-15)
        fit = fit_sidebands(synth_heterodyne_psd(n, het, sideband_grid(het)), om_het)
        worst = max(worst, abs(phonon_from_sideband_fit(fit) - n))

    setup = HeterodyneSetup.from_dict(lhe_het.heterodyne)
    k, s, skipped = [], [], 0
    for i, g in enumerate(lhe_het.sweep["gains"]):
        _, spec, _ = heterodyne_spectrum(lhe_het.loop.with_gain(g), setup, seed=10 + i)
        try:
            fit = fit_sidebands(spec, setup.omega_het)
        except OverlappingSidebandsError:
            skipped += 1
            continue
        k.append(fit.k_diff)
        s.append(fit.k_diff_sigma)
    k, s = np.array(k), np.array(s)
    mean = np.sum(k / s**2) / np.sum(1 / s**2)
    pulls = (k - mean) / s
    ok = worst < 1e-6 and np.all(np.abs(pulls) < 3)
    record(5, ok, f"noiseless inverse worst |dn| = {worst:.2e}; k_l - k_r over {k.size} gains "
                  f"({skipped} overlap-skipped) max pull {np.max(np.abs(pulls)):.2f} sigma (need < 3)")


# 6 -----------------------------------------------------------------------

def test_criterion_6_band_truncation(lhe_het):
    setup = HeterodyneSetup.from_dict(lhe_het.heterodyne)
    worst = 0.0
    for g in (8.2e4, 1.85e5, 4.18e5, 9.45e5, 2.134e6):
        _, spec, het = heterodyne_spectrum(lhe_het.loop.with_gain(g), setup, seed=None)
        (s_l, s_r), _ = band_sums(spec, setup.band_hz, setup.omega_het, (het.n_l, het.n_r))
        measured = (s_l - s_r) / (het.k_diff / 4)  # sideband area is k / 4 in Hz units
        expected = captured_fraction(setup.band_hz, het.omega_eff / TWO_PI, het.gamma_eff / TWO_PI)
        worst = max(worst, abs(measured / expected - 1))
    record(6, worst < 0.02, f"band-sum reduction vs captured fraction, worst rel dev {worst:.4f} (need < 0.02)")


# 7 -----------------------------------------------------------------------

def test_criterion_7_squashing(lhe_het):
    g = lhe_het.sweep["gains"][-1]
    pt = homodyne_point(lhe_het.loop.with_gain(g), seed=3, n_segments=500, samples_per_period=SPP)
    from coldloop.inference import infer_and_count

    occ = infer_and_count(pt.fit)
    in_loop_min = float(np.min(pt.spectrum.psd))
    shot = pt.fit.s_imp
    inferred = (occ.s_x.psd + shot) / shot
    # the feedback spring pulls the broadened peak off Omega_M, but not by more than a linewidth
    cfg = lhe_het.loop.with_gain(g)
    w_peak = TWO_PI * occ.s_x.freqs[np.argmax(occ.s_x.psd)]
    has_peak = (abs(w_peak - cfg.mode.omega_m) < effective_linewidth(cfg)
                and float(np.max(inferred)) > 2.0)
    # 500-segment estimates scatter by ~5% per bin; the dip must clear that
    dips = in_loop_min < 0.9
    ok = dips and float(np.min(inferred)) >= 1.0 and has_peak
    record(7, ok, f"g = {g:.3g}: in-loop min {in_loop_min:.3f} (need < 1), inferred (S_X + S_imp)/shot "
                  f"min {np.min(inferred):.3f} (need >= 1), inferred peak at {w_peak / TWO_PI:.4g} Hz, height {np.max(inferred):.3g} x shot")


# 8 -----------------------------------------------------------------------

def _bounded(cfg, seed) -> bool:
    try:
        run = simulate_closed_loop(cfg, seed, duration=0.02, dt=default_dt(cfg, 128), burn_in=0.0,
                                   keep=("displacement",))
    except LoopInstabilityError:
        return False
    x = run.traces["displacement"].samples
    q = x.size // 4
    return bool(np.std(x[-q:]) < 10 * max(np.std(x[:q]), 1.0))


def test_criterion_8_design_and_stability():
    deltas_ok = True
    agree = total = n_stable = 0
    for name, tau in (("lhe_het", 6.4e-7), ("ln2_het", 6.8e-7)):
        sc = config.load_reference(name)
        cfg = replace(sc.loop, filter=replace(sc.loop.filter, tau_fb=tau))
        filt = design_filter(design_spec_from_config(cfg, sc.design))
        deltas_ok &= all(mode_damping_delta(filt, 1.0, m) >= 0 for m in cfg.modes)
        d = replace(cfg, filter=replace(filt, g_fb=cfg.filter.g_fb, epsilon_fb=cfg.filter.epsilon_fb))
        g_opt = optimize_gain(d, (1e3, 1e7)).g_opt
        g_max = max_stable_gain(d, 1e3, 1e4)
        gains = list(np.geomspace(0.02, 0.85, 10) * g_max) + [1.5 * g_max, -0.05 * g_opt]
        if name == "lhe_het":
            gains.append(-g_opt)
        for i, g in enumerate(gains):
            c = d.with_gain(g)
            verdict = check_closed_loop_stability(c).stable
            n_stable += verdict
            agree += verdict == _bounded(c, i)
            total += 1
    ok = deltas_ok and agree == total and n_stable == 20 and total == 25
    record(8, ok, f"designed filters cool every mode={deltas_ok}; checker agrees with time domain on "
                  f"{agree}/{total} ({n_stable} stable, {total - n_stable} unstable)")


# 9 -----------------------------------------------------------------------

def test_criterion_9_characterization(lhe_het, tmp_path):
    cfg = lhe_het.loop
    write_characterization_data(cfg, {"n_c_resonant": 300.0}, 9, tmp_path)

    def cols(name):
        return np.loadtxt(tmp_path / name, delimiter=",", skiprows=1)

    rd, rf, sp = cols("ringdown.csv"), cols("reflection.csv"), cols("spring.csv")
    q = fit_ringdown(rd[:, 0], rd[:, 1], cfg.mode.omega_m).q_factor
    refl = fit_reflection(TWO_PI * rf[:, 0], rf[:, 1])
    g0 = fit_optical_spring(TWO_PI * sp[:, 0], TWO_PI * sp[:, 1], refl.kappa, 300.0).g0
    got = {"Q": (q, 5.1e7), "kappa/2pi": (refl.kappa / TWO_PI, 8.8e9),
           "kappa_e/2pi": (refl.kappa_e / TWO_PI, 6.9e9), "g0/2pi": (g0 / TWO_PI, 2.24e5)}
    devs = {k: abs(v / t - 1) for k, (v, t) in got.items()}
    record(9, max(devs.values()) < 0.02,
           ", ".join(f"{k} {got[k][0]:.4g} ({devs[k]:.4f})" for k in got) + " (need < 0.02 each)")


# 10 ----------------------------------------------------------------------

def test_criterion_10_laser_noise(lhe_het):
    rng = np.random.default_rng(10)
    f = np.linspace(1e5, 5e6, 4000)
    full, bal, dark = synth_amplitude_noise_spectra(f, 2e-3, n_avg=1e6, rng=rng)
    c_amp = estimate_amplitude_noise(full, bal, dark)
    amp_ok = abs(c_amp / 2e-3 - 1) < 0.05

    flux = photon_flux(1.3e-6)
    lin = [phase_quadrature_noise(c, flux) / (2 * flux * c) for c in (1e-12, 3.7e-10, 1e-8)]
    from_phase = LaserNoise.from_phase_noise(2e-10, 1.3e-6)
    lin_ok = all(x == 1.0 for x in lin) and from_phase.c_y == 2 * from_phase.photon_flux * 2e-10

    setup = HeterodyneSetup.from_dict(lhe_het.heterodyne)
    corr = phase_noise_correction(LaserNoise(c_y=setup.c_y), lhe_het.loop.cavity, setup.probe_detuning,
                                  lhe_het.loop.mode.omega_m)
    corr_ok = abs(corr / 0.05 - 1) <= 0.20
    record(10, amp_ok and lin_ok and corr_ok,
           f"C_amp {c_amp:.4g} (inject 2e-3, need 5%); C_Y = 2 n C_theta exact={lin_ok}; "
           f"phase-noise correction {corr:.4f} (need 0.05 +- 20%)")
