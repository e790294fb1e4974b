"""End-to-end chains shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .core import TWO_PI, LoopConfig, SpectrumTrace
from .inference import fit_homodyne_spectrum, infer_and_count
from .physics import analytic_occupation, effective_linewidth, effective_resonance
from .sim import default_dt, simulate_psd
from .spectra import shot_normalize, smooth_reference

log = logging.getLogger(__name__)


def segment_length(cfg: LoopConfig, dt: float, bins_per_width: float = 10.0, pow2: bool = True) -> int:
    """Welch segment giving at least ``bins_per_width`` bins across the broadened peak."""
    width_hz = max(effective_linewidth(cfg), cfg.mode.gamma_m) / TWO_PI
    n = int(math.ceil(bins_per_width / (width_hz * dt)))
    if pow2:
        n = 1 << max(n - 1, 1).bit_length()
    return n


def fit_band(cfg: LoopConfig, spec: SpectrumTrace, half_widths: float = 30.0,
             min_fraction: float = 0.15) -> SpectrumTrace:
    """At least ``half_widths`` linewidths each side, and never narrower than
    ``min_fraction * f_M`` so that narrow peaks still expose the imprecision floor."""
    width_hz = max(effective_linewidth(cfg), cfg.mode.gamma_m) / TWO_PI
    f0 = effective_resonance(cfg) / TWO_PI
    half = max(half_widths * width_hz, min_fraction * f0)
    lo = max(f0 - half, 0.05 * f0)
    hi = min(f0 + half, 1.9 * f0)
    return spec.band(lo, hi)


@dataclass
class HomodynePoint:
    g_fb: float
    seed: int
    n_true: float
    n_fit: float
    n_sigma: float
    fit: object
    spectrum: SpectrumTrace  # shot-normalised in-loop spectrum over the fit band

    def as_dict(self) -> dict:
        return {"g_fb": self.g_fb, "seed": self.seed, "n_true": self.n_true, "n_fit": self.n_fit,
                "n_sigma": self.n_sigma, "fit": self.fit.as_dict()}


def simulate_homodyne(cfg: LoopConfig, seed: int, n_segments: int = 500, bins_per_width: float = 10.0,
                      samples_per_period: int = 64, half_widths: float = 30.0) -> SpectrumTrace:
    """Simulated in-loop spectrum normalised to a simulated shot-noise record."""
    dt = default_dt(cfg, samples_per_period)
    seg = segment_length(cfg, dt, bins_per_width)
    run = simulate_psd(cfg, seed, seg, n_segments, dt=dt, with_shot=True)
    shot = smooth_reference(run.spectra["shot"])
    norm = shot_normalize(run.spectra["measurement"], shot)
    return fit_band(cfg, norm, half_widths)


def homodyne_point(cfg: LoopConfig, seed: int, n_segments: int = 500, bins_per_width: float = 10.0,
                   samples_per_period: int = 64, init: LoopConfig | None = None) -> HomodynePoint:
    """simulate -> Welch -> shot-normalise -> fit -> infer -> occupation."""
    spec = simulate_homodyne(cfg, seed, n_segments, bins_per_width, samples_per_period)
    fit = fit_homodyne_spectrum(spec, cfg if init is None else init, shot_level=cfg.channel.shot)
    occ = infer_and_count(fit)
    return HomodynePoint(cfg.filter.g_fb, seed, analytic_occupation(cfg), occ.n_bar, occ.sigma, fit, spec)


# ---------------------------------------------------------------------------
# gain sweeps


def sweep_job(cfg: LoopConfig, g_fb: float, seed: int, n_segments: int, samples_per_period: int,
              bins_per_width: float = 10.0) -> dict:
    """One (gain, seed) point; failures are returned as a row, not raised."""
    row = {"g_fb": float(g_fb), "seed": int(seed)}
    c = cfg.with_gain(g_fb)
    try:
        row["n_true"] = float(analytic_occupation(c))
    except Exception as exc:  # unstable or unphysical loop: no truth to report
        row["n_true"] = None
        row["error"] = f"{type(exc).__name__}: {exc}"
        return row
    try:
        pt = homodyne_point(c, seed, n_segments, bins_per_width, samples_per_period)
        row.update(n_fit=pt.n_fit, n_sigma=pt.n_sigma, chi2_red=pt.fit.chi2_red,
                   gamma_eff_hz=effective_linewidth(c) / TWO_PI, fit=pt.fit.as_dict())
    except Exception as exc:
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def run_sweep(cfg: LoopConfig, gains, seeds, n_segments: int = 500, samples_per_period: int = 64,
              workers: int = 1, bins_per_width: float = 10.0) -> list[dict]:
    """Independent (gain, seed) jobs on a bounded process pool, returned in job order."""
    jobs = [(float(g), int(s)) for g in gains for s in seeds]
    args = [(cfg, g, s, n_segments, samples_per_period, bins_per_width) for g, s in jobs]
    if workers <= 1 or len(jobs) == 1:
        return [sweep_job(*a) for a in args]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(sweep_job, *a) for a in args]
        return [f.result() for f in futures]


def is_u_shaped(gains, n_bars) -> bool:
    """Strictly falls to an interior minimum and rises after it."""
    order = np.argsort(gains)
    n = np.asarray(n_bars, dtype=float)[order]
    i = int(np.argmin(n))
    if i == 0 or i == n.size - 1:
        return False
    return bool(n[0] > n[i] and n[-1] > n[i])


# ---------------------------------------------------------------------------
# heterodyne


@dataclass
class HeterodyneSetup:
    omega_het: float
    band_hz: tuple[float, float] | None
    eta_het: float
    n_avg: float
    c_y: float
    probe_detuning: float  # rad/s

    @classmethod
    def from_dict(cls, d: dict) -> "HeterodyneSetup":
        band = d.get("band_hz")
        return cls(TWO_PI * float(d.get("omega_het_hz", 2.81e6)), tuple(band) if band else None,
                   float(d.get("eta_het", 0.3)), float(d.get("n_avg", 1000)), float(d.get("c_y", 0.0)),
                   TWO_PI * float(d.get("probe_detuning_hz", 0.0)))


def heterodyne_spectrum(cfg: LoopConfig, setup: HeterodyneSetup, seed: int | None, n_bar: float | None = None,
                        n_avg: float | None = None, bins_per_band: float = 300.0):
    """Synthetic out-of-loop spectrum for the loop state; ``n_bar`` overrides the occupation.

    Returns ``(n_true, spectrum, generator_parameters)``.
    """
    from .heterodyne import heterodyne_from_loop, sideband_grid, synth_heterodyne_psd

    n_loop, het = heterodyne_from_loop(cfg, setup.omega_het, setup.eta_het)
    n_true = n_loop if n_bar is None else float(n_bar)
    gw = het.gamma_eff / TWO_PI
    bpw = 10.0
    if setup.band_hz is not None:
        bpw = max(bpw, gw / ((setup.band_hz[1] - setup.band_hz[0]) / bins_per_band))
    freqs = sideband_grid(het, bins_per_width=bpw)
    n_avg = setup.n_avg if n_avg is None else n_avg
    rng = np.random.default_rng(seed) if seed is not None else None
    spec = synth_heterodyne_psd(n_true, het, freqs, n_avg if rng is not None else np.inf, rng)
    return n_true, spec, het


# ---------------------------------------------------------------------------
# filter design


def design_spec_from_config(cfg: LoopConfig, design: dict):
    from .control import DesignSpec

    return DesignSpec(cfg.mode, tuple(cfg.higher_modes), cfg.filter.tau_fb,
                      (float(design.get("gain_min", 1e3)), float(design.get("gain_max", 1e7))),
                      float(design.get("phase_target_rad", np.pi / 2)), float(design.get("slack", 0.0)),
                      int(design.get("max_sections", 4)))


def gain_for_occupation(cfg: LoopConfig, n_target: float, branch: str = "low", g_range=None) -> float:
    """Gain at which the analytic occupation equals ``n_target``, below or above the optimum."""
    from scipy.optimize import brentq

    from .control import optimize_gain

    g0 = cfg.filter.g_fb if cfg.filter.g_fb > 0 else 1e5
    lo, hi = g_range or (g0 / 1e3, g0 * 1e2)
    opt = optimize_gain(cfg, (lo, hi), n_scan=61)
    if n_target < opt.n_min:
        raise ValueError(f"target {n_target} is below the reachable minimum {opt.n_min:.4g}")

    def f(lg):
        return analytic_occupation(cfg.with_gain(math.exp(lg))) - n_target

    a, b = (math.log(lo), math.log(opt.g_opt)) if branch == "low" else (math.log(opt.g_opt), math.log(hi))
    return float(math.exp(brentq(f, a, b, xtol=1e-10)))
