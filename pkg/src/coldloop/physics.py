"""Analytic frequency-domain model of the measurement-feedback loop."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.constants import hbar, k as k_b

from .core import (
    TWO_PI,
    CouplingBudget,
    LoopConfig,
    LoopInstabilityError,
    MechanicalMode,
    NoiseInputs,
    OpticalCavity,
    UnphysicalOccupationError,
)


def mech_susceptibility(mode: MechanicalMode, omega):
    """chi(omega) = Omega / ((Omega^2 - omega^2) - i Gamma omega)."""
    omega = np.asarray(omega, dtype=float)
    om, gm = mode.omega_m, mode.gamma_m
    return om / ((om**2 - omega**2) - 1j * gm * omega)


def force_noise_psd(noise: NoiseInputs | float, mode: MechanicalMode) -> float:
    """Flat one-sided force PSD ``2 Gamma (2 n_bath + 1)``."""
    n_bath = noise.n_bath if isinstance(noise, NoiseInputs) else float(noise)
    if n_bath < 0:
        raise ValueError("n_bath must be non-negative")
    return 2.0 * mode.gamma_m * (2.0 * n_bath + 1.0)


def thermal_occupation(temperature: float, omega_m: float) -> float:
    """High-temperature occupation k_B T / (hbar Omega)."""
    if temperature < 0 or omega_m <= 0:
        raise ValueError("need T >= 0 and omega_m > 0")
    return k_b * temperature / (hbar * omega_m)


def single_photon_cooperativity(g0: float, kappa: float, gamma_m: float) -> float:
    if min(g0, kappa, gamma_m) <= 0:
        raise ValueError("g0, kappa and gamma_m must be positive")
    return 4.0 * g0**2 / (kappa * gamma_m)


def intracavity_photons(power_w: float, cavity: OpticalCavity, wavelength_m: float = 1550e-9) -> float:
    """Mean intracavity photon number for a one-port drive at ``cavity.detuning``."""
    omega_l = TWO_PI * 299792458.0 / wavelength_m
    flux = power_w / (hbar * omega_l)
    return cavity.kappa_e * flux / (cavity.detuning**2 + cavity.kappa**2 / 4.0)


def measurement_rate(g0: float, n_c: float, kappa: float, eta_det: float) -> float:
    return 4.0 * eta_det * n_c * g0**2 / kappa


def quantum_imprecision(g0: float, n_c: float, kappa: float, eta_det: float) -> float:
    """Imprecision PSD of an ideal phase readout, ``1 / (4 Gamma_meas)``.

    With the force back-action ``4 Gamma n_ba`` this saturates
    ``S_imp * S_ba = 1 / eta_det``.
    """
    rate = measurement_rate(g0, n_c, kappa, eta_det)
    if rate <= 0:
        raise ValueError("measurement rate is zero; imprecision is unbounded")
    return 1.0 / (4.0 * rate)


@dataclass(frozen=True)
class RateBudget:
    n_th: float
    c0: float
    n_ba: float
    gamma_meas: float
    gamma_dec: float
    ratio: float
    eta_det: float
    n_c: float

    def as_dict(self) -> dict:
        return {k: float(v) for k, v in self.__dict__.items()}


def rate_budget(cfg: LoopConfig) -> RateBudget:
    """Measurement and decoherence rates and their ratio."""
    c = cfg.coupling
    if c.eta_det <= 0:
        raise ValueError("eta_det = 0: the measurement carries no information")
    if c.n_c <= 0:
        raise ValueError("n_c = 0: measurement rate vanishes, ratio undefined")
    c0 = single_photon_cooperativity(c.g0, cfg.cavity.kappa, cfg.mode.gamma_m)
    n_ba = c.n_c * c0
    g_meas = measurement_rate(c.g0, c.n_c, cfg.cavity.kappa, c.eta_det)
    g_dec = (cfg.noise.n_th + n_ba) * cfg.mode.gamma_m
    ratio = (cfg.noise.n_th / (c.n_c * c0) + 1.0) / c.eta_det
    return RateBudget(cfg.noise.n_th, c0, n_ba, g_meas, g_dec, ratio, c.eta_det, c.n_c)


# ---------------------------------------------------------------------------
# closed loop


def plant_susceptibility(cfg: LoopConfig, omega):
    """Sum of weighted mode susceptibilities seen by the loop."""
    chi = mech_susceptibility(cfg.mode, omega)
    for hm in cfg.higher_modes:
        chi = chi + hm.weight * mech_susceptibility(hm, omega)
    return chi


def higher_mode_occupation(cfg: LoopConfig, hm: MechanicalMode) -> float:
    # same effective temperature as the fundamental
    return cfg.noise.n_bath * cfg.mode.omega_m / hm.omega_m


def _motional_numerator(cfg: LoopConfig, omega):
    chi = mech_susceptibility(cfg.mode, omega)
    num = np.abs(chi) ** 2 * force_noise_psd(cfg.noise, cfg.mode)
    for hm in cfg.higher_modes:
        s_f = force_noise_psd(higher_mode_occupation(cfg, hm), hm)
        num = num + hm.weight * np.abs(mech_susceptibility(hm, omega)) ** 2 * s_f
    return num


def parasitic_susceptibility(cfg: LoopConfig) -> float:
    """Direct feed-through of the control into the readout.

    ``epsilon_fb`` is dimensionless, relative to the static susceptibility
    ``1 / Omega_M`` of the fundamental.
    """
    return cfg.filter.epsilon_fb / cfg.mode.omega_m


def loop_denominator(cfg: LoopConfig, omega):
    """``1 - g (chi + eps) H`` with the delayed filter."""
    f = cfg.filter
    eps = parasitic_susceptibility(cfg)
    return 1.0 - f.g_fb * (plant_susceptibility(cfg, omega) + eps) * f.transfer(omega)


def _require_stable(cfg: LoopConfig):
    if cfg.filter.g_fb == 0:
        return
    from .control import check_closed_loop_stability

    rep = check_closed_loop_stability(cfg)
    if not rep.stable:
        raise LoopInstabilityError(f"closed loop is unstable: {rep.summary()}")


def closed_loop_measured_psd(cfg: LoopConfig, omega, check: bool = True):
    """In-loop measured PSD ``(|chi|^2 S_F + S_imp) / |1 - g (chi + eps) H|^2``."""
    if check:
        _require_stable(cfg)
    omega = np.asarray(omega, dtype=float)
    num = _motional_numerator(cfg, omega) + cfg.channel.s_imp
    return num / np.abs(loop_denominator(cfg, omega)) ** 2


def inferred_displacement_psd(cfg: LoopConfig, omega, check: bool = False):
    """Spectrum of the true displacement of the fundamental inside the loop.

    ``|chi|^2 (|1 - eps g H|^2 S_F + |g H|^2 S_imp) / |1 - g (chi + eps) H|^2``.
    """
    if check:
        _require_stable(cfg)
    omega = np.asarray(omega, dtype=float)
    f = cfg.filter
    h = f.transfer(omega)
    chi = mech_susceptibility(cfg.mode, omega)
    s_f = force_noise_psd(cfg.noise, cfg.mode)
    gh = f.g_fb * h
    num = np.abs(chi) ** 2 * (np.abs(1.0 - parasitic_susceptibility(cfg) * gh) ** 2 * s_f + np.abs(gh) ** 2 * cfg.channel.s_imp)
    return num / np.abs(loop_denominator(cfg, omega)) ** 2


def effective_linewidth(cfg: LoopConfig) -> float:
    """Intrinsic plus feedback damping of the fundamental (rad/s)."""
    h = cfg.filter.transfer(cfg.mode.omega_m)
    return cfg.mode.gamma_m + cfg.filter.g_fb * cfg.mode.weight * float(np.imag(h))


def effective_resonance(cfg: LoopConfig) -> float:
    """Fundamental frequency including the in-phase feedback spring."""
    om = cfg.mode.omega_m
    h = cfg.filter.transfer(om)
    shift2 = cfg.filter.g_fb * om * float(np.real(h))
    return float(np.sqrt(max(om**2 - shift2, 0.25 * om**2)))


# ---------------------------------------------------------------------------
# occupation integral


def phonon_grid(omega_m: float, width: float, n_core: int = 4001, n_log: int = 1200,
                span: tuple[float, float] = (1e-3, 1e3), center: float | None = None) -> np.ndarray:
    """Angular-frequency grid resolving a resonance of FWHM ``width``.

    Dense sinh-spaced core around ``center`` (default ``omega_m``) merged with a
    log-spaced grid over ``span * omega_m``.
    """
    c = omega_m if center is None else center
    half = 0.9 * c
    u = np.linspace(-1.0, 1.0, n_core)
    a = np.arcsinh(half / (0.02 * width))
    core = c + 0.02 * width * np.sinh(a * u)
    logs = np.geomspace(span[0] * omega_m, span[1] * omega_m, n_log)
    grid = np.union1d(core, logs)
    return grid[grid > 0]


@dataclass(frozen=True)
class PhononEstimate:
    n_bar: float
    tail: float  # estimated integral beyond the grid, in phonons
    integral: float

    def __float__(self):
        return self.n_bar


def phonon_from_psd(omega, s_x, omega_m: float, warn_fraction: float = 1e-3) -> PhononEstimate:
    """Occupation ``(1/2) int_0^inf domega/2pi (1 + omega^2/Omega^2) S_X - 1/2`` by trapezoid."""
    omega = np.asarray(omega, dtype=float)
    s_x = np.asarray(s_x, dtype=float)
    if omega.shape != s_x.shape or omega.size < 2:
        raise ValueError("omega and s_x must be matching arrays with >= 2 points")
    integrand = (1.0 + (omega / omega_m) ** 2) * s_x / TWO_PI
    total = float(np.trapezoid(integrand, omega))
    # low end flat, high end ~ omega^-2
    tail = float(integrand[0] * omega[0] + integrand[-1] * omega[-1])
    if total > 0 and tail > warn_fraction * total:
        warnings.warn(
            f"phonon integral truncated: tail estimate {tail:.3g} is "
            f"{tail / total:.2%} of the integral", RuntimeWarning, stacklevel=2)
    n_bar = 0.5 * total - 0.5
    if n_bar < -0.25:
        raise UnphysicalOccupationError(
            f"integrated occupation {n_bar:.3g} is below the zero-point bound")
    return PhononEstimate(n_bar, 0.5 * tail, total)


def analytic_occupation(cfg: LoopConfig, **grid_kw) -> float:
    """Occupation of the fundamental from the forward model."""
    width = max(effective_linewidth(cfg), cfg.mode.gamma_m)
    grid = phonon_grid(cfg.mode.omega_m, width, center=effective_resonance(cfg), **grid_kw)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return phonon_from_psd(grid, inferred_displacement_psd(cfg, grid), cfg.mode.omega_m).n_bar


# ---------------------------------------------------------------------------
# static characterisation models


def cavity_reflection(cav: OpticalCavity, detuning=None):
    """One-port reflection ``|1 - kappa_e / (kappa/2 - i Delta)|^2``."""
    d = cav.detuning if detuning is None else np.asarray(detuning, dtype=float)
    return np.abs(1.0 - cav.kappa_e / (cav.kappa / 2.0 - 1j * d)) ** 2


def optical_spring_shift(cav: OpticalCavity, coupling: CouplingBudget, mode: MechanicalMode | None = None,
                         detuning=None):
    """Unresolved-sideband spring shift (rad/s) at fixed input power.

    ``coupling.n_c`` is taken as the intracavity photon number the drive gives
    on resonance; it is rescaled by the Lorentzian cavity response.
    """
    if mode is not None and mode.omega_m > 0.1 * cav.kappa:
        warnings.warn("spring model assumes kappa >> Omega_M", RuntimeWarning, stacklevel=2)
    return spring_curve(cav.detuning if detuning is None else detuning,
                        cav.kappa, coupling.g0, coupling.n_c)


def spring_curve(detuning, kappa: float, g0: float, n_c_resonant: float):
    d = np.asarray(detuning, dtype=float)
    lor = kappa**2 / 4.0
    return g0**2 * n_c_resonant * lor / (d**2 + lor) * 2.0 * d / (d**2 + lor)
