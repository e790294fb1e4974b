"""Fitting in-loop spectra, inferring the true displacement and counting phonons."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize
from scipy.ndimage import median_filter

from .core import TWO_PI, FeedbackFilter, LoopConfig, MechanicalMode, NoiseInputs, MeasurementChannel, SpectrumTrace
from .physics import (
    closed_loop_measured_psd,
    effective_linewidth,
    effective_resonance,
    inferred_displacement_psd,
    phonon_from_psd,
    phonon_grid,
)


class FitError(RuntimeError):
    """Base class for spectrum-fit failures."""


class FitConvergenceError(FitError):
    pass


class ParameterAtBoundError(FitError):
    def __init__(self, message, names=()):
        super().__init__(message)
        self.names = tuple(names)


class IllConditionedFitError(FitError):
    def __init__(self, message, cond=math.inf):
        super().__init__(message)
        self.cond = cond


class ToneNotFoundError(ValueError):
    pass


class ToneSaturatedError(ValueError):
    pass


PARAM_NAMES = ("s_fn", "s_imp", "g_fb", "epsilon_fb", "tau_fb", "omega_m")


@dataclass
class FitResult:
    s_fn: float
    s_imp: float
    g_fb: float
    epsilon_fb: float
    tau_fb: float
    omega_m: float
    gamma_m: float
    covariance: np.ndarray
    residual_rms: float
    config: LoopConfig  # fitted values merged into the initial config
    chi2_red: float = 1.0
    n_iter: int = 0
    cond: float = 1.0

    @property
    def params(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES])

    @property
    def errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))

    @property
    def n_bath(self) -> float:
        return self.config.noise.n_bath

    def as_dict(self) -> dict:
        err = self.errors
        out = {n: {"value": float(getattr(self, n)), "sigma": float(e)} for n, e in zip(PARAM_NAMES, err)}
        out["freq_hz"] = {"value": self.omega_m / TWO_PI, "sigma": float(err[5] / TWO_PI)}
        out["gamma_m"] = float(self.gamma_m)
        out["n_bath"] = float(self.n_bath)
        out["diagnostics"] = {"residual_rms": self.residual_rms, "chi2_red": self.chi2_red,
                              "n_iter": self.n_iter, "cond": self.cond}
        return out


def config_from_params(init: LoopConfig, p, gamma_m: float | None = None) -> LoopConfig:
    """Loop config with (s_fn, s_imp, g, eps, tau, omega) substituted."""
    s_fn, s_imp, g, eps, tau, om = (float(x) for x in p)
    gm = init.mode.gamma_m if gamma_m is None else gamma_m
    mode = replace(init.mode, omega_m=om, gamma_m=gm)
    n_bath = max(s_fn / (2.0 * gm) - 1.0, 0.0) / 2.0
    filt = replace(init.filter, g_fb=g, epsilon_fb=eps, tau_fb=tau)
    higher = tuple(hm for hm in init.higher_modes if hm.omega_m > om)
    return replace(init, mode=mode, noise=NoiseInputs(n_bath, 0.0),
                   channel=MeasurementChannel(s_imp, init.channel.shot_level), filter=filt, higher_modes=higher)


def _model(init, p, omega):
    return closed_loop_measured_psd(config_from_params(init, p), omega, check=False)


# ---------------------------------------------------------------------------
# initial guess


def _smooth(psd, n_avg, width=None):
    if width is None:
        width = 1 if not np.isfinite(n_avg) else int(min(max(3, 200 // max(n_avg, 1)), 31)) | 1
    return median_filter(psd, size=width, mode="nearest") if width > 1 else psd


def _initial_guess(spec: SpectrumTrace, init: LoopConfig):
    w = spec.omega
    s = _smooth(spec.psd, spec.n_avg)
    floor = float(np.median(np.concatenate([s[: max(3, s.size // 20)], s[-max(3, s.size // 20):]])))
    i_pk = int(np.argmax(s))
    peak = float(s[i_pk])
    om0 = init.mode.omega_m
    om = float(w[i_pk]) if (peak > 2.0 * floor and abs(w[i_pk] - om0) < 0.5 * om0) else om0
    half = floor + 0.5 * (peak - floor)
    above = np.flatnonzero(s > half)
    if above.size >= 2 and peak > 2.0 * floor:
        width = float(w[above[-1]] - w[above[0]])
    else:
        width = effective_linewidth(init)
    dw = float(np.median(np.diff(w)))
    width = max(width, dw)
    h = init.filter.transfer(om)
    im_h = float(np.imag(h))
    g = (width - init.mode.gamma_m) / im_h if abs(im_h) > 1e-12 else init.filter.g_fb
    if not np.isfinite(g) or g <= 0:
        g = max(init.filter.g_fb, 1e-9)
    s_fn = max((peak - floor), floor) * width**2
    return np.array([s_fn, floor, g, 0.0, init.filter.tau_fb, om])


# ---------------------------------------------------------------------------
# fitting


def _is_flat(spec: SpectrumTrace) -> bool:
    s = _smooth(spec.psd, spec.n_avg, 9)
    med = float(np.median(s))
    if med <= 0:
        return True
    spread = (np.max(s) - np.min(s)) / med
    noise = 5.0 / math.sqrt(max(min(spec.n_avg, 1e12), 1.0) * 3.0) if np.isfinite(spec.n_avg) else 1e-9
    return spread < max(noise, 1e-9)


def fit_homodyne_spectrum(spec: SpectrumTrace, init: LoopConfig, *, shot_level: float | None = None,
                          max_nfev: int = 400, starts: str = "both") -> FitResult:
    """Weighted least-squares fit of the closed-loop measured PSD.

    ``spec`` is in displacement units (var = integral S df). A shot-normalised
    spectrum is accepted with ``shot_level`` giving the shot PSD in those units.
    Free parameters: force PSD, imprecision, gain, feed-through, delay and
    resonance. The intrinsic damping is held at ``init.mode.gamma_m``.
    """
    if shot_level is not None:
        spec = spec.scaled(shot_level)
    if spec.freqs.size < 10:
        raise FitConvergenceError("spectrum has fewer than 10 bins")
    if np.any(spec.freqs <= 0):
        spec = SpectrumTrace(spec.freqs[spec.freqs > 0], spec.psd[spec.freqs > 0], spec.n_avg, spec.rbw)
    if np.any(spec.psd <= 0):
        raise FitConvergenceError("spectrum contains empty bins")
    if _is_flat(spec):
        raise FitConvergenceError("spectrum is flat: no resonance to fit")
    w = spec.omega
    weight = math.sqrt(spec.n_avg) if np.isfinite(spec.n_avg) else 1.0
    data = spec.psd

    starts_list = []
    guess = _initial_guess(spec, init)
    if starts in ("both", "guess"):
        starts_list.append(guess)
    if starts in ("both", "config") and init.filter.g_fb > 0:
        from .physics import force_noise_psd

        alt = np.array([force_noise_psd(init.noise, init.mode), init.channel.s_imp, init.filter.g_fb,
                        init.filter.epsilon_fb, init.filter.tau_fb, init.mode.omega_m])
        starts_list.append(alt)
    if not starts_list:
        starts_list.append(guess)

    om0 = init.mode.omega_m
    tau0 = init.filter.tau_fb
    g_ref = max(max(s[2] for s in starts_list), 1e-9)
    # optimiser works on O(1) variables: logs of the PSDs, g / g_ref,
    # feed-through loop gain, delay phase at om0, and omega / om0
    tau_lo, tau_hi = max(0.0, tau0 * om0 - np.pi / 2), tau0 * om0 + np.pi / 2
    s_f_min = 2.0 * init.mode.gamma_m * (1.0 + 1e-9)  # zero-point drive
    lo = np.array([np.log(s_f_min), np.log(1e-6 * guess[1]), 0.0, -0.5, tau_lo, 0.5])
    hi = np.array([np.log(1e6 * max(guess[0], s_f_min)), np.log(1e6 * guess[1]), 1e3, 0.5, tau_hi, 1.5])

    def unpack(q):
        g = q[2] * g_ref
        om = q[5] * om0
        eps = q[3] * om / g if g > 0 else 0.0  # q[3] is the feed-through loop gain g eps / Omega
        return np.array([math.exp(q[0]), math.exp(q[1]), g, eps, q[4] / om0, om])

    def pack(p):
        return np.array([math.log(max(p[0], s_f_min)), math.log(p[1]), p[2] / g_ref,
                         p[2] * p[3] / p[5] if p[2] > 0 else 0.0, p[4] * om0, p[5] / om0])

    def resid(q):
        m = _model(init, unpack(q), w)
        return (data / m - 1.0) * weight

    best = None
    for p0 in starts_list:
        q0 = pack(p0)
        q0 = np.clip(q0, lo + 1e-9 * (hi - lo), hi - 1e-9 * (hi - lo))
        try:
            with np.errstate(all="ignore"):
                res = optimize.least_squares(resid, q0, bounds=(lo, hi), method="trf", x_scale=1.0,
                                             xtol=1e-10, gtol=1e-8, ftol=1e-12, max_nfev=max_nfev)
        except (ValueError, FloatingPointError) as exc:
            raise FitConvergenceError(f"least squares failed: {exc}") from None
        if not np.all(np.isfinite(res.fun)):
            continue
        if best is None or res.cost < best.cost:
            best = res
    if best is None or best.status <= 0:
        raise FitConvergenceError("least squares did not converge within the evaluation budget")

    q = best.x
    at_bound = [PARAM_NAMES[i] for i in np.flatnonzero(best.active_mask) if PARAM_NAMES[i] != "epsilon_fb"]
    if at_bound:
        raise ParameterAtBoundError(f"parameter(s) at bound: {', '.join(at_bound)}", at_bound)

    # covariance in physical parameters
    p = unpack(q)
    jac = _physical_jacobian(lambda pp: (data / _model(init, pp, w) - 1.0) * weight, p)
    norms = np.linalg.norm(jac, axis=0)
    keep = norms > 0
    jn = jac[:, keep] / norms[keep]
    sv = np.linalg.svd(jn, compute_uv=False)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else math.inf
    if not np.isfinite(cond) or cond > 1e12:
        raise IllConditionedFitError(f"Jacobian condition number {cond:.3g} exceeds 1e12", cond)
    n_dof = max(data.size - p.size, 1)
    chi2_red = float(2.0 * best.cost / n_dof)
    cov = np.zeros((p.size, p.size))
    inv = np.linalg.inv(jn.T @ jn) / np.outer(norms[keep], norms[keep])
    cov[np.ix_(keep, keep)] = inv * max(1.0, chi2_red) * spec.corr_factor
    cfg = config_from_params(init, p)
    rms = float(np.sqrt(np.mean((best.fun / weight) ** 2)))
    return FitResult(*p, cfg.mode.gamma_m, cov, rms, cfg, chi2_red, int(best.nfev), cond)


def _physical_jacobian(fun, p, rel=1e-6):
    f0 = fun(p)
    jac = np.empty((f0.size, p.size))
    for i in range(p.size):
        h = rel * abs(p[i]) if p[i] != 0 else 1e-9
        if i == 4:
            h = max(h, 1e-12)
        pp = p.copy()
        pm = p.copy()
        pp[i] += h
        pm[i] -= h
        jac[:, i] = (fun(pp) - fun(pm)) / (2 * h)
    return jac


# ---------------------------------------------------------------------------
# inference


@dataclass
class Occupation:
    n_bar: float
    sigma: float
    s_x: SpectrumTrace
    tail: float = 0.0

    def as_dict(self) -> dict:
        return {"n_bar": self.n_bar, "sigma": self.sigma, "truncation_tail": self.tail}


def occupation_grid(cfg: LoopConfig) -> np.ndarray:
    width = max(effective_linewidth(cfg), cfg.mode.gamma_m)
    return phonon_grid(cfg.mode.omega_m, width, center=effective_resonance(cfg))


def _n_bar(init, p, grid, quiet=True):
    cfg = config_from_params(init, p)
    s_x = inferred_displacement_psd(cfg, grid)
    with warnings.catch_warnings():
        if quiet:
            warnings.simplefilter("ignore", RuntimeWarning)
        return phonon_from_psd(grid, s_x, cfg.mode.omega_m)


def infer_and_count(fit: FitResult, grid=None) -> Occupation:
    """Inferred displacement spectrum and occupation with a linearised 1-sigma error."""
    init = fit.config
    grid = occupation_grid(init) if grid is None else np.asarray(grid, dtype=float)
    p = fit.params
    est = _n_bar(init, p, grid, quiet=False)
    grad = np.zeros(p.size)
    for i in range(p.size):
        h = 1e-5 * abs(p[i]) if p[i] != 0 else 1e-9
        if fit.covariance[i, i] == 0:
            continue
        up = p.copy()
        dn = p.copy()
        up[i] += h
        dn[i] -= h
        grad[i] = (_n_bar(init, up, grid).n_bar - _n_bar(init, dn, grid).n_bar) / (2 * h)
    var = float(grad @ fit.covariance @ grad)
    s_x = SpectrumTrace(grid / TWO_PI, inferred_displacement_psd(fit.config, grid))
    return Occupation(est.n_bar, math.sqrt(max(var, 0.0)), s_x, est.tail)


# ---------------------------------------------------------------------------
# calibration tone


@dataclass
class CalibrationTone:
    phi0: float
    omega_pm: float
    measured_tone_power: float | None = None

    def __post_init__(self):
        if not 0 < self.phi0 < 0.1 * TWO_PI:
            raise ValueError("phi0 must be small and positive")
        if not self.omega_pm > 0:
            raise ValueError("omega_pm must be positive")

    @property
    def peak_deviation(self) -> float:
        """Equivalent peak laser frequency excursion (rad/s)."""
        return self.phi0 * self.omega_pm

    @property
    def equivalent_power(self) -> float:
        """Mean-square frequency excursion (rad/s)^2."""
        return self.peak_deviation**2 / 2.0

    def displacement_amplitude(self, g0: float) -> float:
        """Sine amplitude in X units producing the same cavity-frequency excursion."""
        return self.peak_deviation / (math.sqrt(2.0) * g0)


@dataclass
class Calibration:
    spectrum: SpectrumTrace
    factor: float  # raw units per (rad/s)^2/Hz
    tone_power: float
    snr_db: float


def measure_tone(spec: SpectrumTrace, omega_pm: float, half_bins: int = 4, search_bins: int = 8):
    """Floor-subtracted integrated power of a line near ``omega_pm``; returns (power, snr_db)."""
    f = spec.freqs
    fp = omega_pm / TWO_PI
    if not (f[0] < fp < f[-1]):
        raise ToneNotFoundError(f"tone at {fp:.6g} Hz lies outside the spectrum")
    i0 = int(np.argmin(np.abs(f - fp)))
    lo, hi = max(0, i0 - search_bins), min(f.size, i0 + search_bins + 1)
    seg = spec.psd[lo:hi]
    if not np.all(np.isfinite(seg)):
        raise ToneSaturatedError("tone bins are not finite")
    ip = lo + int(np.argmax(seg))
    peak = spec.psd[ip]
    flat = np.isclose(spec.psd[max(0, ip - 2): ip + 3], peak, rtol=1e-12, atol=0).sum()
    if flat >= 3:
        raise ToneSaturatedError("tone peak is clipped (flat-topped)")
    ring = np.r_[max(0, ip - 60): max(0, ip - 3 * half_bins), min(f.size, ip + 3 * half_bins + 1): min(f.size, ip + 61)]
    if ring.size < 5:
        raise ToneNotFoundError("not enough bins around the tone to estimate the floor")
    floor = float(np.median(spec.psd[ring]))
    snr_db = 10 * math.log10(peak / floor) if floor > 0 else math.inf
    if snr_db < 10.0:
        raise ToneNotFoundError(f"tone only {snr_db:.1f} dB above the floor (need 10 dB)")
    sel = slice(max(0, ip - half_bins), min(f.size, ip + half_bins + 1))
    df = float(np.median(np.diff(f)))
    power = float(np.sum(spec.psd[sel] - floor) * df)
    return power, snr_db


def calibrate_displacement(raw_voltage_psd: SpectrumTrace, tone: CalibrationTone, g0: float,
                           mode: MechanicalMode | None = None) -> Calibration:
    """Map a raw readout PSD to displacement quanta using a known phase-modulation tone.

    The tone's frequency-modulation power ``(phi0 Omega_PM)^2 / 2`` fixes the
    raw-units-per-frequency-noise factor; cavity-frequency noise maps to X by
    ``delta omega_c = sqrt(2) g0 X``. The cavity response is taken flat.
    """
    power, snr = measure_tone(raw_voltage_psd, tone.omega_pm)
    factor = power / tone.equivalent_power
    s_x = raw_voltage_psd.psd / (factor * 2.0 * g0**2)
    out = SpectrumTrace(raw_voltage_psd.freqs.copy(), s_x, raw_voltage_psd.n_avg, raw_voltage_psd.rbw)
    tone.measured_tone_power = power
    return Calibration(out, factor, power, snr)


def fit_report(fit: FitResult, occ: Occupation | None = None) -> dict:
    rep = {"fit": fit.as_dict()}
    if occ is not None:
        rep["occupation"] = occ.as_dict()
    return rep
