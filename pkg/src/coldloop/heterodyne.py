"""Out-of-loop heterodyne spectra and sideband-asymmetry thermometry.

The lower-frequency sideband ("l") is the Stokes line and scales with
``n + 1``; the upper one ("r") scales with ``n``. Each sideband term of the
model lives on its own side of the local-oscillator shift. Sideband terms are
``k_j Gamma_eff |chi_eff|^2`` so that ``k_j`` is proportional to the sideband
area (``pi k_j / 2`` in rad/s) and does not change when feedback broadens the
line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize
from scipy.constants import c as c_light, hbar
from scipy.ndimage import median_filter

from .core import TWO_PI, LoopConfig, OpticalCavity, SpectrumTrace
from .physics import analytic_occupation, effective_linewidth, effective_resonance


class HeterodyneError(ValueError):
    """Base class for sideband-analysis failures."""


class SidebandNotFoundError(HeterodyneError):
    pass


class OverlappingSidebandsError(HeterodyneError):
    pass


class AsymmetrySaturationError(HeterodyneError):
    pass


class FloorMismatchError(HeterodyneError):
    pass


class SidebandFitError(HeterodyneError):
    pass


OVERLAP_LIMIT = 0.5  # largest gamma_eff / sideband separation that can be fitted


@dataclass
class HeterodyneFit:
    omega_het: float
    k_l: float
    k_r: float
    n_l: float
    n_r: float
    omega_eff: float
    gamma_eff: float
    covariance: np.ndarray | None = None  # order: k_l, k_r, n_l, n_r, omega_eff, gamma_eff, omega_het
    chi2_red: float = 1.0

    def __post_init__(self):
        if self.k_l < 0 or self.k_r < 0:
            raise ValueError("sideband magnitudes must be non-negative")
        if self.n_l < 0 or self.n_r < 0:
            raise ValueError("noise floors must be non-negative")
        if not self.gamma_eff > 0:
            raise ValueError("gamma_eff must be positive")

    @classmethod
    def for_occupation(cls, n_bar: float, k_unit: float, omega_het: float, omega_eff: float, gamma_eff: float,
                       n_l: float = 1.0, n_r: float = 1.0) -> "HeterodyneFit":
        """Sideband pair for occupation ``n_bar``; ``k_unit`` is the one-phonon magnitude."""
        if n_bar < 0:
            raise ValueError("n_bar must be non-negative")
        return cls(omega_het, k_unit * (n_bar + 1.0), k_unit * n_bar, n_l, n_r, omega_eff, gamma_eff)

    @property
    def k_diff(self) -> float:
        return self.k_l - self.k_r

    @property
    def k_diff_sigma(self) -> float:
        if self.covariance is None:
            return 0.0
        c = self.covariance
        return float(math.sqrt(max(c[0, 0] + c[1, 1] - 2 * c[0, 1], 0.0)))

    @property
    def separation(self) -> float:
        return 2.0 * self.omega_eff

    @property
    def errors(self) -> np.ndarray:
        if self.covariance is None:
            return np.zeros(7)
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))

    def as_dict(self) -> dict:
        e = self.errors
        names = ("k_l", "k_r", "n_l", "n_r", "omega_eff", "gamma_eff", "omega_het")
        out = {n: {"value": float(getattr(self, n)), "sigma": float(s)} for n, s in zip(names, e)}
        out["chi2_red"] = self.chi2_red
        return out


def eff_susceptibility_sq(omega_eff: float, gamma_eff: float, w):
    return omega_eff**2 / ((omega_eff**2 - w**2) ** 2 + (gamma_eff * w) ** 2)


def sideband_model(omega, het: HeterodyneFit):
    """``k_j Gamma_eff |chi_eff(omega_j)|^2 + n_j`` on each side of ``omega_het``."""
    omega = np.asarray(omega, dtype=float)
    w_l = het.omega_het - omega
    left = w_l > 0
    out = np.where(left, het.n_l, het.n_r).astype(float)
    out[left] += het.k_l * het.gamma_eff * eff_susceptibility_sq(het.omega_eff, het.gamma_eff, w_l[left])
    right = ~left
    out[right] += het.k_r * het.gamma_eff * eff_susceptibility_sq(het.omega_eff, het.gamma_eff, -w_l[right])
    return out


def synth_heterodyne_psd(n_bar: float, het: HeterodyneFit, freqs, n_avg: float = np.inf,
                         rng: np.random.Generator | None = None) -> SpectrumTrace:
    """Sideband spectrum for occupation ``n_bar`` with the one-phonon scale ``het.k_diff``.

    With finite ``n_avg`` and an ``rng``, each bin is multiplied by an
    averaged-periodogram noise factor (gamma with shape ``n_avg``).
    """
    freqs = np.asarray(freqs, dtype=float)
    pair = HeterodyneFit.for_occupation(n_bar, het.k_diff, het.omega_het, het.omega_eff, het.gamma_eff,
                                        het.n_l, het.n_r)
    psd = sideband_model(TWO_PI * freqs, pair)
    if np.isfinite(n_avg) and rng is not None:
        psd = psd * rng.gamma(n_avg, 1.0 / n_avg, psd.size)
    df = float(np.median(np.diff(freqs))) if freqs.size > 1 else 0.0
    return SpectrumTrace(freqs, psd, n_avg, df)


def sideband_grid(het: HeterodyneFit, half_widths: float = 40.0, bins_per_width: float = 10.0) -> np.ndarray:
    """Frequency grid (Hz) covering both sidebands, kept inside (0, 2 f_het)."""
    f_het = het.omega_het / TWO_PI
    fm = het.omega_eff / TWO_PI
    gw = het.gamma_eff / TWO_PI
    lo = max(f_het - fm - half_widths * gw, 0.05 * f_het)
    hi = min(f_het + fm + half_widths * gw, 1.95 * f_het)
    return np.arange(lo, hi, gw / bins_per_width)


def probe_measurement_rate(cfg: LoopConfig, eta_het: float) -> float:
    c = cfg.coupling
    return 4.0 * eta_het * c.n_c_probe * c.g0**2 / cfg.cavity.kappa


def heterodyne_from_loop(cfg: LoopConfig, omega_het: float, eta_het: float = 0.3,
                         n_floor: float = 1.0) -> tuple[float, HeterodyneFit]:
    """Sideband parameters seen by the out-of-loop probe for a given loop state.

    Width and centre come from the analytic closed loop; the one-phonon
    magnitude is ``2 Gamma_meas,probe``.
    """
    n_bar = analytic_occupation(cfg)
    g_eff = effective_linewidth(cfg)
    rate = probe_measurement_rate(cfg, eta_het)
    if rate <= 0:
        raise ValueError("no probe photons: heterodyne sidebands vanish")
    k_unit = 2.0 * rate
    het = HeterodyneFit.for_occupation(n_bar, k_unit, omega_het, effective_resonance(cfg), g_eff, n_floor, n_floor)
    return n_bar, het


# ---------------------------------------------------------------------------
# extraction


def asymmetry_occupation(a_l: float, a_r: float) -> float:
    """``(1/2) |a_l + a_r| / |a_l - a_r| - 1/2``."""
    d = abs(a_l - a_r)
    if d == 0 or d <= 1e-15 * (abs(a_l) + abs(a_r)):
        raise AsymmetrySaturationError("sidebands are equal: occupation is unbounded")
    return 0.5 * abs(a_l + a_r) / d - 0.5


def phonon_from_sideband_fit(fit: HeterodyneFit) -> float:
    return asymmetry_occupation(fit.k_l, fit.k_r)


def phonon_from_sideband_fit_sigma(fit: HeterodyneFit) -> float:
    """Linearised 1-sigma error on the fit-based occupation."""
    if fit.covariance is None:
        return 0.0
    kl, kr = fit.k_l, fit.k_r
    d = kl - kr
    # n = (kl + kr) / (2 |d|) - 1/2
    s = np.sign(d)
    g_l = (s * d - (kl + kr)) / (2 * d * d) * s
    g_r = (s * d + (kl + kr)) / (2 * d * d) * s
    grad = np.array([g_l, g_r])
    return float(math.sqrt(max(grad @ fit.covariance[:2, :2] @ grad, 0.0)))


def _smooth(psd, n_avg):
    if not np.isfinite(n_avg):
        return psd
    w = int(min(max(3, 400 // max(int(n_avg), 1)), 31)) | 1
    return median_filter(psd, size=w, mode="nearest")


def _half_peak(w, s, floor):
    i = int(np.argmax(s))
    pk = s[i]
    half = floor + 0.5 * (pk - floor)
    j0 = i
    while j0 > 0 and s[j0] > half:
        j0 -= 1
    j1 = i
    while j1 < s.size - 1 and s[j1] > half:
        j1 += 1
    return float(w[i]), float(pk), float(w[j1] - w[j0])


def fit_sidebands(spec: SpectrumTrace, omega_het_guess: float, *, max_nfev: int = 2000) -> HeterodyneFit:
    """Least-squares fit of the two-sideband model around ``omega_het_guess``."""
    w = spec.omega
    if w.size < 20:
        raise SidebandFitError("spectrum has fewer than 20 bins")
    if np.any(spec.psd <= 0):
        raise SidebandFitError("spectrum contains empty bins")
    s = _smooth(spec.psd, spec.n_avg)
    left = w < omega_het_guess
    if left.sum() < 5 or (~left).sum() < 5:
        raise SidebandNotFoundError("omega_het_guess does not split the spectrum into two sides")
    floor_l = float(np.percentile(s[left], 20))
    floor_r = float(np.percentile(s[~left], 20))
    wl, pk_l, width_l = _half_peak(w[left], s[left], floor_l)
    thresh = 1.0 + max(0.03, 5.0 / math.sqrt(spec.n_avg)) if np.isfinite(spec.n_avg) else 1.03
    if pk_l < thresh * floor_l:
        raise SidebandNotFoundError(f"Stokes sideband only {10 * math.log10(pk_l / floor_l):.1f} dB above floor")
    wr, pk_r, _ = _half_peak(w[~left], s[~left], floor_r)
    dw = float(np.median(np.diff(w)))
    if pk_r > thresh * floor_r:
        om_het0 = 0.5 * (wl + wr)
    else:
        om_het0 = omega_het_guess  # anti-Stokes too weak to locate; use the guess
    om_eff0 = om_het0 - wl
    gam0 = max(width_l, 2 * dw)
    if gam0 > OVERLAP_LIMIT * 2.0 * om_eff0:
        raise OverlappingSidebandsError(
            f"linewidth {gam0 / TWO_PI:.4g} Hz exceeds {OVERLAP_LIMIT} x sideband separation")
    k_l0 = max(pk_l - floor_l, floor_l) * gam0
    k_r0 = max(pk_r - floor_r, 0.0) * gam0

    # O(1) variables
    kref = k_l0
    x0 = np.array([1.0, k_r0 / kref, floor_l, floor_r, om_eff0 / om_eff0, math.log(gam0), om_het0 / om_het0])
    lo = np.array([0.0, 0.0, 0.0, 0.0, 0.5, math.log(dw * 1e-3), 0.9])
    hi = np.array([1e3, 1e3, np.inf, np.inf, 1.5, math.log(2.0 * om_eff0), 1.1])
    x0 = np.clip(x0, lo, hi)

    def unpack(x):
        return HeterodyneFit(om_het0 * x[6], kref * x[0], kref * x[1], x[2], x[3], om_eff0 * x[4], math.exp(x[5]))

    weight = math.sqrt(spec.n_avg) if np.isfinite(spec.n_avg) else 1.0

    def resid(x):
        return (spec.psd / sideband_model(w, unpack(x)) - 1.0) * weight

    res = optimize.least_squares(resid, x0, bounds=(lo, hi), method="trf", x_scale="jac",
                                 xtol=1e-12, ftol=1e-12, gtol=1e-10, max_nfev=max_nfev)
    if res.status <= 0:
        raise SidebandFitError("sideband fit did not converge")
    fit = unpack(res.x)
    if fit.gamma_eff > OVERLAP_LIMIT * fit.separation:
        raise OverlappingSidebandsError(
            f"fitted linewidth {fit.gamma_eff / TWO_PI:.4g} Hz exceeds {OVERLAP_LIMIT} x sideband separation")
    if fit.n_l < 1e-12 or fit.n_r < 1e-12:
        raise FloorMismatchError("fitted noise floor collapsed to zero")

    # covariance of (k_l, k_r, n_l, n_r, omega_eff, gamma_eff, omega_het)
    n_dof = max(w.size - 7, 1)
    chi2 = float(2 * res.cost / n_dof)
    if not np.isfinite(spec.n_avg):
        return replace(fit, chi2_red=chi2)
    try:
        cov_x = np.linalg.pinv(res.jac.T @ res.jac) * max(1.0, chi2) * spec.corr_factor
        d = np.array([kref, kref, 1.0, 1.0, om_eff0, fit.gamma_eff, om_het0])  # dp/dx
        cov = cov_x * np.outer(d, d)
    except np.linalg.LinAlgError:
        cov = None
    return replace(fit, covariance=cov, chi2_red=chi2)


def band_sums(spec: SpectrumTrace, band_hz, omega_het: float, floors) -> tuple[tuple[float, float], tuple[float, float]]:
    """Floor-subtracted power of each sideband over a mechanical-frequency band.

    Returns ``((s_l, s_r), (sigma_l, sigma_r))``.
    """
    f_lo, f_hi = band_hz
    f_het = omega_het / TWO_PI
    f = spec.freqs
    df = float(np.median(np.diff(f)))
    out = []
    for side, floor in zip((-1, 1), floors):
        mech = side * (f - f_het)
        sel = (mech >= f_lo) & (mech <= f_hi)
        if sel.sum() == 0:
            raise HeterodyneError("integration band contains no bins")
        val = float(np.sum(spec.psd[sel] - floor) * df)
        if np.isfinite(spec.n_avg):
            sig = float(math.sqrt(np.sum(spec.psd[sel] ** 2) / spec.n_avg * spec.corr_factor) * df)
        else:
            sig = 0.0
        out.append((val, sig))
    return (out[0][0], out[1][0]), (out[0][1], out[1][1])


def phonon_from_band_integration(spec: SpectrumTrace, band_hz, floors=None, omega_het: float | None = None,
                                 fit: HeterodyneFit | None = None, n_sigma: float = 3.0) -> float:
    """Occupation from direct band sums with the floors (and LO shift) from a fit."""
    if fit is not None:
        floors = (fit.n_l, fit.n_r) if floors is None else floors
        omega_het = fit.omega_het if omega_het is None else omega_het
    if floors is None or omega_het is None:
        raise ValueError("give floors and omega_het, or a sideband fit")
    (s_l, s_r), (e_l, e_r) = band_sums(spec, band_hz, omega_het, floors)
    for name, s, e in (("Stokes", s_l, e_l), ("anti-Stokes", s_r, e_r)):
        if s < -n_sigma * e:
            raise FloorMismatchError(f"{name} band sum {s:.4g} is negative beyond {n_sigma} sigma ({e:.3g})")
    return asymmetry_occupation(max(s_l, 0.0), max(s_r, 0.0))


def captured_fraction(band_hz, center_hz: float, gamma_hz: float) -> float:
    """Share of a Lorentzian (FWHM ``gamma_hz``) inside ``band_hz``.

    Reduces to ``(2/pi) arctan(2B/gamma)`` for a band of half-width B centred
    on the line.
    """
    f_lo, f_hi = band_hz
    return float((math.atan(2 * (f_hi - center_hz) / gamma_hz) - math.atan(2 * (f_lo - center_hz) / gamma_hz)) / math.pi)


# ---------------------------------------------------------------------------
# classical laser noise


@dataclass
class LaserNoise:
    c_amp: float = 0.0
    c_theta: float = 0.0
    c_y: float = 0.0
    photon_flux: float = 0.0

    def __post_init__(self):
        for k in ("c_amp", "c_theta", "c_y", "photon_flux"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")

    @classmethod
    def from_phase_noise(cls, c_theta: float, power_w: float, wavelength_m: float = 1550e-9,
                         c_amp: float = 0.0) -> "LaserNoise":
        flux = photon_flux(power_w, wavelength_m)
        return cls(c_amp, c_theta, phase_quadrature_noise(c_theta, flux), flux)


def photon_flux(power_w: float, wavelength_m: float = 1550e-9) -> float:
    return power_w / (hbar * TWO_PI * c_light / wavelength_m)


def phase_quadrature_noise(c_theta: float, flux: float) -> float:
    """Shot-normalised phase-quadrature noise ``C_Y = 2 n C_theta``."""
    return 2.0 * flux * c_theta


def phase_noise_correction(noise: LaserNoise, cavity: OpticalCavity, delta_omega: float, omega_m: float) -> float:
    """Spurious occupation added to both sidebands by classical phase noise.

    ``4 (delta_omega * Omega_M / kappa^2) C_Y`` with ``delta_omega`` the probe
    detuning. The extra ``Omega_M`` makes the printed ``delta_omega / kappa^2``
    dimensionless; this is the only place the reading is encoded.
    """
    return 4.0 * abs(delta_omega) * omega_m / cavity.kappa**2 * noise.c_y


def apply_phase_noise_correction(fit: HeterodyneFit, correction: float) -> HeterodyneFit:
    """Remove ``correction`` phonons of common-mode power from both sidebands."""
    common = correction * abs(fit.k_diff)
    return replace(fit, k_l=max(fit.k_l - common, 0.0), k_r=max(fit.k_r - common, 0.0))


def estimate_amplitude_noise(spec_full: SpectrumTrace, spec_balanced: SpectrumTrace, spec_dark: SpectrumTrace,
                             band_hz=None) -> float:
    """Classical amplitude noise relative to shot noise from 100:0, 50:50 and dark spectra."""
    for s in (spec_balanced, spec_dark):
        if s.freqs.shape != spec_full.freqs.shape or not np.allclose(s.freqs, spec_full.freqs):
            raise ValueError("spectra must share one frequency grid")
    sel = np.ones(spec_full.freqs.size, bool)
    if band_hz is not None:
        sel = (spec_full.freqs >= band_hz[0]) & (spec_full.freqs <= band_hz[1])
    shot = spec_balanced.psd[sel] - spec_dark.psd[sel]
    if np.any(shot <= 0):
        raise ValueError("shot reference (balanced minus dark) is not positive")
    full = spec_full.psd[sel] - spec_dark.psd[sel]
    return float(np.mean((full - shot) / shot))


def synth_amplitude_noise_spectra(freqs, c_amp: float, shot: float = 1.0, electronic: float = 0.1,
                                  n_avg: float = np.inf, rng: np.random.Generator | None = None):
    """(full, balanced, dark) spectra with classical noise ``c_amp * shot`` on the unbalanced port."""
    freqs = np.asarray(freqs, dtype=float)
    base = {"full": shot * (1.0 + c_amp) + electronic, "balanced": shot + electronic, "dark": electronic}
    out = []
    for k in ("full", "balanced", "dark"):
        psd = np.full(freqs.size, base[k])
        if np.isfinite(n_avg) and rng is not None:
            psd = psd * rng.gamma(n_avg, 1.0 / n_avg, psd.size)
        out.append(SpectrumTrace(freqs, psd, n_avg))
    return tuple(out)


@dataclass
class HeterodyneReport:
    n_fit: float
    n_fit_sigma: float
    n_int: float | None
    k_diff: float
    band_hz: tuple[float, float] | None
    captured: float | None
    correction: float = 0.0
    fit: HeterodyneFit | None = None
    errors: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"n_fit": self.n_fit, "n_fit_sigma": self.n_fit_sigma, "n_int": self.n_int,
                "k_diff": self.k_diff, "band_hz": list(self.band_hz) if self.band_hz else None,
                "captured_fraction": self.captured, "phase_noise_correction": self.correction,
                "fit": self.fit.as_dict() if self.fit else None, "errors": self.errors}


def analyze_heterodyne(spec: SpectrumTrace, omega_het_guess: float, band_hz=None,
                       correction: float = 0.0) -> HeterodyneReport:
    """Run both extractors; failures of one method are reported, not raised."""
    errors = {}
    fit = None
    n_fit = n_sig = math.nan
    try:
        fit = fit_sidebands(spec, omega_het_guess)
        if correction:
            fit = apply_phase_noise_correction(fit, correction)
        n_fit = phonon_from_sideband_fit(fit)
        n_sig = phonon_from_sideband_fit_sigma(fit)
    except HeterodyneError as exc:
        errors["fit"] = f"{type(exc).__name__}: {exc}"
    n_int = None
    captured = None
    if band_hz is not None and fit is not None:
        try:
            n_int = phonon_from_band_integration(spec, band_hz, fit=fit)
            captured = captured_fraction(band_hz, fit.omega_eff / TWO_PI, fit.gamma_eff / TWO_PI)
        except HeterodyneError as exc:
            errors["integration"] = f"{type(exc).__name__}: {exc}"
    return HeterodyneReport(n_fit, n_sig, n_int, fit.k_diff if fit else math.nan,
                            tuple(band_hz) if band_hz is not None else None, captured, correction, fit, errors)
