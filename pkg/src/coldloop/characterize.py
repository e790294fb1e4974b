"""Device characterisation: ringdown, cavity reflection and optical spring."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .core import OpticalCavity
from .physics import cavity_reflection, spring_curve


class CharacterizationError(ValueError):
    pass


class RingdownFitError(CharacterizationError):
    pass


@dataclass
class RingdownFit:
    gamma_m: float
    q_factor: float
    tau: float
    amplitude: float
    offset: float
    r2: float
    q_sigma: float = 0.0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def synth_ringdown(q_factor: float, omega_m: float, times, kind: str = "amplitude", a0: float = 1.0,
                   noise: float = 0.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Decay envelope; amplitude falls as ``exp(-Gamma t / 2)``, energy as ``exp(-Gamma t)``."""
    gamma = omega_m / q_factor
    rate = gamma / 2 if kind == "amplitude" else gamma
    y = a0 * np.exp(-rate * np.asarray(times, dtype=float))
    if noise and rng is not None:
        y = y + noise * a0 * rng.standard_normal(y.size)
    return y


def fit_ringdown(times, signal, omega_m: float, kind: str = "amplitude", with_offset: bool = False,
                 min_r2: float = 0.9) -> RingdownFit:
    """Exponential fit of a ringdown envelope; ``Q = omega_m / Gamma_M``."""
    if kind not in ("amplitude", "energy"):
        raise ValueError("kind must be 'amplitude' or 'energy'")
    t = np.asarray(times, dtype=float)
    y = np.asarray(signal, dtype=float)
    if t.size < 10 or t.size != y.size:
        raise RingdownFitError("need at least 10 matching samples")
    if np.ptp(y) <= 1e-12 * max(np.max(np.abs(y)), 1e-300):
        raise RingdownFitError("signal does not decay")
    t0 = t[0]
    tt = t - t0
    span = tt[-1]
    # log-linear start from the positive part
    pos = y > 0.05 * np.max(y)
    if pos.sum() >= 3:
        slope = np.polyfit(tt[pos], np.log(y[pos]), 1)[0]
    else:
        slope = -1.0 / span
    if slope >= 0:
        raise RingdownFitError("signal is not decaying")
    tau0 = -1.0 / slope
    a0 = float(y[0])

    def model(x):
        a, log_tau = x[0], x[1]
        off = x[2] if with_offset else 0.0
        return a * np.exp(-tt / math.exp(log_tau)) + off

    x0 = [a0, math.log(tau0)] + ([0.0] if with_offset else [])
    res = optimize.least_squares(lambda x: model(x) - y, x0, x_scale="jac", xtol=1e-15, ftol=1e-15, gtol=1e-15)
    resid = res.fun
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot
    if r2 < min_r2:
        raise RingdownFitError(f"poor exponential fit (R^2 = {r2:.3f})")
    tau = math.exp(res.x[1])
    if span < 0.1 * tau:
        raise RingdownFitError("record spans too little of one decay constant")
    rate = 1.0 / tau
    gamma = 2 * rate if kind == "amplitude" else rate
    # error on log tau from the Jacobian
    dof = max(t.size - len(x0), 1)
    s2 = float(np.sum(resid**2)) / dof
    try:
        cov = np.linalg.inv(res.jac.T @ res.jac) * s2
        q_sigma = float(math.sqrt(max(cov[1, 1], 0.0))) * omega_m / gamma
    except np.linalg.LinAlgError:
        q_sigma = math.nan
    return RingdownFit(gamma, omega_m / gamma, tau, float(res.x[0]), float(res.x[2]) if with_offset else 0.0,
                       r2, q_sigma)


@dataclass
class ReflectionFit:
    kappa: float
    kappa_e: float
    detuning_offset: float
    scale: float

    def cavity(self) -> OpticalCavity:
        return OpticalCavity(self.kappa, self.kappa_e)

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def synth_reflection(cav: OpticalCavity, detuning, scale: float = 1.0, offset: float = 0.0, noise: float = 0.0,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    r = scale * cavity_reflection(cav, np.asarray(detuning, dtype=float) - offset)
    if noise and rng is not None:
        r = r + noise * rng.standard_normal(r.size)
    return r


def fit_reflection(detuning, reflection, overcoupled: bool = True) -> ReflectionFit:
    """Fit ``scale * R(Delta - Delta_0)`` to a detuning scan (rad/s).

    The one-port dip is unchanged under ``kappa_e -> kappa - kappa_e``, so the
    coupling regime must be supplied.
    """
    d = np.asarray(detuning, dtype=float)
    r = np.asarray(reflection, dtype=float)
    if d.size < 10:
        raise CharacterizationError("need at least 10 detuning points")
    scale0 = float(np.percentile(r, 95))
    i = int(np.argmin(r))
    d0 = float(d[i])
    depth = max(min(r[i] / scale0, 0.999), 0.0)
    half = 0.5 * (scale0 + r[i])
    below = np.where(r < half)[0]
    if below.size < 2:
        raise CharacterizationError("no resolvable reflection dip")
    kappa0 = float(d[below[-1]] - d[below[0]])
    frac = 0.5 * (1 + math.sqrt(depth)) if overcoupled else 0.5 * (1 - math.sqrt(depth))
    ds = max(abs(d).max(), kappa0)

    def unpack(x):
        kappa = x[0] * kappa0
        ke = kappa * (0.5 + 0.5 * x[1]) if overcoupled else kappa * 0.5 * (1 - x[1])
        return kappa, ke, x[2] * ds, x[3] * scale0

    def resid(x):
        kappa, ke, off, sc = unpack(x)
        return sc * np.abs(1.0 - ke / (kappa / 2.0 - 1j * (d - off))) ** 2 - r

    x0 = [1.0, abs(2 * frac - 1), d0 / ds, 1.0]
    res = optimize.least_squares(resid, x0, bounds=([0.05, 0.0, -1, 0.1], [20, 1.0, 1, 10]),
                                 x_scale="jac", xtol=1e-14, ftol=1e-14, gtol=1e-14)
    kappa, ke, off, sc = unpack(res.x)
    return ReflectionFit(kappa, ke, off, sc)


@dataclass
class SpringFit:
    g0: float
    g0_sigma: float
    kappa: float
    n_c_resonant: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def synth_spring(detuning, kappa: float, g0: float, n_c_resonant: float, noise: float = 0.0,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    y = spring_curve(detuning, kappa, g0, n_c_resonant)
    if noise and rng is not None:
        y = y + noise * rng.standard_normal(y.size)
    return y


def fit_optical_spring(detuning, shift, kappa: float, n_c_resonant: float) -> SpringFit:
    """g0 from frequency shift vs detuning; the model is linear in ``g0^2``."""
    d = np.asarray(detuning, dtype=float)
    y = np.asarray(shift, dtype=float)
    basis = spring_curve(d, kappa, 1.0, n_c_resonant)
    bb = float(basis @ basis)
    if bb == 0:
        raise CharacterizationError("detuning scan carries no spring signal")
    g2 = float(basis @ y) / bb
    if g2 <= 0:
        raise CharacterizationError("spring shift has the wrong sign for any real g0")
    dof = max(d.size - 1, 1)
    s2 = float(np.sum((y - g2 * basis) ** 2)) / dof
    g2_sigma = math.sqrt(s2 / bb)
    g0 = math.sqrt(g2)
    return SpringFit(g0, 0.5 * g2_sigma / g0, kappa, n_c_resonant)
