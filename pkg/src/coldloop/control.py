"""Feedback filter evaluation, stability analysis, filter design and gain tuning."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .core import FeedbackFilter, FilterSection, LoopConfig, MechanicalMode
from .physics import analytic_occupation, loop_denominator, plant_susceptibility

log = logging.getLogger(__name__)


class DesignInfeasibleError(RuntimeError):
    def __init__(self, message, mode: MechanicalMode | None = None):
        super().__init__(message)
        self.mode = mode


def filter_response(filt: FeedbackFilter, omega) -> np.ndarray:
    """Gain times section product times ``exp(i omega tau)``."""
    return filt.g_fb * filt.transfer(omega)


def mode_damping_delta(filt: FeedbackFilter, g_fb: float, mode: MechanicalMode) -> float:
    """Feedback damping added to ``mode`` (rad/s); positive means cooling."""
    return float(g_fb * mode.weight * np.imag(filt.transfer(mode.omega_m)))


def _wrap(phi):
    return (np.asarray(phi) + np.pi) % (2 * np.pi) - np.pi


# ---------------------------------------------------------------------------
# stability


@dataclass
class ModeMargin:
    freq_hz: float
    damping_delta: float
    phase: float
    phase_margin: float


@dataclass
class StabilityReport:
    stable: bool
    winding: int
    gain_margin: float
    modes: list[ModeMargin] = field(default_factory=list)
    n_points: int = 0
    notes: list[str] = field(default_factory=list)

    def summary(self) -> str:
        worst = min((m.phase_margin for m in self.modes), default=math.inf)
        return (f"stable={self.stable} winding={self.winding} "
                f"gain_margin={self.gain_margin:.3g} worst_phase_margin={worst:.3g}")

    def as_dict(self) -> dict:
        return {
            "stable": self.stable,
            "winding": self.winding,
            "gain_margin": self.gain_margin,
            "modes": [m.__dict__ for m in self.modes],
            "n_points": self.n_points,
            "notes": list(self.notes),
        }


def _base_grid(cfg: LoopConfig, w_hi: float) -> np.ndarray:
    modes = cfg.modes
    w_lo = 1e-4 * modes[0].omega_m
    parts = [np.geomspace(w_lo, w_hi, 4000)]
    tau = cfg.filter.tau_fb
    if tau > 0:
        parts.append(np.linspace(w_lo, w_hi, int(math.ceil(w_hi * tau * 10 / np.pi)) + 2))
    u = np.linspace(-1, 1, 1201)
    for m in modes:
        half = 0.5 * m.omega_m
        a = np.arcsinh(half / (0.05 * m.gamma_m))
        parts.append(m.omega_m + 0.05 * m.gamma_m * np.sinh(a * u))
    grid = np.unique(np.concatenate(parts))
    return grid[(grid > 0) & (grid <= w_hi)]


def check_closed_loop_stability(cfg: LoopConfig, max_refine: int = 40) -> StabilityReport:
    """Nyquist winding of ``1 - g (chi + eps) H`` about the origin.

    The open loop has no right-half-plane poles, so any net encirclement
    signals an unstable closed loop.
    """
    f = cfg.filter
    mode_rep = []
    for m in cfg.modes:
        dg = mode_damping_delta(f, f.g_fb, m)
        phi = float(np.angle(f.g_fb * f.transfer(m.omega_m))) if f.g_fb != 0 else 0.0
        pm = min(phi, np.pi - phi) if f.g_fb != 0 else math.inf
        mode_rep.append(ModeMargin(m.freq_hz, dg, phi, pm))
    if f.g_fb == 0:
        return StabilityReport(True, 0, math.inf, mode_rep)

    notes = []
    w_hi = 50.0 * max(m.omega_m for m in cfg.modes)
    # neutral-type delay loop: the eps path alone must have loop gain < 1
    tail = abs(f.g_fb * f.epsilon_fb / cfg.mode.omega_m * f.shaping(w_hi))
    if tail >= 1.0:
        notes.append(f"feed-through loop gain {tail:.3g} >= 1 at high frequency")
        return StabilityReport(False, 0, 0.0, mode_rep, 0, notes)

    w = _base_grid(cfg, w_hi)
    d = loop_denominator(cfg, w)
    for _ in range(max_refine):
        step = np.abs(np.angle(d[1:] / d[:-1]))
        bad = np.nonzero(step > np.pi / 4)[0]
        if bad.size == 0:
            break
        mid = 0.5 * (w[bad] + w[bad + 1])
        w = np.insert(w, bad + 1, mid)
        d = np.insert(d, bad + 1, loop_denominator(cfg, mid))
    else:
        notes.append("phase refinement did not converge; winding may be unreliable")
        warnings.warn(notes[-1], RuntimeWarning, stacklevel=2)
    if f.tau_fb > 0 and np.max(np.diff(w)) * f.tau_fb > np.pi / 10:
        notes.append("delay phase advances more than pi/10 per grid step")
        warnings.warn(notes[-1], RuntimeWarning, stacklevel=2)

    d0 = loop_denominator(cfg, np.array([0.0]))[0]
    dphi = np.angle(d[1:] / d[:-1])
    total = np.angle(d[0] / d0) + dphi.sum()
    winding_f = 2.0 * total / (2 * np.pi)
    winding = int(round(winding_f))
    if abs(winding_f - winding) > 0.25:
        notes.append(f"non-integer winding {winding_f:.3f}")

    # gain margin: positive-real crossings of the open-loop response
    loop = 1.0 - d
    im = loop.imag
    idx = np.nonzero((np.sign(im[:-1]) != np.sign(im[1:])) & (loop.real[:-1] > 0))[0]
    margins = []
    for i in idx:
        t = im[i] / (im[i] - im[i + 1])
        re = loop.real[i] + t * (loop.real[i + 1] - loop.real[i])
        if re > 0:
            margins.append(1.0 / re)
    above = [k for k in margins if k > 1.0]
    gain_margin = min(above) if above else math.inf
    stable = winding == 0
    return StabilityReport(stable, winding, gain_margin, mode_rep, int(w.size), notes)


# ---------------------------------------------------------------------------
# filter design


@dataclass
class DesignSpec:
    target_mode: MechanicalMode
    protected_modes: tuple[MechanicalMode, ...] = ()
    total_delay: float = 0.0
    gain_range: tuple[float, float] = (1.0, 1e6)
    phase_target: float = np.pi / 2
    slack: float = 0.0  # allowed negative sin(phase) at protected modes
    max_sections: int = 4

    def __post_init__(self):
        self.protected_modes = tuple(self.protected_modes)
        if not self.gain_range[0] < self.gain_range[1]:
            raise ValueError("gain_range must be increasing")
        if self.total_delay < 0:
            raise ValueError("delay must be non-negative")
        for m in self.protected_modes:
            if abs(m.omega_m - self.target_mode.omega_m) < 1e-9 * self.target_mode.omega_m:
                raise ValueError("protected mode coincides with target")


_PHASE_TOL = 0.05


def _build_sections(p, sign, omega_t):
    secs = [FilterSection.resonator(omega_t * math.exp(p[0]), math.exp(p[1]), sign)]
    for k in range((len(p) - 2) // 2):
        secs.append(FilterSection.allpass2(omega_t * math.exp(p[2 + 2 * k]), math.exp(p[3 + 2 * k])))
    return secs


def _normalised(secs, omega_t, tau, g_fb):
    filt = FeedbackFilter(tuple(secs), g_fb, tau)
    scale = 1.0 / abs(filt.shaping(omega_t))
    first = secs[0]
    secs = [FilterSection(tuple(scale * b for b in first.b), first.a)] + list(secs[1:])
    return FeedbackFilter(tuple(secs), g_fb, tau)


def design_filter(spec: DesignSpec, seed: int = 0) -> FeedbackFilter:
    """Resonator plus all-pass cascade with the target phase and no heated modes.

    Tries 0, 1, ... all-pass stages after a single resonant stage and returns the
    first feasible design; ties are broken by the smallest off-target gain.
    """
    om_t = spec.target_mode.omega_m
    tau = spec.total_delay
    prot = spec.protected_modes
    w_prot = np.array([m.omega_m for m in prot])
    wts = np.array([max(m.weight, 1e-12) for m in prot])
    g_nom = math.sqrt(spec.gain_range[0] * spec.gain_range[1])
    rng = np.random.default_rng(seed)

    def phases(p, sign):
        secs = _build_sections(p, sign, om_t)
        f = FeedbackFilter(tuple(secs), 1.0, tau)
        w = np.concatenate([[om_t], w_prot])
        h = f.transfer(w)
        return h

    def objective(p, sign):
        h = phases(p, sign)
        e_t = _wrap(np.angle(h[0]) - spec.phase_target)
        J = (e_t / 0.01) ** 2
        if w_prot.size:
            s = np.sin(np.angle(h[1:]))
            viol = np.maximum(0.0, 0.1 - s)
            J += np.sum((viol / 0.01) ** 2) + 1e-2 * np.sum(wts * np.abs(h[1:])) / abs(h[0])
        return float(J)

    def feasible(p, sign):
        h = phases(p, sign)
        if abs(_wrap(np.angle(h[0]) - spec.phase_target)) > _PHASE_TOL:
            return False, None
        if w_prot.size:
            s = np.sin(np.angle(h[1:]))
            if np.any(s < -spec.slack):
                return False, prot[int(np.argmin(s))]
        return True, None

    worst = None
    for n_ap in range(spec.max_sections):
        lo = [math.log(0.5), math.log(0.7)] + [math.log(0.2), math.log(0.3)] * n_ap
        hi = [math.log(2.0), math.log(5.0)] + [math.log(10.0), math.log(5.0)] * n_ap
        best = None
        n_starts = 12 if n_ap == 0 else 40
        for sign in (1.0, -1.0):
            for i in range(n_starts):
                if i == 0:
                    x0 = np.array([0.0, math.log(2.0)] + [0.0, 0.0] * n_ap)
                else:
                    x0 = rng.uniform(lo, hi)
                res = optimize.minimize(objective, x0, args=(sign,), method="Nelder-Mead",
                                        bounds=list(zip(lo, hi)),
                                        options={"xatol": 1e-6, "fatol": 1e-9, "maxiter": 4000})
                ok, bad = feasible(res.x, sign)
                if ok and (best is None or res.fun < best[0]):
                    best = (res.fun, res.x, sign)
                elif not ok and bad is not None:
                    worst = bad
        if best is not None:
            secs = _build_sections(best[1], best[2], om_t)
            filt = _normalised(secs, om_t, tau, g_nom)
            log.info("filter design feasible with %d all-pass stage(s)", n_ap)
            return filt
    raise DesignInfeasibleError(
        f"no feasible design within {spec.max_sections} sections"
        + (f"; mode at {worst.freq_hz:.4g} Hz is heated" if worst is not None else ""), worst)


def design_report(filt: FeedbackFilter, spec: DesignSpec) -> dict:
    rows = []
    for m in (spec.target_mode,) + spec.protected_modes:
        h = filt.transfer(m.omega_m)
        rows.append({
            "freq_hz": m.freq_hz,
            "phase_rad": float(np.angle(h)),
            "gain_abs": float(abs(h)),
            "damping_delta_per_gain": mode_damping_delta(filt, 1.0, m),
        })
    return {"modes": rows, "n_sections": len(filt.sections), "tau_fb_s": filt.tau_fb}


# ---------------------------------------------------------------------------
# gain optimisation


@dataclass
class GainOptimum:
    g_opt: float
    n_min: float
    gains: np.ndarray
    n_bars: np.ndarray
    boundary: bool

    def as_dict(self) -> dict:
        return {"g_opt": self.g_opt, "n_min": self.n_min, "boundary": self.boundary,
                "gains": self.gains.tolist(), "n_bars": self.n_bars.tolist()}


def occupation_at_gain(cfg: LoopConfig, g: float, check: bool = True) -> float:
    c = cfg.with_gain(g)
    if check and g != 0 and not check_closed_loop_stability(c).stable:
        return math.inf
    return analytic_occupation(c)


def optimize_gain(cfg: LoopConfig, g_range: tuple[float, float], n_scan: int = 41,
                  check: bool = True) -> GainOptimum:
    """Log-spaced scan of the occupation followed by golden-section refinement."""
    g_lo, g_hi = g_range
    if not 0 < g_lo < g_hi:
        raise ValueError("g_range must be positive and increasing")
    gains = np.geomspace(g_lo, g_hi, n_scan)
    n_bars = np.array([occupation_at_gain(cfg, g, check) for g in gains])
    i = int(np.argmin(n_bars))
    if i == 0 or i == n_scan - 1:
        log.warning("occupation is monotone over the gain range; returning boundary optimum")
        return GainOptimum(float(gains[i]), float(n_bars[i]), gains, n_bars, True)

    def f(lg):
        return occupation_at_gain(cfg, math.exp(lg), check=False)

    a, b, c = np.log(gains[i - 1]), np.log(gains[i]), np.log(gains[i + 1])
    res = optimize.minimize_scalar(f, bracket=(a, b, c), method="golden", tol=1e-6)
    g_opt = float(np.exp(res.x))
    n_min = float(res.fun)
    if n_min > n_bars[i]:
        g_opt, n_min = float(gains[i]), float(n_bars[i])
    return GainOptimum(g_opt, n_min, gains, n_bars, False)


def max_stable_gain(cfg: LoopConfig, g_start: float, factor: float = 1e3, rel_tol: float = 1e-4) -> float:
    """Largest gain on ``[g_start, factor * g_start]`` that the stability check accepts (bisection in log g)."""
    lo, hi = g_start, g_start * factor
    if not check_closed_loop_stability(cfg.with_gain(lo)).stable:
        raise ValueError("loop is already unstable at g_start")
    if check_closed_loop_stability(cfg.with_gain(hi)).stable:
        return hi
    while hi / lo > 1 + rel_tol:
        mid = math.sqrt(lo * hi)
        if check_closed_loop_stability(cfg.with_gain(mid)).stable:
            lo = mid
        else:
            hi = mid
    return lo
