"""Time-domain simulation of the delayed measurement-feedback loop.

Each mechanical mode is propagated exactly over a step: the thermal force is
integrated through its known covariance and the control force is taken as
piecewise linear between samples. The feedback filter is the bilinear
(prewarped) discretisation of the analog cascade, and the loop delay is an
integer number of samples.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import linalg, signal

from .core import TWO_PI, LoopConfig, LoopInstabilityError, SpectrumTrace
from .physics import effective_linewidth, force_noise_psd, higher_mode_occupation
from .spectra import TimeTrace, WelchAccumulator

log = logging.getLogger(__name__)

CHUNK = 1 << 18


@dataclass
class SimRun:
    seed: int
    duration: float
    dt: float
    traces: dict[str, TimeTrace]
    config_snapshot: LoopConfig
    delay_samples: int = 0
    spectra: dict[str, SpectrumTrace] = field(default_factory=dict)


@dataclass(frozen=True)
class ToneSpec:
    """Additive sinusoid in the measured signal (displacement units)."""

    amplitude: float
    omega: float


def default_dt(cfg: LoopConfig, samples_per_period: int = 64) -> float:
    dt = 1.0 / (samples_per_period * cfg.mode.freq_hz)
    tau = cfg.filter.tau_fb
    if tau > 0:
        dt = tau / math.ceil(tau / dt)
    return dt


def default_duration(cfg: LoopConfig) -> float:
    return 2000.0 / max(effective_linewidth(cfg), cfg.mode.gamma_m)


def _mode_propagators(omega, gamma, drive, q, dt):
    """Exact step matrices for x'' + gamma x' + omega^2 x = drive * (u(t) + noise)."""
    a = np.array([[0.0, 1.0], [-omega**2, -gamma]])
    b = np.array([0.0, drive])
    m = np.zeros((4, 4))
    m[:2, :2] = a
    m[:2, 2] = b
    m[2, 3] = 1.0
    e = linalg.expm(m * dt)
    phi = e[:2, :2]
    psi1 = e[:2, 2]
    psi2 = e[:2, 3] / dt
    g0 = psi1 - psi2
    g1 = psi2
    # Van Loan for the noise covariance
    c = np.zeros((4, 4))
    c[:2, :2] = -a
    c[:2, 2:] = q * np.outer(b, b)
    c[2:, 2:] = a.T
    ec = linalg.expm(c * dt)
    qd = ec[2:, 2:].T @ ec[:2, 2:]
    qd = 0.5 * (qd + qd.T)
    chol = linalg.cholesky(qd + 1e-300 * np.eye(2), lower=True)
    return phi, g0, g1, chol


def _digital_sections(cfg: LoopConfig, fs: float) -> np.ndarray:
    w0 = cfg.mode.omega_m
    fs_w = w0 / (2.0 * math.tan(w0 / (2.0 * fs)))
    rows = []
    for sec in cfg.filter.sections:
        b = np.trim_zeros(np.asarray(sec.b), "f")
        a = np.trim_zeros(np.asarray(sec.a), "f")
        deg = max(b.size, a.size)
        b = np.concatenate([np.zeros(deg - b.size), b]) if b.size else np.zeros(deg)
        a = np.concatenate([np.zeros(deg - a.size), a])
        bz, az = signal.bilinear(b, a, fs=fs_w)
        bz = np.atleast_1d(bz) / az[0]
        az = np.atleast_1d(az) / az[0]
        row = np.zeros(6)
        row[: bz.size] = bz
        row[3: 3 + az.size] = az
        rows.append(row)
    if not rows:
        rows.append(np.array([1.0, 0, 0, 1.0, 0, 0]))
    return np.array(rows)


@numba.njit(cache=True)
def _run_chunk(n, phi, g0, g1, chol, drive_c, sos, gain, eps, nd, zf, ze, tone,
               state, zi, dline, dpos, u_now, limit, out_y, out_x, out_u):
    n_modes = phi.shape[0]
    n_sec = sos.shape[0]
    dlen = dline.size
    for k in range(n):
        # measurement at this sample
        y = ze[k] + eps * u_now + tone[k]
        for j in range(n_modes):
            y += drive_c[j] * state[j, 0]
        x0 = state[0, 0]
        out_y[k] = y
        out_x[k] = x0
        out_u[k] = u_now
        # filter cascade, transposed direct form II
        v = y
        for i in range(n_sec):
            b0 = sos[i, 0]
            b1 = sos[i, 1]
            b2 = sos[i, 2]
            a1 = sos[i, 4]
            a2 = sos[i, 5]
            w = b0 * v + zi[i, 0]
            zi[i, 0] = b1 * v - a1 * w + zi[i, 1]
            zi[i, 1] = b2 * v - a2 * w
            v = w
        dline[dpos] = gain * v
        # control applied at the next sample: filter output from nd - 1 samples ago
        u_next = dline[(dpos - (nd - 1)) % dlen]
        dpos = (dpos + 1) % dlen
        for j in range(n_modes):
            s0 = state[j, 0]
            s1 = state[j, 1]
            c = drive_c[j]
            n0 = zf[k, j, 0]
            n1 = zf[k, j, 1]
            ns0 = phi[j, 0, 0] * s0 + phi[j, 0, 1] * s1 + c * (g0[j, 0] * u_now + g1[j, 0] * u_next) + chol[j, 0, 0] * n0
            ns1 = (phi[j, 1, 0] * s0 + phi[j, 1, 1] * s1 + c * (g0[j, 1] * u_now + g1[j, 1] * u_next)
                   + chol[j, 1, 0] * n0 + chol[j, 1, 1] * n1)
            state[j, 0] = ns0
            state[j, 1] = ns1
        u_now = u_next
        blown = not math.isfinite(u_now)
        for j in range(n_modes):
            if abs(state[j, 0]) > limit:
                blown = True
        if blown:
            return k + 1, dpos, u_now
    return -1, dpos, u_now


class LoopSimulator:
    """Stateful stepper; consecutive ``advance`` calls continue one realisation."""

    def __init__(self, cfg: LoopConfig, seed: int, dt: float | None = None,
                 tone: ToneSpec | None = None, samples_per_period: int = 64):
        self.cfg = cfg
        self.seed = int(seed)
        self.dt = default_dt(cfg, samples_per_period) if dt is None else float(dt)
        f_m = cfg.mode.freq_hz
        if self.dt > 1.0 / (20.0 * f_m) * (1 + 1e-12):
            raise ValueError(f"dt={self.dt:.3g} s does not resolve the oscillation (need <= {1 / (20 * f_m):.3g})")
        self.fs = 1.0 / self.dt
        f = cfg.filter
        self.nd = int(round(f.tau_fb / self.dt))
        if f.g_fb != 0 and self.nd < 1:
            raise ValueError("loop simulation needs a delay of at least one sample")
        if f.tau_fb > 0 and abs(self.nd * self.dt - f.tau_fb) > 0.01 * f.tau_fb:
            warnings.warn("delay quantisation error exceeds 1% of tau_fb", RuntimeWarning, stacklevel=2)
        self.nd = max(self.nd, 1)
        self.tone = tone

        modes = cfg.modes
        n_modes = len(modes)
        self.phi = np.zeros((n_modes, 2, 2))
        self.g0 = np.zeros((n_modes, 2))
        self.g1 = np.zeros((n_modes, 2))
        self.chol = np.zeros((n_modes, 2, 2))
        self.drive_c = np.ones(n_modes)
        var0 = np.zeros(n_modes)
        for j, m in enumerate(modes):
            n_b = cfg.noise.n_bath if j == 0 else higher_mode_occupation(cfg, m)
            q = 0.5 * force_noise_psd(n_b, m)  # two-sided intensity of the force
            self.phi[j], self.g0[j], self.g1[j], self.chol[j] = _mode_propagators(
                m.omega_m, m.gamma_m, m.omega_m, q, self.dt)
            if j > 0:
                self.drive_c[j] = math.sqrt(m.weight)
            var0[j] = n_b + 0.5
        self.sos = _digital_sections(cfg, self.fs)
        self.sigma_imp = math.sqrt(cfg.channel.s_imp * self.fs / 2.0)
        self.limit = 1e6 * math.sqrt(cfg.noise.n_bath + 1.0)

        self.rng = np.random.Generator(np.random.PCG64(self.seed))
        self.state = np.zeros((n_modes, 2))
        for j, m in enumerate(modes):
            sd = math.sqrt(var0[j])
            self.state[j] = self.rng.standard_normal(2) * np.array([sd, sd * m.omega_m])
        self.zi = np.zeros((self.sos.shape[0], 2))
        self.dline = np.zeros(self.nd + 1)
        self.dpos = 0
        self.u_now = 0.0
        self.n_done = 0

    def advance(self, n: int):
        """Simulate ``n`` samples; returns (y, x, u) arrays."""
        n_modes = self.phi.shape[0]
        zf = self.rng.standard_normal((n, n_modes, 2))
        ze = self.rng.standard_normal(n) * self.sigma_imp
        if self.tone is not None:
            t = (self.n_done + np.arange(n)) * self.dt
            tone = self.tone.amplitude * np.sin(self.tone.omega * t)
        else:
            tone = np.zeros(n)
        y = np.empty(n)
        x = np.empty(n)
        u = np.empty(n)
        g = self.cfg.filter.g_fb
        stop, self.dpos, self.u_now = _run_chunk(
            n, self.phi, self.g0, self.g1, self.chol, self.drive_c, self.sos, g,
            self.cfg.filter.epsilon_fb / self.cfg.mode.omega_m, self.nd, zf, ze, tone, self.state, self.zi,
            self.dline, self.dpos, self.u_now, self.limit, y, x, u)
        if stop >= 0:
            t_fail = (self.n_done + stop) * self.dt
            raise LoopInstabilityError(
                f"loop diverged at t={t_fail:.4g} s: |x| exceeded {self.limit:.3g} "
                f"(gain {g:.4g}, delay {self.nd} samples)")
        self.n_done += n
        return y, x, u

    def shot_trace(self, n: int, seed_offset: int = 1) -> np.ndarray:
        """Imprecision-only record (mechanics blocked) from an independent stream."""
        rng = np.random.Generator(np.random.PCG64([self.seed, seed_offset]))
        return rng.standard_normal(n) * self.sigma_imp


def simulate_closed_loop(cfg: LoopConfig, seed: int, duration: float | None = None,
                         dt: float | None = None, tone: ToneSpec | None = None,
                         burn_in: float | None = None, keep=("measurement", "displacement", "control")) -> SimRun:
    """Simulate the closed loop and return the recorded traces."""
    sim = LoopSimulator(cfg, seed, dt, tone)
    duration = default_duration(cfg) if duration is None else float(duration)
    g_eff = max(effective_linewidth(cfg), cfg.mode.gamma_m)
    if duration < 100.0 / g_eff:
        log.debug("duration %.3g s is shorter than 100 effective decay times", duration)
    n_burn = _burn_samples(cfg, sim.dt, burn_in)
    _advance_discard(sim, n_burn)
    n = int(round(duration / sim.dt))
    ys, xs, us = [], [], []
    left = n
    while left > 0:
        k = min(CHUNK, left)
        y, x, u = sim.advance(k)
        ys.append(y)
        xs.append(x)
        us.append(u)
        left -= k
    data = {"measurement": np.concatenate(ys), "displacement": np.concatenate(xs), "control": np.concatenate(us)}
    traces = {lab: TimeTrace(sim.fs, data[lab], lab) for lab in keep}
    return SimRun(seed, n * sim.dt, sim.dt, traces, cfg, sim.nd)


def _burn_samples(cfg, dt, burn_in):
    if burn_in is None:
        g_eff = max(effective_linewidth(cfg), cfg.mode.gamma_m)
        burn_in = min(20.0 / g_eff, 2e6 * dt)
    return int(round(burn_in / dt))


def _advance_discard(sim, n):
    while n > 0:
        k = min(CHUNK, n)
        sim.advance(k)
        n -= k


def simulate_psd(cfg: LoopConfig, seed: int, seg_len: int, n_segments: int, overlap: float = 0.5,
                 window: str = "hann", dt: float | None = None, tone: ToneSpec | None = None,
                 burn_in: float | None = None, with_shot: bool = False,
                 labels=("measurement",)) -> SimRun:
    """Stream a simulation straight into Welch estimates without storing traces."""
    sim = LoopSimulator(cfg, seed, dt, tone)
    _advance_discard(sim, _burn_samples(cfg, sim.dt, burn_in))
    accs = {lab: WelchAccumulator(sim.fs, seg_len, overlap, window) for lab in labels}
    step = accs[labels[0]].step
    n_total = seg_len + step * (n_segments - 1)
    left = n_total
    while left > 0:
        k = min(CHUNK, left)
        y, x, u = sim.advance(k)
        rec = {"measurement": y, "displacement": x, "control": u}
        for lab, acc in accs.items():
            acc.feed(rec[lab])
        left -= k
    spectra = {lab: acc.result() for lab, acc in accs.items()}
    if with_shot:
        acc = WelchAccumulator(sim.fs, seg_len, overlap, window)
        left = n_total
        off = 1
        while left > 0:
            k = min(CHUNK, left)
            acc.feed(sim.shot_trace(k, off))
            off += 1
            left -= k
        spectra["shot"] = acc.result()
    return SimRun(seed, n_total * sim.dt, sim.dt, {}, cfg, sim.nd, spectra)
