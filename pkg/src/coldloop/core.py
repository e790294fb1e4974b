"""Domain types for the feedback-cooling model.

All frequencies are angular (rad/s) internally. Displacements are in units
where the ground-state variance of the position quadrature is 1/2, and PSDs
are one-sided densities normalised so that ``var = integral S(omega) domega/2pi``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * np.pi


class LoopInstabilityError(RuntimeError):
    """Raised when a closed loop is unstable (analytically or in simulation)."""


class UnphysicalOccupationError(ValueError):
    """Raised when an occupation estimate falls below the zero-point bound."""


@dataclass(frozen=True)
class MechanicalMode:
    omega_m: float
    gamma_m: float
    m_eff: float = 16e-15
    weight: float = 1.0  # relative loop coupling, used for higher modes

    def __post_init__(self):
        if not self.omega_m > 0:
            raise ValueError(f"omega_m must be positive, got {self.omega_m}")
        if not self.gamma_m > 0:
            raise ValueError(f"gamma_m must be positive, got {self.gamma_m}")
        if self.weight < 0:
            raise ValueError(f"weight must be non-negative, got {self.weight}")

    @property
    def q_factor(self) -> float:
        return self.omega_m / self.gamma_m

    @property
    def freq_hz(self) -> float:
        return self.omega_m / TWO_PI

    @classmethod
    def from_hz(cls, freq_hz: float, q_factor: float, **kw) -> "MechanicalMode":
        omega = TWO_PI * freq_hz
        return cls(omega_m=omega, gamma_m=omega / q_factor, **kw)


@dataclass(frozen=True)
class OpticalCavity:
    kappa: float
    kappa_e: float
    detuning: float = 0.0

    def __post_init__(self):
        if not 0 < self.kappa_e <= self.kappa:
            raise ValueError("need 0 < kappa_e <= kappa")


@dataclass(frozen=True)
class CouplingBudget:
    g0: float
    n_c: float
    eta_det: float
    n_c_probe: float = 0.0  # photons from an out-of-loop probe (back-action only)

    def __post_init__(self):
        if not self.g0 > 0:
            raise ValueError("g0 must be positive")
        if self.n_c < 0 or self.n_c_probe < 0:
            raise ValueError("photon numbers must be non-negative")
        if not 0 <= self.eta_det <= 1:
            raise ValueError("eta_det must lie in [0, 1]")


@dataclass(frozen=True)
class NoiseInputs:
    n_th: float
    n_ba: float = 0.0

    def __post_init__(self):
        if self.n_th < 0 or self.n_ba < 0:
            raise ValueError("occupations must be non-negative")

    @property
    def n_bath(self) -> float:
        return self.n_th + self.n_ba

    def t_eff(self, omega_m: float) -> float:
        """Effective bath temperature (K) equivalent to ``n_bath`` at ``omega_m``."""
        from scipy.constants import hbar, k as k_b

        return self.n_bath * hbar * omega_m / k_b


@dataclass(frozen=True)
class MeasurementChannel:
    s_imp: float
    shot_level: float | None = None  # PSD of pure shot noise; None -> s_imp

    def __post_init__(self):
        if not self.s_imp > 0:
            raise ValueError("s_imp must be positive")

    @property
    def shot(self) -> float:
        return self.s_imp if self.shot_level is None else self.shot_level


@dataclass(frozen=True)
class FilterSection:
    """Analog second-order stage ``(b0 s^2 + b1 s + b2) / (a0 s^2 + a1 s + a2)``.

    Laplace variable ``s`` is in rad/s. A first-order stage has ``a0 = b0 = 0``.
    Frequency responses use ``s = -i omega`` so that a delay reads ``exp(+i omega tau)``.
    """

    b: tuple[float, float, float]
    a: tuple[float, float, float]

    def __post_init__(self):
        b = tuple(float(x) for x in self.b)
        a = tuple(float(x) for x in self.a)
        if len(b) != 3 or len(a) != 3:
            raise ValueError("sections need exactly three b and three a coefficients")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "a", a)
        den = np.trim_zeros(np.asarray(a), "f")
        if den.size == 0:
            raise ValueError("denominator is identically zero")
        roots = np.roots(den)
        if np.any(roots.real >= 0):
            raise ValueError(f"unstable section: denominator roots {roots}")

    def response(self, omega) -> np.ndarray:
        s = -1j * np.asarray(omega, dtype=float)
        return np.polyval(self.b, s) / np.polyval(self.a, s)

    # convenience constructors -------------------------------------------
    @classmethod
    def resonator(cls, omega_c: float, q: float, sign: float = 1.0) -> "FilterSection":
        """Resonant low-pass; phase +pi/2 and gain ``q`` at ``omega_c``. Scaled to unit peak."""
        return cls((0.0, 0.0, sign * omega_c**2 / q), (1.0, omega_c / q, omega_c**2))

    @classmethod
    def bandpass(cls, omega_c: float, q: float, sign: float = 1.0) -> "FilterSection":
        """Band-pass with unit gain and zero phase at ``omega_c``."""
        return cls((0.0, sign * omega_c / q, 0.0), (1.0, omega_c / q, omega_c**2))

    @classmethod
    def allpass2(cls, omega_c: float, q: float) -> "FilterSection":
        return cls((1.0, -omega_c / q, omega_c**2), (1.0, omega_c / q, omega_c**2))

    @classmethod
    def allpass1(cls, corner: float) -> "FilterSection":
        return cls((0.0, -1.0, corner), (0.0, 1.0, corner))

    @classmethod
    def gain(cls, k: float) -> "FilterSection":
        return cls((0.0, 0.0, k), (0.0, 0.0, 1.0))


@dataclass(frozen=True)
class FeedbackFilter:
    sections: tuple[FilterSection, ...] = ()
    g_fb: float = 0.0
    tau_fb: float = 0.0
    epsilon_fb: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "sections", tuple(self.sections))
        if self.tau_fb < 0:
            raise ValueError("tau_fb must be non-negative")

    def shaping(self, omega) -> np.ndarray:
        """Delay-free transfer function (product of sections)."""
        omega = np.asarray(omega, dtype=float)
        h = np.ones(omega.shape, dtype=complex)
        for sec in self.sections:
            h = h * sec.response(omega)
        return h

    def transfer(self, omega) -> np.ndarray:
        """Delayed transfer function without the loop gain."""
        omega = np.asarray(omega, dtype=float)
        return self.shaping(omega) * np.exp(1j * omega * self.tau_fb)

    def with_gain(self, g_fb: float) -> "FeedbackFilter":
        return replace(self, g_fb=float(g_fb))


@dataclass(frozen=True)
class LoopConfig:
    mode: MechanicalMode
    cavity: OpticalCavity
    coupling: CouplingBudget
    noise: NoiseInputs
    channel: MeasurementChannel
    filter: FeedbackFilter = field(default_factory=FeedbackFilter)
    higher_modes: tuple[MechanicalMode, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "higher_modes", tuple(self.higher_modes))
        for hm in self.higher_modes:
            if hm.omega_m <= self.mode.omega_m:
                raise ValueError("higher modes must lie above the fundamental")

    @property
    def modes(self) -> tuple[MechanicalMode, ...]:
        return (self.mode,) + self.higher_modes

    def with_gain(self, g_fb: float) -> "LoopConfig":
        return replace(self, filter=self.filter.with_gain(g_fb))

    def replace(self, **changes) -> "LoopConfig":
        return replace(self, **changes)


@dataclass
class SpectrumTrace:
    freqs: np.ndarray
    psd: np.ndarray
    n_avg: float = np.inf
    rbw: float = 0.0
    # variance inflation of smooth functionals from bin-to-bin and segment
    # overlap correlations (1 for independent bins)
    corr_factor: float = 1.0

    def __post_init__(self):
        self.freqs = np.asarray(self.freqs, dtype=float)
        self.psd = np.asarray(self.psd, dtype=float)
        if self.freqs.shape != self.psd.shape or self.freqs.ndim != 1:
            raise ValueError("freqs and psd must be 1-D arrays of equal length")
        if self.freqs.size > 1 and np.any(np.diff(self.freqs) <= 0):
            raise ValueError("freqs must be strictly increasing")
        if np.any(self.psd < 0):
            raise ValueError("psd entries must be non-negative")

    @property
    def omega(self) -> np.ndarray:
        return TWO_PI * self.freqs

    def band(self, f_lo: float, f_hi: float) -> "SpectrumTrace":
        sel = (self.freqs >= f_lo) & (self.freqs <= f_hi)
        return SpectrumTrace(self.freqs[sel], self.psd[sel], self.n_avg, self.rbw, self.corr_factor)

    def scaled(self, factor: float) -> "SpectrumTrace":
        return SpectrumTrace(self.freqs.copy(), self.psd * factor, self.n_avg, self.rbw, self.corr_factor)


def as_modes(modes: Sequence[MechanicalMode] | MechanicalMode) -> tuple[MechanicalMode, ...]:
    if isinstance(modes, MechanicalMode):
        return (modes,)
    return tuple(modes)
