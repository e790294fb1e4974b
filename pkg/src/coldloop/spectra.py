"""Averaged-periodogram PSD estimation and shot-noise normalisation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .core import SpectrumTrace

_WINDOWS = {"hann": "hann", "rect": "boxcar", "boxcar": "boxcar"}


@dataclass
class TimeTrace:
    fs: float
    samples: np.ndarray
    label: str = "measurement"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if not self.fs > 0:
            raise ValueError("fs must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("trace contains non-finite samples")
        if self.label not in ("displacement", "measurement", "control", "shot"):
            raise ValueError(f"unknown trace label {self.label!r}")


def _window(window: str, seg_len: int) -> np.ndarray:
    try:
        name = _WINDOWS[window]
    except KeyError:
        raise ValueError(f"window must be one of {sorted(_WINDOWS)}") from None
    return signal.get_window(name, seg_len)


class WelchAccumulator:
    """Streaming Welch estimator; feeding chunks equals one call on the whole trace."""

    def __init__(self, fs: float, seg_len: int, overlap: float = 0.5, window: str = "hann"):
        if not 0 <= overlap < 1:
            raise ValueError("overlap must lie in [0, 1)")
        self.fs = float(fs)
        self.seg_len = int(seg_len)
        self.step = max(1, self.seg_len - int(round(overlap * self.seg_len)))
        self.win = _window(window, self.seg_len)
        self._buf = np.empty(0)
        self._sum = np.zeros(self.seg_len // 2 + 1)
        self.n_seg = 0

    def feed(self, x: np.ndarray) -> None:
        buf = np.concatenate([self._buf, np.asarray(x, dtype=float)])
        n = (buf.size - self.seg_len) // self.step + 1 if buf.size >= self.seg_len else 0
        if n > 0:
            idx = np.arange(self.seg_len)[None, :] + self.step * np.arange(n)[:, None]
            spec = np.fft.rfft(buf[idx] * self.win, axis=1)
            self._sum += np.sum(np.abs(spec) ** 2, axis=0)
            self.n_seg += n
            buf = buf[n * self.step:]
        self._buf = buf

    def result(self) -> SpectrumTrace:
        if self.n_seg == 0:
            raise ValueError("trace shorter than one segment")
        scale = 1.0 / (self.fs * np.sum(self.win**2))
        psd = self._sum / self.n_seg * scale
        psd[1:] *= 2.0
        if self.seg_len % 2 == 0:
            psd[-1] /= 2.0
        freqs = np.fft.rfftfreq(self.seg_len, 1.0 / self.fs)
        enbw = self.seg_len * np.sum(self.win**2) / np.sum(self.win) ** 2
        return SpectrumTrace(freqs, psd, n_avg=float(self.n_seg), rbw=enbw * self.fs / self.seg_len,
                             corr_factor=correlation_factor(self.win, self.step))


def correlation_factor(win: np.ndarray, step: int) -> float:
    """Variance inflation for sums over many bins of a Welch estimate.

    Product of the neighbouring-bin power correlations of the window and the
    segment-overlap factor for stationary Gaussian noise.
    """
    n = win.size
    w2 = np.sum(win**2)
    spec = np.fft.fft(win**2)
    rho = np.abs(spec[1:4]) ** 2 / w2**2
    bins = 1.0 + 2.0 * float(np.sum(rho))
    c = [np.sum(win[: n - j] * win[j:]) / w2 for j in range(step, n, step)]
    over = 1.0 + 2.0 * float(np.sum(np.square(c)))
    return bins * over


def welch_psd(trace: TimeTrace, seg_len: int, overlap: float = 0.5, window: str = "hann") -> SpectrumTrace:
    """One-sided PSD per Hz; ``n_avg`` is the number of averaged segments."""
    if seg_len > trace.samples.size:
        raise ValueError(f"trace of {trace.samples.size} samples is shorter than seg_len={seg_len}")
    acc = WelchAccumulator(trace.fs, seg_len, overlap, window)
    acc.feed(trace.samples)
    return acc.result()


def shot_normalize(spec: SpectrumTrace, shot_ref: SpectrumTrace) -> SpectrumTrace:
    """Pointwise ratio to a shot-noise reference taken on the same grid."""
    if spec.freqs.shape != shot_ref.freqs.shape or not np.allclose(spec.freqs, shot_ref.freqs, rtol=1e-12, atol=0):
        raise ValueError("frequency grids differ")
    if np.any(shot_ref.psd <= 0):
        raise ValueError("shot reference has zero bins")
    return SpectrumTrace(spec.freqs.copy(), spec.psd / shot_ref.psd, min(spec.n_avg, shot_ref.n_avg), spec.rbw,
                         spec.corr_factor)


def smooth_reference(shot_ref: SpectrumTrace, width: int = 101) -> SpectrumTrace:
    """Running median of a flat reference; removes its own estimation noise."""
    from scipy.ndimage import median_filter

    psd = median_filter(shot_ref.psd, size=width, mode="nearest")
    # median of an exponential-family estimate is biased low; rescale to the mean
    psd = psd * (np.mean(shot_ref.psd) / np.mean(psd))
    return SpectrumTrace(shot_ref.freqs.copy(), psd, np.inf, shot_ref.rbw, shot_ref.corr_factor)
