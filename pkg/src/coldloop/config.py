"""YAML configuration files for loop scenarios.

Every dimensional key carries its unit as a suffix (``_hz``, ``_s``, ``_k``,
``_w``, ``_kg``). Frequencies in files are ordinary frequencies; they are
converted to angular units on load. Filter sections are stored as analog
biquad coefficients in the Laplace variable measured in rad/s.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .core import (
    TWO_PI,
    CouplingBudget,
    FeedbackFilter,
    FilterSection,
    LoopConfig,
    MeasurementChannel,
    MechanicalMode,
    NoiseInputs,
    OpticalCavity,
)
from .physics import (
    intracavity_photons,
    quantum_imprecision,
    single_photon_cooperativity,
    thermal_occupation,
)

CONFIG_DIR_ENV = "COLDLOOP_CONFIG_DIR"
REFERENCE_NAMES = ("lhe_het", "lhe_only", "ln2_het")


class ConfigError(ValueError):
    """Schema violation, with the offending key path and source line when known."""

    def __init__(self, message: str, key: str = "", line: int | None = None, path: str | None = None):
        self.key = key
        self.line = line
        self.path = path
        loc = ":".join(str(p) for p in (path, line) if p is not None)
        if key:
            loc = f"{loc} key '{key}'" if loc else f"key '{key}'"
        super().__init__(f"{loc}: {message}" if loc else message)


@dataclass
class Scenario:
    """A loaded config file: the loop plus the analysis settings around it."""

    name: str
    loop: LoopConfig
    heterodyne: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    simulation: dict = field(default_factory=dict)
    design: dict = field(default_factory=dict)
    calibration: dict = field(default_factory=dict)
    characterization: dict = field(default_factory=dict)
    derived: dict = field(default_factory=dict)
    source: str | None = None


# ---------------------------------------------------------------------------
# line tracking


def _line_map(text: str) -> dict[str, int]:
    """Map dotted key paths to 1-based line numbers using the yaml node tree."""
    out: dict[str, int] = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return out

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = f"{prefix}.{k.value}" if prefix else str(k.value)
                out[key] = k.start_mark.line + 1
                walk(v, key)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                key = f"{prefix}[{i}]"
                out[key] = v.start_mark.line + 1
                walk(v, key)

    if root is not None:
        walk(root, "")
    return out


class _Reader:
    def __init__(self, data: dict, lines: dict[str, int], path: str | None):
        self.data = data
        self.lines = lines
        self.path = path

    def err(self, msg, key):
        line = self.lines.get(key)
        if line is None and "." in key:
            line = self.lines.get(key.rsplit(".", 1)[0])
        return ConfigError(msg, key, line, self.path)

    def section(self, d: dict, key: str, prefix: str = "", required: bool = True) -> dict:
        full = f"{prefix}.{key}" if prefix else key
        if key not in d:
            if required:
                raise self.err("missing required section", full)
            return {}
        v = d[key]
        if not isinstance(v, dict):
            raise self.err("expected a mapping", full)
        return v

    def num(self, d: dict, key: str, prefix: str, default: Any = ..., positive=False, nonneg=False):
        full = f"{prefix}.{key}"
        if key not in d:
            if default is ...:
                raise self.err("missing required key", full)
            return default
        v = d[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            try:
                v = float(v)
            except (TypeError, ValueError):
                raise self.err(f"expected a number, got {v!r}", full) from None
        v = float(v)
        if not np.isfinite(v):
            raise self.err("must be finite", full)
        if positive and v <= 0:
            raise self.err("must be positive", full)
        if nonneg and v < 0:
            raise self.err("must be non-negative", full)
        return v

    def check_keys(self, d: dict, allowed: set, prefix: str):
        for k in d:
            if k not in allowed:
                raise self.err(f"unknown key (allowed: {', '.join(sorted(allowed))})", f"{prefix}.{k}")


# ---------------------------------------------------------------------------
# parsing


def _parse_mode(r: _Reader, d: dict, prefix: str, weight_default=1.0) -> MechanicalMode:
    r.check_keys(d, {"freq_hz", "q_factor", "m_eff_kg", "weight"}, prefix)
    f = r.num(d, "freq_hz", prefix, positive=True)
    q = r.num(d, "q_factor", prefix, positive=True)
    m = r.num(d, "m_eff_kg", prefix, 16e-15, positive=True)
    w = r.num(d, "weight", prefix, weight_default, nonneg=True)
    return MechanicalMode(TWO_PI * f, TWO_PI * f / q, m, w)


def _parse_section(r: _Reader, d: dict, prefix: str) -> FilterSection:
    kind = d.get("kind", "biquad")
    try:
        if kind == "biquad":
            r.check_keys(d, {"kind", "b", "a"}, prefix)
            for k in ("b", "a"):
                if k not in d:
                    raise r.err("missing required key", f"{prefix}.{k}")
                if not isinstance(d[k], list) or len(d[k]) != 3:
                    raise r.err("expected a list of three coefficients", f"{prefix}.{k}")
            return FilterSection(tuple(float(x) for x in d["b"]), tuple(float(x) for x in d["a"]))
        if kind in ("resonator", "bandpass"):
            r.check_keys(d, {"kind", "center_hz", "q", "sign", "scale"}, prefix)
            fc = r.num(d, "center_hz", prefix, positive=True)
            q = r.num(d, "q", prefix, positive=True)
            sign = r.num(d, "sign", prefix, 1.0)
            scale = r.num(d, "scale", prefix, 1.0)
            sec = getattr(FilterSection, kind)(TWO_PI * fc, q, sign)
            return FilterSection(tuple(scale * b for b in sec.b), sec.a)
        if kind == "allpass2":
            r.check_keys(d, {"kind", "center_hz", "q"}, prefix)
            return FilterSection.allpass2(TWO_PI * r.num(d, "center_hz", prefix, positive=True),
                                          r.num(d, "q", prefix, positive=True))
        if kind == "allpass1":
            r.check_keys(d, {"kind", "corner_hz"}, prefix)
            return FilterSection.allpass1(TWO_PI * r.num(d, "corner_hz", prefix, positive=True))
        if kind == "gain":
            r.check_keys(d, {"kind", "k"}, prefix)
            return FilterSection.gain(r.num(d, "k", prefix))
    except ConfigError:
        raise
    except ValueError as exc:
        raise r.err(str(exc), prefix) from None
    raise r.err(f"unknown section kind {kind!r}", f"{prefix}.kind")


def _parse(data: Any, lines: dict[str, int], path: str | None) -> Scenario:
    r = _Reader(data, lines, path)
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", path=path)
    top = {"name", "mode", "higher_modes", "cavity", "coupling", "noise", "channel", "filter",
           "heterodyne", "sweep", "simulation", "design", "calibration", "characterization"}
    r.check_keys(data, top, "")

    mode = _parse_mode(r, r.section(data, "mode"), "mode")
    hms = data.get("higher_modes") or []
    if not isinstance(hms, list):
        raise r.err("expected a list", "higher_modes")
    higher = tuple(_parse_mode(r, hm, f"higher_modes[{i}]") for i, hm in enumerate(hms))
    for i, hm in enumerate(higher):
        if hm.omega_m <= mode.omega_m:
            raise r.err("higher mode must lie above the fundamental", f"higher_modes[{i}].freq_hz")

    cd = r.section(data, "cavity")
    r.check_keys(cd, {"kappa_hz", "kappa_e_hz", "detuning_hz", "wavelength_m"}, "cavity")
    kappa = TWO_PI * r.num(cd, "kappa_hz", "cavity", positive=True)
    kappa_e = TWO_PI * r.num(cd, "kappa_e_hz", "cavity", positive=True)
    if kappa_e > kappa:
        raise r.err("kappa_e_hz exceeds kappa_hz", "cavity.kappa_e_hz")
    cav = OpticalCavity(kappa, kappa_e, TWO_PI * r.num(cd, "detuning_hz", "cavity", 0.0))
    wavelength = r.num(cd, "wavelength_m", "cavity", 1550e-9, positive=True)

    derived: dict = {}
    cp = r.section(data, "coupling")
    r.check_keys(cp, {"g0_hz", "n_c", "input_power_w", "eta_det", "n_c_probe", "probe_power_w",
                      "probe_detuning_hz"}, "coupling")
    g0 = TWO_PI * r.num(cp, "g0_hz", "coupling", positive=True)
    eta = r.num(cp, "eta_det", "coupling")
    if not 0 <= eta <= 1:
        raise r.err("must lie in [0, 1]", "coupling.eta_det")
    if "n_c" in cp:
        n_c = r.num(cp, "n_c", "coupling", nonneg=True)
    elif "input_power_w" in cp:
        n_c = intracavity_photons(r.num(cp, "input_power_w", "coupling", nonneg=True), cav, wavelength)
        derived["n_c"] = n_c
    else:
        raise r.err("missing required key (give n_c or input_power_w)", "coupling.n_c")
    probe_det = TWO_PI * r.num(cp, "probe_detuning_hz", "coupling", 0.0)
    if "n_c_probe" in cp:
        n_probe = r.num(cp, "n_c_probe", "coupling", nonneg=True)
    elif "probe_power_w" in cp:
        pc = OpticalCavity(cav.kappa, cav.kappa_e, probe_det)
        n_probe = intracavity_photons(r.num(cp, "probe_power_w", "coupling", nonneg=True), pc, wavelength)
        derived["n_c_probe"] = n_probe
    else:
        n_probe = 0.0
    coupling = CouplingBudget(g0, n_c, eta, n_probe)

    nd = r.section(data, "noise")
    r.check_keys(nd, {"t_bath_k", "n_th", "n_ba"}, "noise")
    if "n_th" in nd:
        n_th = r.num(nd, "n_th", "noise", nonneg=True)
    elif "t_bath_k" in nd:
        n_th = thermal_occupation(r.num(nd, "t_bath_k", "noise", nonneg=True), mode.omega_m)
        derived["n_th"] = n_th
    else:
        raise r.err("missing required key (give t_bath_k or n_th)", "noise.t_bath_k")
    if "n_ba" in nd and nd["n_ba"] != "auto":
        n_ba = r.num(nd, "n_ba", "noise", nonneg=True)
    else:
        c0 = single_photon_cooperativity(g0, kappa, mode.gamma_m)
        n_ba = (coupling.n_c + coupling.n_c_probe) * c0
        derived["n_ba"] = n_ba
    noise = NoiseInputs(n_th, n_ba)

    ch = r.section(data, "channel", required=False)
    r.check_keys(ch, {"s_imp", "shot_level"}, "channel")
    if "s_imp" in ch and ch["s_imp"] != "auto":
        s_imp = r.num(ch, "s_imp", "channel", positive=True)
    else:
        if eta <= 0 or n_c <= 0:
            raise r.err("s_imp cannot be derived with eta_det = 0 or n_c = 0; set it explicitly", "channel.s_imp")
        s_imp = quantum_imprecision(g0, n_c, kappa, eta)
        derived["s_imp"] = s_imp
    shot = r.num(ch, "shot_level", "channel", None) if "shot_level" in ch else None
    channel = MeasurementChannel(s_imp, shot)

    fd = r.section(data, "filter", required=False)
    r.check_keys(fd, {"g_fb", "tau_fb_s", "epsilon_fb", "sections"}, "filter")
    secs_raw = fd.get("sections") or []
    if not isinstance(secs_raw, list):
        raise r.err("expected a list", "filter.sections")
    secs = []
    for i, s in enumerate(secs_raw):
        if not isinstance(s, dict):
            raise r.err("expected a mapping", f"filter.sections[{i}]")
        secs.append(_parse_section(r, s, f"filter.sections[{i}]"))
    filt = FeedbackFilter(secs, r.num(fd, "g_fb", "filter", 0.0), r.num(fd, "tau_fb_s", "filter", 0.0, nonneg=True),
                          r.num(fd, "epsilon_fb", "filter", 0.0))

    loop = LoopConfig(mode, cav, coupling, noise, channel, filt, higher)
    extras = {}
    for k in ("heterodyne", "sweep", "simulation", "design", "calibration", "characterization"):
        extras[k] = r.section(data, k, required=False)
    name = str(data.get("name", Path(path).stem if path else "scenario"))
    return Scenario(name, loop, derived=derived, source=path, **extras)


def loads(text: str, path: str | None = None) -> Scenario:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}", line=mark.line + 1 if mark else None,
                          path=path) from None
    return _parse(data, _line_map(text), path)


def resolve_path(path: str | os.PathLike) -> Path:
    """Absolute path, a file under $COLDLOOP_CONFIG_DIR, or a shipped reference name."""
    p = Path(path)
    if p.exists():
        return p
    base = os.environ.get(CONFIG_DIR_ENV)
    if base:
        for cand in (Path(base) / p, Path(base) / f"{p}.yaml"):
            if cand.exists():
                return cand
    name = p.stem if p.suffix in (".yaml", ".yml") else p.name
    if name in REFERENCE_NAMES:
        return Path(str(resources.files("coldloop.configs") / f"{name}.yaml"))
    raise FileNotFoundError(f"config not found: {path}")


def load(path: str | os.PathLike) -> Scenario:
    p = resolve_path(path)
    return loads(p.read_text(), str(p))


def load_reference(name: str) -> Scenario:
    if name not in REFERENCE_NAMES:
        raise KeyError(f"unknown reference config {name!r}; choose from {REFERENCE_NAMES}")
    return load(name)


# ---------------------------------------------------------------------------
# writing


def _mode_dict(m: MechanicalMode, weight=False) -> dict:
    d = {"freq_hz": float(m.omega_m / TWO_PI), "q_factor": float(m.omega_m / m.gamma_m), "m_eff_kg": float(m.m_eff)}
    if weight:
        d["weight"] = float(m.weight)
    return d


def to_dict(sc: Scenario | LoopConfig) -> dict:
    """Explicit (fully resolved) dictionary form; derived values are written out."""
    if isinstance(sc, LoopConfig):
        sc = Scenario("scenario", sc)
    c = sc.loop
    out: dict = {"name": sc.name, "mode": _mode_dict(c.mode)}
    if c.higher_modes:
        out["higher_modes"] = [_mode_dict(m, True) for m in c.higher_modes]
    out["cavity"] = {"kappa_hz": float(c.cavity.kappa / TWO_PI), "kappa_e_hz": float(c.cavity.kappa_e / TWO_PI),
                     "detuning_hz": float(c.cavity.detuning / TWO_PI)}
    out["coupling"] = {"g0_hz": float(c.coupling.g0 / TWO_PI), "n_c": float(c.coupling.n_c),
                       "eta_det": float(c.coupling.eta_det), "n_c_probe": float(c.coupling.n_c_probe)}
    out["noise"] = {"n_th": float(c.noise.n_th), "n_ba": float(c.noise.n_ba)}
    out["channel"] = {"s_imp": float(c.channel.s_imp)}
    if c.channel.shot_level is not None:
        out["channel"]["shot_level"] = float(c.channel.shot_level)
    out["filter"] = {"g_fb": float(c.filter.g_fb), "tau_fb_s": float(c.filter.tau_fb),
                     "epsilon_fb": float(c.filter.epsilon_fb),
                     "sections": [{"kind": "biquad", "b": [float(x) for x in s.b], "a": [float(x) for x in s.a]}
                                  for s in c.filter.sections]}
    for k in ("heterodyne", "sweep", "simulation", "design", "calibration", "characterization"):
        v = getattr(sc, k)
        if v:
            out[k] = v
    return out


def dumps(sc: Scenario | LoopConfig) -> str:
    return yaml.safe_dump(to_dict(sc), sort_keys=False)


def save(sc: Scenario | LoopConfig, path: str | os.PathLike) -> Path:
    p = Path(path)
    p.write_text(dumps(sc))
    return p
