"""Command-line entry point: ``coldloop <command> --config PATH [--seed N] [--workers K] [--out DIR]``."""

from __future__ import annotations

import argparse
import hashlib
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, config as config_mod
from .core import TWO_PI, MechanicalMode, OpticalCavity
from .io import read_spectrum_csv, write_json, write_spectrum_csv, write_table_csv, write_time_trace

log = logging.getLogger("coldloop")

COMMANDS = ("budget", "simulate", "sweep", "fit", "heterodyne", "design", "calibrate", "characterize")


@dataclass
class RunManifest:
    command: str
    config_path: str
    config_sha256: str
    seeds: list[int]
    version: str = __version__
    started: str = ""
    finished: str = ""
    outputs: list[str] = field(default_factory=list)
    options: dict = field(default_factory=dict)

    @classmethod
    def for_config(cls, command: str, path: Path, seeds, options: dict) -> "RunManifest":
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        return cls(command, str(path), digest, [int(s) for s in seeds], options=options)

    def verify(self) -> bool:
        return hashlib.sha256(Path(self.config_path).read_bytes()).hexdigest() == self.config_sha256


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


class Run:
    """Collects outputs for one command; every report carries the config hash."""

    def __init__(self, args, command: str, seeds):
        self.path = config_mod.resolve_path(args.config)
        self.scenario = config_mod.load(self.path)
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        opts = {k: v for k, v in vars(args).items() if k not in ("func", "config", "out") and v is not None}
        self.manifest = RunManifest.for_config(command, self.path, seeds, opts)
        self.manifest.started = _now()

    def stamp(self, report: dict) -> dict:
        report = dict(report)
        report["config_sha256"] = self.manifest.config_sha256
        report["manifest"] = "manifest.json"
        return report

    def json(self, name: str, report: dict) -> Path:
        p = write_json(self.stamp(report), self.out / name)
        self.manifest.outputs.append(p.name)
        return p

    def file(self, p: Path) -> Path:
        self.manifest.outputs.append(Path(p).name)
        return p

    def close(self):
        self.manifest.finished = _now()
        write_json(asdict(self.manifest), self.out / "manifest.json")


# ---------------------------------------------------------------------------
# commands


def cmd_budget(args) -> dict:
    from .physics import rate_budget

    run = Run(args, "budget", [])
    cfg = run.scenario.loop
    b = rate_budget(cfg)
    rep = {"scenario": run.scenario.name, "budget": b.as_dict(), "inputs": run.scenario.derived}
    print_json(rep)
    run.json("budget.json", rep)
    run.close()
    return rep


def cmd_simulate(args) -> dict:
    from .physics import analytic_occupation
    from .pipeline import segment_length
    from .sim import default_dt, simulate_closed_loop
    from .spectra import shot_normalize, smooth_reference, welch_psd

    run = Run(args, "simulate", [args.seed])
    sc = run.scenario
    cfg = sc.loop
    simd = sc.simulation
    dt = default_dt(cfg, int(simd.get("samples_per_period", 64)))
    seg = segment_length(cfg, dt)
    n_seg = int(simd.get("n_segments", 100))
    overlap = float(simd.get("overlap", 0.5))
    window = simd.get("window", "hann")
    duration = float(simd.get("duration_s", seg * dt * (1 + (n_seg - 1) * (1 - overlap))))
    sr = simulate_closed_loop(cfg, args.seed, duration, dt)
    trace = sr.traces["measurement"]
    run.file(write_time_trace(trace, run.out / "measurement.trace"))
    spec = welch_psd(trace, seg, overlap, window)
    rng = np.random.Generator(np.random.PCG64([args.seed, 1]))
    from .spectra import TimeTrace

    shot = welch_psd(TimeTrace(trace.fs, rng.standard_normal(trace.samples.size) * math.sqrt(cfg.channel.shot * trace.fs / 2),
                               "shot"), seg, overlap, window)
    norm = shot_normalize(spec, smooth_reference(shot))
    run.file(write_spectrum_csv(norm, run.out / "spectrum.csv"))
    x = sr.traces["displacement"].samples
    rep = {"seed": args.seed, "duration_s": sr.duration, "dt_s": sr.dt, "delay_samples": sr.delay_samples,
           "n_samples": int(trace.samples.size), "segment_length": seg,
           "n_bar_analytic": analytic_occupation(cfg), "n_bar_from_variance": float(np.var(x) - 0.5)}
    print_json(rep)
    run.json("simulate.json", rep)
    run.close()
    return rep


def cmd_sweep(args) -> dict:
    from .control import optimize_gain
    from .pipeline import is_u_shaped, run_sweep

    sc = config_mod.load(config_mod.resolve_path(args.config))
    seeds = [args.seed] if args.seed is not None else sc.sweep.get("seeds", [0])
    run = Run(args, "sweep", seeds)
    cfg = sc.loop
    gains = args.gains or sc.sweep.get("gains")
    if not gains:
        raise ValueError("no gains: give --gains or a sweep.gains list in the config")
    n_seg = int(sc.sweep.get("n_segments", 500))
    spp = int(sc.simulation.get("samples_per_period", 64))
    rows = run_sweep(cfg, gains, seeds, n_seg, spp, args.workers)
    ok = [r for r in rows if "error" not in r]
    curve = optimize_gain(cfg, (min(gains) / 3, max(gains) * 3), n_scan=61)
    table = [{k: r.get(k) for k in ("g_fb", "seed", "n_true", "n_fit", "n_sigma", "chi2_red", "gamma_eff_hz")}
             | {"status": "error" if "error" in r else "ok"} for r in rows]
    run.file(write_table_csv(table, run.out / "sweep.csv"))
    run.file(write_table_csv([{"g_fb": g, "n_bar": n} for g, n in zip(curve.gains, curve.n_bars)],
                             run.out / "analytic_curve.csv"))
    rep = {"points": rows, "failed": [r["g_fb"] for r in rows if "error" in r],
           "u_shaped": is_u_shaped([r["g_fb"] for r in ok], [r["n_fit"] for r in ok]) if len(ok) >= 3 else False,
           "max_rel_dev": max((abs(r["n_fit"] / r["n_true"] - 1) for r in ok), default=None),
           "analytic_optimum": {"g_opt": curve.g_opt, "n_min": curve.n_min}}
    run.json("sweep.json", rep)
    for r in table:
        print(f"g={r['g_fb']:.4g} seed={r['seed']} n_true={_fmt(r['n_true'])} n_fit={_fmt(r['n_fit'])} "
              f"+/- {_fmt(r['n_sigma'])} {r['status']}")
    print(f"U-shaped: {rep['u_shaped']}  max |rel dev|: {_fmt(rep['max_rel_dev'])}")
    run.close()
    return rep


def cmd_fit(args) -> dict:
    from .inference import fit_homodyne_spectrum, fit_report, infer_and_count
    from .pipeline import fit_band

    run = Run(args, "fit", [])
    if not args.data:
        raise ValueError("fit needs --data SPECTRUM.csv")
    cfg = run.scenario.loop
    spec = fit_band(cfg, read_spectrum_csv(args.data))
    fit = fit_homodyne_spectrum(spec, cfg, shot_level=cfg.channel.shot)
    occ = infer_and_count(fit)
    rep = fit_report(fit, occ)
    rep["data"] = str(args.data)
    run.file(write_spectrum_csv(occ.s_x, run.out / "inferred_sx.csv"))
    run.json("fit.json", rep)
    print_json({"n_bar": occ.n_bar, "sigma": occ.sigma, "chi2_red": fit.chi2_red})
    run.close()
    return rep


def cmd_heterodyne(args) -> dict:
    from .heterodyne import analyze_heterodyne, phase_noise_correction, LaserNoise
    from .pipeline import HeterodyneSetup, heterodyne_spectrum

    run = Run(args, "heterodyne", [args.seed])
    sc = run.scenario
    if not sc.heterodyne:
        raise ValueError(f"{run.path}: no heterodyne section")
    setup = HeterodyneSetup.from_dict(sc.heterodyne)
    cfg = sc.loop
    corr = 0.0
    if setup.c_y > 0 and setup.probe_detuning:
        corr = phase_noise_correction(LaserNoise(c_y=setup.c_y), cfg.cavity, setup.probe_detuning, cfg.mode.omega_m)
    if args.data:
        spec = read_spectrum_csv(args.data)
        n_true = None
    else:
        n_true, spec, _ = heterodyne_spectrum(cfg, setup, args.seed, args.n_bar)
        run.file(write_spectrum_csv(spec, run.out / "heterodyne.csv"))
    rep = analyze_heterodyne(spec, setup.omega_het, setup.band_hz).as_dict()
    rep["n_true"] = n_true
    rep["phase_noise_correction_available"] = corr
    # difference stability across the configured sweep gains
    gains = sc.sweep.get("gains") or []
    if not args.data and gains:
        rows = []
        for g in gains:
            c = cfg.with_gain(g)
            try:
                n_g, sp, _ = heterodyne_spectrum(c, setup, args.seed, None)
                r = analyze_heterodyne(sp, setup.omega_het, setup.band_hz)
                fit = r.fit
                rows.append({"g_fb": g, "n_true": n_g, "n_fit": r.n_fit, "n_int": r.n_int,
                             "k_diff": fit.k_diff if fit else None,
                             "k_diff_sigma": fit.k_diff_sigma if fit else None, "errors": r.errors})
            except Exception as exc:
                rows.append({"g_fb": g, "errors": {"setup": f"{type(exc).__name__}: {exc}"}})
        rep["difference_stability"] = rows
        run.file(write_table_csv([{k: r.get(k) for k in ("g_fb", "n_true", "n_fit", "n_int", "k_diff", "k_diff_sigma")}
                                  for r in rows], run.out / "heterodyne_sweep.csv"))
    run.json("heterodyne.json", rep)
    print_json({k: rep[k] for k in ("n_true", "n_fit", "n_fit_sigma", "n_int", "errors")})
    run.close()
    return rep


def cmd_design(args) -> dict:
    from dataclasses import replace

    from .control import check_closed_loop_stability, design_filter, design_report, optimize_gain
    from .pipeline import design_spec_from_config

    run = Run(args, "design", [args.seed])
    sc = run.scenario
    spec = design_spec_from_config(sc.loop, sc.design)
    filt = design_filter(spec, seed=args.seed)
    cfg = replace(sc.loop, filter=filt)
    opt = optimize_gain(cfg, spec.gain_range)
    cfg = cfg.with_gain(opt.g_opt)
    stab = check_closed_loop_stability(cfg)
    rep = {"design": design_report(filt, spec), "g_opt": opt.g_opt, "n_min": opt.n_min,
           "stability": stab.as_dict()}
    out_sc = replace(sc, loop=cfg, name=f"{sc.name}_designed")
    run.file(config_mod.save(out_sc, run.out / "designed.yaml"))
    run.json("design.json", rep)
    print_json({"g_opt": opt.g_opt, "n_min": opt.n_min, "stable": stab.stable,
                "damping_deltas": [m["damping_delta_per_gain"] for m in rep["design"]["modes"]]})
    run.close()
    return rep


def cmd_calibrate(args) -> dict:
    from .inference import CalibrationTone, calibrate_displacement

    run = Run(args, "calibrate", [args.seed])
    sc = run.scenario
    cal = sc.calibration
    tone = CalibrationTone(float(cal.get("phi0_rad", 0.01)), TWO_PI * float(cal.get("tone_freq_hz", 60e6)))
    if args.data:
        raw = read_spectrum_csv(args.data)
    else:
        raw = synth_raw_readout(sc.loop, tone, args.seed, float(cal.get("volts_per_rad_s", 1e-9)))
        run.file(write_spectrum_csv(raw, run.out / "raw_readout.csv"))
    res = calibrate_displacement(raw, tone, sc.loop.coupling.g0, sc.loop.mode)
    run.file(write_spectrum_csv(res.spectrum, run.out / "calibrated_sx.csv"))
    rep = {"factor": res.factor, "tone_power": res.tone_power, "snr_db": res.snr_db,
           "peak_deviation_rad_s": tone.peak_deviation, "equivalent_x_amplitude": tone.displacement_amplitude(sc.loop.coupling.g0)}
    run.json("calibrate.json", rep)
    print_json(rep)
    run.close()
    return rep


def synth_raw_readout(cfg, tone, seed: int, volts_per_rad_s: float, n_bins: int = 1 << 16):
    """Raw readout PSD: mechanical peak plus a phase-modulation tone on a common transduction."""
    from .core import SpectrumTrace
    from .physics import closed_loop_measured_psd

    f_m = cfg.mode.freq_hz
    f_t = tone.omega_pm / TWO_PI
    df = 1.5 * max(f_t, 2 * f_m) / n_bins
    freqs = np.arange(1, n_bins + 1) * df
    # X PSD per Hz -> cavity frequency noise (rad/s)^2/Hz -> raw units
    s_x = closed_loop_measured_psd(cfg, TWO_PI * freqs)
    raw = volts_per_rad_s**2 * 2 * cfg.coupling.g0**2 * s_x
    i = int(np.argmin(np.abs(freqs - f_t)))
    raw[i] += volts_per_rad_s**2 * tone.equivalent_power / (freqs[1] - freqs[0])
    rng = np.random.default_rng(seed)
    raw = raw * rng.gamma(200, 1 / 200, raw.size)
    return SpectrumTrace(freqs, raw, 200.0, freqs[1] - freqs[0])


def cmd_characterize(args) -> dict:
    from .characterize import fit_optical_spring, fit_reflection, fit_ringdown

    run = Run(args, "characterize", [args.seed])
    sc = run.scenario
    cfg = sc.loop
    data = Path(args.data) if args.data else None
    if data is None:
        data = run.out
        write_characterization_data(cfg, sc.characterization, args.seed, data)
        for n in ("ringdown.csv", "reflection.csv", "spring.csv"):
            run.file(data / n)
    rd = _load_columns(data / "ringdown.csv")
    rf = _load_columns(data / "reflection.csv")
    sp = _load_columns(data / "spring.csv")
    ring = fit_ringdown(rd[:, 0], rd[:, 1], cfg.mode.omega_m, "amplitude")
    refl = fit_reflection(TWO_PI * rf[:, 0], rf[:, 1], overcoupled=sc.characterization.get("overcoupled", True))
    n_c0 = float(sc.characterization.get("n_c_resonant", cfg.coupling.n_c))
    spring = fit_optical_spring(TWO_PI * sp[:, 0], TWO_PI * sp[:, 1], refl.kappa, n_c0)
    rep = {"q_factor": ring.q_factor, "q_sigma": ring.q_sigma, "gamma_m_hz": ring.gamma_m / TWO_PI,
           "kappa_hz": refl.kappa / TWO_PI, "kappa_e_hz": refl.kappa_e / TWO_PI,
           "g0_hz": spring.g0 / TWO_PI, "g0_sigma_hz": spring.g0_sigma / TWO_PI}
    run.json("characterize.json", rep)
    print_json(rep)
    run.close()
    return rep


def write_characterization_data(cfg, opts: dict, seed: int, out: Path):
    """Synthetic ringdown, reflection and spring scans at the configured device values."""
    from .characterize import synth_reflection, synth_ringdown, synth_spring

    rng = np.random.default_rng(seed)
    mode: MechanicalMode = cfg.mode
    tau_amp = 2.0 / mode.gamma_m
    t = np.linspace(0, 3 * tau_amp, 400)
    y = synth_ringdown(mode.q_factor, mode.omega_m, t, "amplitude", noise=float(opts.get("ringdown_noise", 0.005)), rng=rng)
    _save_columns(out / "ringdown.csv", "time_s,amplitude", t, y)
    cav: OpticalCavity = cfg.cavity
    d = np.linspace(-4, 4, 401) * cav.kappa
    r = synth_reflection(cav, d, noise=float(opts.get("reflection_noise", 0.003)), rng=rng)
    _save_columns(out / "reflection.csv", "detuning_hz,reflection", d / TWO_PI, r)
    n_c0 = float(opts.get("n_c_resonant", cfg.coupling.n_c))
    ds = np.linspace(-2, 2, 41) * cav.kappa
    s = synth_spring(ds, cav.kappa, cfg.coupling.g0, n_c0)
    s = s + float(opts.get("spring_noise", 0.01)) * np.abs(s).max() * rng.standard_normal(s.size)
    _save_columns(out / "spring.csv", "detuning_hz,shift_hz", ds / TWO_PI, s / TWO_PI)


def _save_columns(path: Path, header: str, *cols):
    np.savetxt(path, np.column_stack(cols), delimiter=",", header=header, comments="", fmt="%.17g")


def _load_columns(path: Path) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(f"missing data file {path}")
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    return "nan" if v is None else f"{v:.4g}"


def print_json(obj):
    import json

    from .io import _json_default

    print(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coldloop", description=__doc__)
    p.add_argument("--version", action="version", version=f"coldloop {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    funcs = {"budget": cmd_budget, "simulate": cmd_simulate, "sweep": cmd_sweep, "fit": cmd_fit,
             "heterodyne": cmd_heterodyne, "design": cmd_design, "calibrate": cmd_calibrate,
             "characterize": cmd_characterize}
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="config file or reference name")
        s.add_argument("--seed", type=int, default=None if name == "sweep" else 0)
        s.add_argument("--workers", type=int, default=1)
        s.add_argument("--out", default="coldloop_out")
        s.add_argument("-v", "--verbose", action="store_true")
        if name in ("fit", "calibrate", "characterize", "heterodyne"):
            s.add_argument("--data", help="input file (directory for characterize)")
        if name == "sweep":
            s.add_argument("--gains", type=float, nargs="+")
        if name == "heterodyne":
            s.add_argument("--n-bar", type=float, dest="n_bar")
        s.set_defaults(func=funcs[name])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except config_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, FileNotFoundError) as exc:
        print(f"{args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
