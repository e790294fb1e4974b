"""Regenerate the shipped reference configs (filter sections come from design_filter)."""

from pathlib import Path

import numpy as np

from coldloop import config
from coldloop.control import DesignSpec, design_filter, optimize_gain
from coldloop.core import TWO_PI, MechanicalMode

OUT = Path(__file__).resolve().parents[1] / "src" / "coldloop" / "configs"

HIGHER = [(2.3, 0.3), (3.6, 0.2), (4.8, 0.1)]
HIGHER_Q = 1e6

COLUMNS = {
    "lhe_het": dict(f=1.045e6, q=5.1e7, t=18.3, p=0.79e-6, probe=1.3e-6, eta=0.42, tau=640e-9),
    "lhe_only": dict(f=1.045e6, q=5.1e7, t=18.3, p=0.76e-6, probe=0.0, eta=0.49, tau=640e-9),
    "ln2_het": dict(f=1.034e6, q=4.1e7, t=77.0, p=0.53e-6, probe=1.6e-6, eta=0.37, tau=680e-9),
}


def base_doc(name, c):
    doc = {
        "name": name,
        "mode": {"freq_hz": c["f"], "q_factor": c["q"], "m_eff_kg": 16e-15},
        "higher_modes": [{"freq_hz": r * c["f"], "q_factor": HIGHER_Q, "weight": w} for r, w in HIGHER],
        "cavity": {"kappa_hz": 8.8e9, "kappa_e_hz": 6.9e9, "detuning_hz": 0.0, "wavelength_m": 1550e-9},
        "coupling": {"g0_hz": 224e3, "input_power_w": c["p"], "eta_det": c["eta"]},
        "noise": {"t_bath_k": c["t"], "n_ba": "auto"},
        "channel": {"s_imp": "auto"},
        "filter": {"g_fb": 0.0, "tau_fb_s": c["tau"], "epsilon_fb": 1e-6, "sections": []},
    }
    if c["probe"]:
        doc["coupling"].update(probe_power_w=c["probe"], probe_detuning_hz=-2e9)
    return doc


def main():
    import yaml

    for name, c in COLUMNS.items():
        doc = base_doc(name, c)
        sc = config.loads(yaml.safe_dump(doc, sort_keys=False))
        cfg = sc.loop
        spec = DesignSpec(cfg.mode, cfg.higher_modes, c["tau"], (1e3, 1e7))
        filt = design_filter(spec)
        doc["filter"]["sections"] = [{"kind": "biquad", "b": list(s.b), "a": list(s.a)} for s in filt.sections]
        cfg = cfg.replace(filter=filt)
        opt = optimize_gain(cfg, (1e3, 3e6), n_scan=31)
        gains = np.geomspace(opt.g_opt / 30, opt.g_opt * 10, 8)
        doc["filter"]["g_fb"] = float(f"{opt.g_opt:.4g}")
        doc["design"] = {"gain_min": 1e3, "gain_max": 1e7, "phase_target_rad": float(np.pi / 2)}
        doc["sweep"] = {"gains": [float(f"{g:.4g}") for g in gains], "n_segments": 500, "seeds": [1]}
        doc["simulation"] = {"samples_per_period": 64, "window": "hann", "overlap": 0.5}
        if c["probe"]:
            doc["heterodyne"] = {"omega_het_hz": 2.81e6, "band_hz": [1.035e6, 1.05e6] if name.startswith("lhe")
                                 else [1.024e6, 1.039e6], "probe_detuning_hz": 2e9, "c_y": 430.0,
                                 "n_avg": 1000}
        doc["calibration"] = {"phi0_rad": 0.01, "tone_freq_hz": 60e6}
        (OUT / f"{name}.yaml").write_text(yaml.safe_dump(doc, sort_keys=False))
        print(name, f"n_c={sc.derived.get('n_c'):.1f}", f"n_probe={sc.loop.coupling.n_c_probe:.1f}",
              f"g_opt={opt.g_opt:.4g}", f"n_min={opt.n_min:.3f}", len(filt.sections), "sections")


if __name__ == "__main__":
    main()
