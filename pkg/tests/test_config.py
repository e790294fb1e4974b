import math
from dataclasses import astuple

import numpy as np
import pytest

from coldloop import config
from coldloop.config import ConfigError
from coldloop.core import TWO_PI

MINIMAL = """\
name: minimal
mode:
  freq_hz: 1.0e5
  q_factor: 1.0e4
cavity:
  kappa_hz: 1.0e9
  kappa_e_hz: 6.0e8
coupling:
  g0_hz: 1.0e5
  n_c: 100
  eta_det: 0.5
noise:
  n_th: 50
"""


def _flat(obj):
    out = []
    for v in astuple(obj) if hasattr(obj, "__dataclass_fields__") else obj:
        if isinstance(v, (tuple, list)):
            out.extend(_flat(v))
        elif isinstance(v, (int, float)) and v is not None:
            out.append(float(v))
    return out


@pytest.mark.parametrize("name", config.REFERENCE_NAMES)
def test_reference_round_trip(name, tmp_path):
    sc = config.load_reference(name)
    again = config.load(config.save(sc, tmp_path / f"{name}.yaml"))
    a, b = _flat(sc.loop), _flat(again.loop)
    assert len(a) == len(b)
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_reference_values_derived(lhe_het):
    d = lhe_het.derived
    assert d["n_th"] == pytest.approx(3.65e5, rel=0.01)
    assert lhe_het.loop.mode.omega_m == pytest.approx(TWO_PI * 1.045e6)
    assert {"n_c", "n_ba", "s_imp"} <= set(d)


def test_minimal_defaults():
    sc = config.loads(MINIMAL)
    loop = sc.loop
    assert loop.filter.g_fb == 0.0
    assert loop.noise.n_ba > 0
    assert loop.channel.s_imp > 0
    assert sc.name == "minimal"


def test_unknown_reference():
    with pytest.raises(KeyError):
        config.load_reference("nope")


def test_missing_key_reports_name_and_line():
    text = MINIMAL.replace("  g0_hz: 1.0e5\n", "")
    with pytest.raises(ConfigError) as exc:
        config.loads(text, "x.yaml")
    assert exc.value.key == "coupling.g0_hz"
    assert "coupling.g0_hz" in str(exc.value)
    assert exc.value.line == 8  # the enclosing section


def test_bad_value_reports_line():
    text = MINIMAL.replace("q_factor: 1.0e4", "q_factor: lots")
    with pytest.raises(ConfigError) as exc:
        config.loads(text)
    assert exc.value.key == "mode.q_factor"
    assert exc.value.line == 4


@pytest.mark.parametrize("old,new,key", [
    ("eta_det: 0.5", "eta_det: 1.5", "coupling.eta_det"),
    ("kappa_e_hz: 6.0e8", "kappa_e_hz: 2.0e9", "cavity.kappa_e_hz"),
    ("n_th: 50", "n_th: -1", "noise.n_th"),
    ("n_th: 50", "n_th: 50\n  colour: blue", "noise.colour"),
])
def test_schema_violations(old, new, key):
    with pytest.raises(ConfigError) as exc:
        config.loads(MINIMAL.replace(old, new))
    assert exc.value.key == key


def test_zero_efficiency_needs_explicit_imprecision():
    with pytest.raises(ConfigError, match="s_imp"):
        config.loads(MINIMAL.replace("eta_det: 0.5", "eta_det: 0.0"))
    sc = config.loads(MINIMAL.replace("eta_det: 0.5", "eta_det: 0.0") + "channel:\n  s_imp: 0.01\n")
    assert sc.loop.channel.s_imp == 0.01


def test_invalid_yaml_has_line():
    with pytest.raises(ConfigError) as exc:
        config.loads("mode:\n  freq_hz: [1,\n")
    assert exc.value.line is not None


def test_config_dir_env(tmp_path, monkeypatch):
    (tmp_path / "mine.yaml").write_text(MINIMAL)
    monkeypatch.setenv(config.CONFIG_DIR_ENV, str(tmp_path))
    assert config.load("mine").name == "minimal"
    with pytest.raises(FileNotFoundError):
        config.load("absent")


def test_power_and_temperature_inputs():
    text = MINIMAL.replace("n_c: 100", "input_power_w: 1.0e-6").replace("n_th: 50", "t_bath_k: 4.0")
    sc = config.loads(text)
    assert sc.derived["n_c"] > 0
    assert math.isclose(sc.loop.noise.n_th, sc.derived["n_th"])
