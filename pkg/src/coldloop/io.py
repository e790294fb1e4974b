"""File formats: spectra as CSV, time traces as a text header plus raw samples."""

from __future__ import annotations

import io
import json
import math
from pathlib import Path

import numpy as np

from .core import SpectrumTrace
from .spectra import TimeTrace

CSV_HEADER = "freq_hz,psd_shot_units"
TRACE_MAGIC = "coldloop-trace v1"


class FormatError(ValueError):
    pass


def write_spectrum_csv(spec: SpectrumTrace, path) -> Path:
    path = Path(path)
    meta = {"n_avg": None if not math.isfinite(spec.n_avg) else spec.n_avg, "rbw": spec.rbw,
            "corr_factor": spec.corr_factor}
    buf = io.StringIO()
    buf.write(f"# {json.dumps(meta, sort_keys=True)}\n{CSV_HEADER}\n")
    for f, p in zip(spec.freqs, spec.psd):
        buf.write(f"{float(f)!r},{float(p)!r}\n")
    path.write_text(buf.getvalue())
    return path


def read_spectrum_csv(path) -> SpectrumTrace:
    path = Path(path)
    meta = {}
    rows = []
    header_seen = False
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                try:
                    meta.update(json.loads(line[1:]))
                except json.JSONDecodeError:
                    pass
                continue
            if not header_seen:
                if line.replace(" ", "") != CSV_HEADER:
                    raise FormatError(f"{path}:{lineno}: expected header '{CSV_HEADER}'")
                header_seen = True
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected two columns")
            try:
                rows.append((float(parts[0]), float(parts[1])))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not header_seen:
        raise FormatError(f"{path}: missing header")
    arr = np.array(rows, dtype=float).reshape(-1, 2)
    n_avg = meta.get("n_avg")
    return SpectrumTrace(arr[:, 0], arr[:, 1], np.inf if n_avg is None else float(n_avg),
                         float(meta.get("rbw", 0.0)), float(meta.get("corr_factor", 1.0)))


def write_time_trace(trace: TimeTrace, path) -> Path:
    """One JSON header line, then little-endian float64 samples."""
    path = Path(path)
    head = {"format": TRACE_MAGIC, "fs": trace.fs, "n": int(trace.samples.size), "label": trace.label,
            "dtype": "<f8"}
    with path.open("wb") as fh:
        fh.write((json.dumps(head, sort_keys=True) + "\n").encode())
        fh.write(np.ascontiguousarray(trace.samples, dtype="<f8").tobytes())
    return path


def read_time_trace(path) -> TimeTrace:
    path = Path(path)
    with path.open("rb") as fh:
        line = fh.readline()
        try:
            head = json.loads(line.decode())
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise FormatError(f"{path}: unreadable trace header") from None
        if head.get("format") != TRACE_MAGIC:
            raise FormatError(f"{path}: not a {TRACE_MAGIC} file")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != head["n"]:
        raise FormatError(f"{path}: header says {head['n']} samples, found {data.size}")
    return TimeTrace(float(head["fs"]), data.astype(float), head.get("label", "measurement"))


def write_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def write_table_csv(rows: list[dict], path, columns: list[str] | None = None) -> Path:
    path = Path(path)
    if not rows:
        path.write_text("")
        return path
    columns = columns or list(rows[0])
    lines = [",".join(columns)]
    for r in rows:
        lines.append(",".join("" if r.get(c) is None else repr(float(r[c])) if isinstance(r.get(c), (int, float, np.floating))
                              else str(r[c]) for c in columns))
    path.write_text("\n".join(lines) + "\n")
    return path
