"""Plain-text artifacts: CSV tables, mixture files and run manifests."""
from __future__ import annotations

import json
import os
import subprocess
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .integrate import Trajectory
from .kernels import ErlangMixture

__all__ = [
    "write_csv",
    "read_csv",
    "write_trajectory",
    "write_mixture",
    "read_mixture",
    "write_manifest",
    "version_string",
    "parse_assignments",
]

FLOAT_FMT = "%.17g"


def _atomic_write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return FLOAT_FMT % value
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    text = str(value)
    if any(ch in text for ch in ',"\n'):
        text = '"' + text.replace('"', '""') + '"'
    return text


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """Comma separated, header first, floats with 17 significant digits."""
    lines = [",".join(header)]
    for row in rows:
        row = list(row)
        if len(row) != len(header):
            raise ValueError(f"row has {len(row)} fields, header has {len(header)}")
        lines.append(",".join(_fmt(v) for v in row))
    _atomic_write(path, "\n".join(lines) + "\n")
    return Path(path)


def read_csv(path):
    """Numeric CSV written by :func:`write_csv`; returns ``(header, array)``."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


def write_trajectory(path, traj: Trajectory, names: Sequence[str], memory_names: Sequence[str] = ()):
    """``time`` followed by state columns and optional memory columns."""
    cols = [traj.times[:, None], traj.states]
    header = ["time", *names]
    if memory_names:
        if traj.memory is None:
            raise ValueError("trajectory carries no memory outputs")
        cols.append(np.atleast_2d(traj.memory.T).T)
        header += list(memory_names)
    return write_csv(path, header, np.hstack(cols))


def write_mixture(path, mixture: ErlangMixture) -> Path:
    """First line the rate, then one coefficient per line."""
    lines = [FLOAT_FMT % mixture.rate] + [FLOAT_FMT % c for c in mixture.coefficients]
    _atomic_write(path, "\n".join(lines) + "\n")
    return Path(path)


def read_mixture(path) -> ErlangMixture:
    with open(path, encoding="utf-8") as fh:
        values = [float(line) for line in fh if line.strip()]
    if len(values) < 2:
        raise ValueError(f"{path}: a mixture file needs a rate and at least one coefficient")
    return ErlangMixture(values[0], np.array(values[1:]))


def version_string() -> str:
    """``git describe`` of the source tree, or the package version outside a checkout."""
    from . import __version__

    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], cwd=here,
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(path, manifest: dict) -> Path:
    _atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
    return Path(path)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return str(obj)


def _parse_value(text: str):
    text = text.strip()
    if "," in text:
        return [_parse_value(t) for t in text.split(",") if t.strip()]
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    return text


def parse_assignments(items: Iterable[str], source: str = "argument") -> dict:
    """``key=value`` strings to a dict; comma separated values become lists."""
    out = {}
    for item in items:
        item = item.strip()
        if not item or item.startswith("#"):
            continue
        if "=" not in item:
            raise ValueError(f"{source}: expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip().replace("-", "_")
        if not key:
            raise ValueError(f"{source}: empty key in {item!r}")
        out[key] = _parse_value(value)
    return out
