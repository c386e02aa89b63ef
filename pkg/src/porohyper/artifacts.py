"""Hash-addressed, append-only output directories with a run manifest."""
from __future__ import annotations

import hashlib
import json
import platform
import time
from pathlib import Path

from .exceptions import PorohyperError

MANIFEST = "manifest.json"


class ArtifactError(PorohyperError):
    pass


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def versions():
    import numpy
    import scipy
    import sklearn

    from . import __version__

    return {"porohyper": __version__, "python": platform.python_version(), "numpy": numpy.__version__,
            "scipy": scipy.__version__, "scikit-learn": sklearn.__version__}


class OutputDir:
    """A fresh directory that records the hash of every file written to it."""

    def __init__(self, path, command):
        self.path = Path(path)
        if self.path.exists() and any(self.path.iterdir()):
            raise ArtifactError(f"output directory {self.path} is not empty; artifacts are never overwritten")
        self.path.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.outputs = {}
        self.inputs = {}
        self.info = {}
        self._t0 = time.perf_counter()

    def write_text(self, name, text):
        target = self.path / name
        if target.exists():
            raise ArtifactError(f"{target} already written in this run")
        target.write_text(text, newline="\n")
        self.outputs[name] = sha256_file(target)
        return target

    def adopt(self, name):
        """Record a file that a library routine wrote directly."""
        self.outputs[name] = sha256_file(self.path / name)

    def add_input(self, name, path):
        path = Path(path)
        if path.is_dir():
            man = read_manifest(path)
            self.inputs[name] = {"path": str(path), "manifest_sha256": sha256_file(path / MANIFEST),
                                 "outputs": man.get("outputs", {})}
        else:
            self.inputs[name] = {"path": str(path), "sha256": sha256_file(path)}

    def finish(self, config, status="complete", error=None, argv=None):
        man = {
            "command": self.command,
            "status": status,
            "argv": argv or [],
            "config": config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "info": self.info,
            "versions": versions(),
            "wall_time_s": round(time.perf_counter() - self._t0, 3),
        }
        if error is not None:
            man["error"] = error
        (self.path / MANIFEST).write_text(json.dumps(man, indent=2, sort_keys=True, default=_jsonable) + "\n")
        return man


def _jsonable(v):
    import numpy as np

    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, Path):
        return str(v)
    raise TypeError(f"not serialisable: {type(v).__name__}")


def read_manifest(directory):
    p = Path(directory) / MANIFEST
    if not p.exists():
        raise ArtifactError(f"{directory}: no {MANIFEST}; not an artifact directory")
    man = json.loads(p.read_text())
    if man.get("status") != "complete":
        raise ArtifactError(f"{directory}: artifact is flagged {man.get('status')!r}")
    return man


def verify(directory):
    """Check the recorded output hashes of an artifact directory."""
    man = read_manifest(directory)
    bad = [n for n, h in man["outputs"].items() if sha256_file(Path(directory) / n) != h]
    if bad:
        raise ArtifactError(f"{directory}: files changed since they were written: {bad}")
    return man


def read_table(path, sep="\t"):
    """Header plus float rows of a delimiter-separated table (``#`` lines skipped)."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    header = lines[0].split(sep)
    rows = [[float(v) for v in ln.split(sep)] for ln in lines[1:]]
    return header, rows


def write_kv(pairs, sep="\t"):
    out = [f"key{sep}value"]
    for k, v in pairs:
        if isinstance(v, float):
            v = format(v, ".17g")
        out.append(f"{k}{sep}{v}")
    return "\n".join(out) + "\n"


def read_kv(path, sep="\t"):
    lines = Path(path).read_text().splitlines()[1:]
    out = {}
    for ln in lines:
        k, _, v = ln.partition(sep)
        out[k] = v
    return out
