"""Deterministic serialization of reports, traces and density curves.

Floats are written with 17 significant digits so identical runs produce
byte-identical files. Non-finite floats become ``null``.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from typing import Any

import numpy as np

from .model import ModelDefinition
from .sampler import SamplerConfig, TraceStore

SCHEMA_VERSION = 1


def format_float(x: float) -> str:
    return format(float(x), ".17g")


def _encode(obj: Any, indent: int, level: int) -> str:
    pad = "\n" + " " * (indent * (level + 1))
    end = "\n" + " " * (indent * level)
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return "null" if obj is None else ("true" if obj else "false")
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_float(obj) if math.isfinite(obj) else "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{json.dumps(str(k))}: {_encode(v, indent, level + 1)}" for k, v in obj.items()]
        return "{" + pad + ("," + pad).join(items) + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = obj.tolist() if isinstance(obj, np.ndarray) else obj
        if not seq:
            return "[]"
        return "[" + pad + ("," + pad).join(_encode(v, indent, level + 1) for v in seq) + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj: Any, indent: int = 2) -> str:
    return _encode(obj, indent, 0) + "\n"


def versioned(payload: dict) -> dict:
    return {"schema": SCHEMA_VERSION, **payload}


def write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(versioned(payload)))


def model_digest(model: ModelDefinition) -> str:
    h = hashlib.sha256()
    h.update(",".join(model.design.columns).encode())
    h.update(np.ascontiguousarray(model.design.values, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(model.design.patient_of_row, dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(model.response, dtype="<f8").tobytes())
    h.update(model.prior.to_text().encode())
    return h.hexdigest()


def trace_csv(trace: TraceStore, chain: int, include_gamma: bool = False) -> str:
    names = [n for n in trace.names if include_gamma or not n.startswith("gamma[")]
    idx = [trace.index(n) for n in names]
    lines = [",".join(names)]
    for row in trace.draws[chain][:, idx]:
        lines.append(",".join(format_float(v) for v in row))
    return "\n".join(lines) + "\n"


def write_traces(out_dir, trace: TraceStore, model: ModelDefinition, config: SamplerConfig,
                 include_gamma: bool = False, extra: dict = None) -> list:
    """Write ``trace_<c>.csv`` per chain (c from 1) and ``manifest.json``."""
    paths = []
    for c in range(trace.n_chains):
        path = os.path.join(out_dir, f"trace_{c + 1}.csv")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(trace_csv(trace, c, include_gamma))
        paths.append(path)
    columns = [n for n in trace.names if include_gamma or not n.startswith("gamma[")]
    manifest = {
        "seed": int(config.seed),
        "config": config.as_dict(),
        "columns": columns,
        "files": [os.path.basename(p) for p in paths],
        "model_digest": model_digest(model),
        "prior": model.prior.as_dict(),
    }
    if extra:
        manifest.update(extra)
    write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return paths


def read_trace_csv(path) -> tuple:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    values = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return tuple(header), values


def density_csv(grid, density) -> str:
    lines = ["grid,density"]
    lines += [f"{format_float(g)},{format_float(d)}" for g, d in zip(grid, density)]
    return "\n".join(lines) + "\n"


def summary_payload(summary: dict, columns) -> dict:
    """Group a fit summary into coefficient, variance and hyperparameter sections."""
    beta = {c: summary[c].as_dict() for c in columns}
    variance = {n: summary[n].as_dict() for n in ("sigma_gamma", "sigma_score", "tau_beta") if n in summary}
    hyper = {n: summary[n].as_dict() for n in ("mu_beta",) if n in summary}
    return {"beta": beta, "variance": variance, "hyper": hyper}
