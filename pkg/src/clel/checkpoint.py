"""Named-array container used for checkpoints, buffers and sample exports.

A container is a pair of files sharing a stem:

``<stem>.manifest``  UTF-8 text, one record per line::

    clel-container 1
    meta <key> <value>
    array <name> <dtype> <shape> <offset> <count>

  ``dtype`` is always ``<f4`` (little-endian float32), ``shape`` is a
  comma-separated list (``-`` for a scalar), ``offset`` and ``count`` are in
  elements from the start of the data file.

``<stem>.bin``  the arrays' raw bytes concatenated in manifest order.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = "clel-container 1"
DTYPE = "<f4"


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".manifest", ".bin") else p


def save_container(path, arrays: dict, meta: dict | None = None) -> Path:
    """Write ``arrays`` (cast to little-endian float32) and ``meta`` under ``path``."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    lines = [MAGIC]
    for k, v in (meta or {}).items():
        v = str(v)
        if any(c.isspace() for c in str(k)) or "\n" in v:
            raise ValueError(f"meta entry {k!r} is not representable")
        lines.append(f"meta {k} {v}")
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"array name {name!r} contains whitespace")
        a = np.asarray(arr, dtype=DTYPE, order="C")
        shape = ",".join(str(s) for s in a.shape) or "-"
        lines.append(f"array {name} {DTYPE} {shape} {offset} {a.size}")
        chunks.append(a.tobytes())
        offset += a.size
    stem.with_suffix(".manifest").write_text("\n".join(lines) + "\n")
    stem.with_suffix(".bin").write_bytes(b"".join(chunks))
    return stem


def load_container(path):
    """Read a container written by :func:`save_container`.

    Returns:
        ``(arrays, meta)``; ``arrays`` maps names to float32 numpy arrays and
        ``meta`` maps keys to strings.
    """
    stem = _stem(path)
    try:
        lines = stem.with_suffix(".manifest").read_text().splitlines()
        raw = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype=DTYPE)
    except OSError as err:
        raise DataError(f"cannot read container {stem}: {err}") from err
    if not lines or lines[0] != MAGIC:
        raise DataError(f"{stem}.manifest: bad header")
    arrays, meta = {}, {}
    for line in lines[1:]:
        if not line.strip():
            continue
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            k, _, v = rest.partition(" ")
            meta[k] = v
        elif kind == "array":
            name, dtype, shape, offset, count = rest.split(" ")
            if dtype != DTYPE:
                raise DataError(f"{stem}: unsupported dtype {dtype}")
            shape = () if shape == "-" else tuple(int(s) for s in shape.split(","))
            offset, count = int(offset), int(count)
            if offset + count > raw.size:
                raise DataError(f"{stem}: array {name} exceeds data file")
            arrays[name] = raw[offset : offset + count].reshape(shape).copy()
        else:
            raise DataError(f"{stem}: unknown record {kind!r}")
    return arrays, meta


def module_arrays(module, prefix: str) -> dict:
    """Flatten a torch module's state dict into ``prefix/name`` float arrays."""
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_arrays(module, arrays: dict, prefix: str) -> None:
    import torch

    state = module.state_dict()
    missing = [k for k in state if f"{prefix}/{k}" not in arrays]
    if missing:
        raise DataError(f"container lacks {prefix}/{missing[0]}")
    module.load_state_dict({k: torch.from_numpy(arrays[f"{prefix}/{k}"]).to(v.dtype) for k, v in state.items()})
