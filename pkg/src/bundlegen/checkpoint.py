"""Parameter checkpoint files.

Line-oriented text container with a versioned magic header, a JSON metadata
line (seed, config hash, dtype, optional config), then one line per
parameter: name, comma-separated shape, and row-major values as C99 hex
floats, which round-trip float64 exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import ParamStore
from .types import DataError

MAGIC = "BGCKPT"
FORMAT_VERSION = 1


def save_checkpoint(path, store: ParamStore, *, seed: int, config_hash: str, config: dict | None = None) -> None:
    meta = {
        "seed": int(seed),
        "config_hash": config_hash,
        "dtype": str(np.dtype(store.dtype)),
    }
    if config is not None:
        meta["config"] = config
    lines = [f"{MAGIC} {FORMAT_VERSION}", json.dumps(meta, sort_keys=True)]
    for name, tensor in store.items():
        shape = ",".join(str(s) for s in tensor.data.shape)
        values = " ".join(float(v).hex() for v in tensor.data.reshape(-1))
        lines.append(f"{name}\t{shape}\t{values}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or not lines[0].startswith(MAGIC):
        raise DataError(f"{path}: not a checkpoint file (missing {MAGIC} header)")
    version = int(lines[0].split()[1])
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(lines[1])
    dtype = np.dtype(meta.get("dtype", "float64"))
    arrays: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        try:
            name, shape_s, values_s = line.split("\t")
            shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
            values = np.array([float.fromhex(v) for v in values_s.split()], dtype=np.float64)
            arrays[name] = values.reshape(shape).astype(dtype)
        except (ValueError, KeyError) as exc:
            raise DataError(f"{path}: line {lineno}: malformed parameter record ({exc})") from exc
    return meta, arrays
