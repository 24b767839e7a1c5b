"""Checkpoint container: a directory holding `manifest.json` (names, shapes,
byte offsets, step counter, model config) and `weights.bin`, one flat
little-endian float32 blob covering parameters and buffers."""

import json
from pathlib import Path

import numpy as np

from .. import CHECKPOINT_MAGIC
from .params import ParamStore


def save_checkpoint(path, store, model_config=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for kind, table in (("param", store.params), ("buffer", store.buffers)):
        for name in sorted(table):
            arr = table[name].data if kind == "param" else table[name]
            flat = np.ascontiguousarray(arr, dtype="<f4")
            entries.append({
                "name": name,
                "kind": kind,
                "shape": list(arr.shape),
                "offset": offset,
            })
            chunks.append(flat.tobytes())
            offset += flat.nbytes
    manifest = {
        "magic": CHECKPOINT_MAGIC,
        "format_version": 1,
        "step": store.step,
        "model_config": model_config,
        "tensors": entries,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    (path / "weights.bin").write_bytes(b"".join(chunks))
    return path


def load_checkpoint(path):
    """Returns (manifest, {name: array}) with arrays reshaped to the
    manifest shapes. Raises with the offending file named on corruption."""
    path = Path(path)
    mpath = path / "manifest.json"
    bpath = path / "weights.bin"
    if not mpath.is_file():
        raise FileNotFoundError(f"checkpoint manifest missing: {mpath}")
    if not bpath.is_file():
        raise FileNotFoundError(f"checkpoint blob missing: {bpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"corrupt checkpoint manifest {mpath}: {e}") from e
    if manifest.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(
            f"{mpath}: bad magic {manifest.get('magic')!r}, expected {CHECKPOINT_MAGIC!r}")
    blob = bpath.read_bytes()
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(blob):
            raise ValueError(f"{bpath}: blob truncated at tensor {entry['name']!r}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(shape).copy()
    return manifest, tensors


def restore_into(store: ParamStore, manifest, tensors):
    """Copy checkpoint arrays into an existing store (shapes must match)."""
    for entry in manifest["tensors"]:
        name = entry["name"]
        table = store.params if entry["kind"] == "param" else store.buffers
        if name not in table:
            raise KeyError(f"checkpoint tensor {name!r} not present in model")
        dst = table[name].data if entry["kind"] == "param" else table[name]
        src = tensors[name]
        if dst.shape != src.shape:
            raise ValueError(
                f"shape mismatch for {name!r}: checkpoint {src.shape}, model {dst.shape}")
        dst[...] = src
    store.step = manifest["step"]
