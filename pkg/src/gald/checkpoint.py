"""Checkpoints: a directory of GTF tensors plus a JSON manifest."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .errors import CorruptFile, ShapeMismatch
from .gtf import load_gtf, save_gtf
from .layers import LayerParams
from .tensor import Tensor

MANIFEST = "manifest.json"


def save_checkpoint(path, params: LayerParams, cfg) -> None:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, t in params.items():
        save_gtf(d / f"{name}.gtf", t.data)
        tensors[name] = {"shape": list(t.shape), "trainable": t.requires_grad}
    # run locations are left out so the digest depends only on the model
    config = {k: v for k, v in cfg.to_dict().items() if k not in ("dataset", "output_dir")}
    manifest = {"tensors": tensors, "config": config, "seed": params.seed}
    (d / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple:
    """Return (params, manifest dict)."""
    d = Path(path)
    try:
        manifest = json.loads((d / MANIFEST).read_text())
    except ValueError as e:
        raise CorruptFile(f"{d}: bad manifest ({e})") from None
    store = {}
    for name, meta in manifest["tensors"].items():
        arr = load_gtf(d / f"{name}.gtf")
        if list(arr.shape) != meta["shape"]:
            raise CorruptFile(f"{name}: shape {arr.shape} disagrees with manifest {meta['shape']}")
        store[name] = Tensor(arr, requires_grad=meta["trainable"])
    return LayerParams(store, seed=manifest.get("seed")), manifest


def check_compatible(params: LayerParams, reference: LayerParams) -> None:
    """Raise ShapeMismatch unless both hold the same names with the same shapes."""
    a = {k: v.shape for k, v in params.items()}
    b = {k: v.shape for k, v in reference.items()}
    if a.keys() != b.keys():
        diff = sorted(set(a) ^ set(b))
        raise ShapeMismatch(f"checkpoint parameters differ from config: {diff[:5]}")
    bad = [k for k in a if a[k] != b[k]]
    if bad:
        raise ShapeMismatch(f"checkpoint shapes differ from config for {bad[:5]}")


def directory_digest(path) -> str:
    """sha256 over (relative name, bytes) of every file under ``path``."""
    h = hashlib.sha256()
    root = Path(path)
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()
