"""Weights as a flat little-endian float64 blob plus a JSON manifest."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .gat import GatWeights
from .recurrent import AttentionLSTM, CellWeights, ModelConfig


def save_arrays(arrays: dict[str, np.ndarray], prefix, meta: dict | None = None) -> tuple[Path, Path]:
    prefix = Path(prefix)
    blob_path = prefix.with_suffix(".bin")
    man_path = prefix.with_suffix(".json")
    entries = []
    offset = 0
    with open(blob_path, "wb") as fh:
        for name in sorted(arrays):
            a = np.ascontiguousarray(arrays[name], dtype="<f8")
            fh.write(a.tobytes())
            entries.append({"name": name, "shape": list(a.shape), "offset": offset})
            offset += a.size
    manifest = {"tensors": entries, "dtype": "<f8", "meta": meta or {}}
    man_path.write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return blob_path, man_path


def load_arrays(prefix) -> tuple[dict[str, np.ndarray], dict]:
    prefix = Path(prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    blob = np.fromfile(prefix.with_suffix(".bin"), dtype=manifest["dtype"])
    out = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        out[e["name"]] = blob[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(float)
    return out, manifest["meta"]


def save_model(model: AttentionLSTM, prefix, extra: dict | None = None) -> tuple[Path, Path]:
    meta = {"config": model.config.to_dict(), "seed": model.seed, **(extra or {})}
    return save_arrays(model.params(), prefix, meta)


def load_model(prefix) -> tuple[AttentionLSTM, dict]:
    arrays, meta = load_arrays(prefix)
    cfg = ModelConfig(**meta["config"])
    layers = []
    for l in range(cfg.layers):
        gat = GatWeights(arrays[f"l{l}.W_node"], arrays[f"l{l}.W_edge"], arrays[f"l{l}.a"],
                         cfg.slope, cfg.activation)
        layers.append(CellWeights(gat, arrays[f"l{l}.b"], arrays.get(f"l{l}.U")))
    model = AttentionLSTM(cfg, layers, arrays["readout.W"], arrays["readout.b"], meta.get("seed", 0))
    return model, meta


def save_gat(w: GatWeights, prefix, seed: int | None = None) -> tuple[Path, Path]:
    meta = {"heads": w.heads, "slope": w.slope, "activation": w.activation, "seed": seed}
    return save_arrays(w.params(), prefix, meta)


def load_gat(prefix) -> GatWeights:
    arrays, meta = load_arrays(prefix)
    return GatWeights(arrays["W_node"], arrays["W_edge"], arrays["a"], meta["slope"], meta["activation"])
