"""Checkpoints: packed little-endian float32 blocks plus a JSON manifest."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .config import TrainConfig
from .model import Perscen, param_shapes
from .schema import FeatureSchema

PARAMS_FILE = "params.bin"
MANIFEST_FILE = "manifest.json"


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Perscen, path, extra: dict | None = None) -> Path:
    """Write ``params.bin`` and ``manifest.json`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blocks = []
    chunks = []
    offset = 0
    for name, t in model.params.items():
        raw = t.data.astype("<f4").tobytes()
        blocks.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": "float32-le",
        "config": model.config.to_dict(),
        "schema": model.schema.to_dict(),
        "blocks": blocks,
    }
    if extra:
        manifest["extra"] = extra
    (path / PARAMS_FILE).write_bytes(b"".join(chunks))
    (path / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def read_manifest(path) -> dict:
    f = Path(path) / MANIFEST_FILE
    if not f.exists():
        raise CheckpointError(f"no checkpoint manifest at {f}")
    return json.loads(f.read_text(encoding="utf-8"))


def load_checkpoint(path, config: TrainConfig | None = None, schema: FeatureSchema | None = None) -> Perscen:
    """Rebuild a model; ``config``/``schema`` override the manifest and are shape-checked."""
    path = Path(path)
    manifest = read_manifest(path)
    cfg = config or TrainConfig.from_dict(manifest["config"])
    schema = schema or FeatureSchema.from_dict(manifest["schema"])
    raw = (path / PARAMS_FILE).read_bytes()
    expected = param_shapes(schema, cfg)
    stored = {b["name"]: b for b in manifest["blocks"]}
    problems = []
    for name, shape in expected.items():
        if name not in stored:
            problems.append(f"{name}: missing (expected {list(shape)})")
        elif tuple(stored[name]["shape"]) != tuple(shape):
            problems.append(f"{name}: stored {stored[name]['shape']} != expected {list(shape)}")
    problems += [f"{name}: unexpected block" for name in stored if name not in expected]
    if problems:
        raise CheckpointError("checkpoint does not match the model layout: " + "; ".join(problems))
    params = {}
    for name in expected:
        b = stored[name]
        count = int(np.prod(b["shape"])) if b["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=b["offset"])
        params[name] = Tensor(arr.astype(np.float64).reshape(b["shape"]), requires_grad=True, name=name)
    return Perscen(schema, cfg, params)


def checkpoint_size_bound(model: Perscen) -> int:
    """Parameter bytes at 4 bytes per value."""
    return 4 * model.parameter_count()
