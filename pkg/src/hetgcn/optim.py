"""Parameter store, initialization, Adam and the checkpoint format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, get_default_dtype


class CheckpointError(ValueError):
    """Checkpoint files disagree with each other or with the model."""


class ParamStore(dict):
    """Ordered ``name -> Tensor`` mapping of learnable parameters.

    Insertion order is the serialization order.
    """

    def __init__(self, seed: int = 0):
        super().__init__()
        self.rng = np.random.default_rng(seed)

    def weight(self, name: str, fan_in: int, fan_out: int) -> Tensor:
        bound = np.sqrt(1.0 / fan_in)
        return self._add(name, self.rng.uniform(-bound, bound, size=(fan_in, fan_out)))

    def square(self, name: str, d: int) -> Tensor:
        return self.weight(name, d, d)

    def bias(self, name: str, n: int) -> Tensor:
        return self._add(name, np.zeros(n))

    def _add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self[name] = t
        return t

    def count(self) -> int:
        return int(sum(t.data.size for t in self.values()))

    def zero_(self) -> "ParamStore":
        for t in self.values():
            t.data[...] = 0.0
        return self

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for k, t in self.items():
            if k not in values:
                raise CheckpointError(f"missing parameter {k!r}")
            v = np.asarray(values[k])
            if v.shape != t.shape:
                raise CheckpointError(f"parameter {k!r}: expected shape {t.shape}, got {v.shape}")
            t.data = v.astype(get_default_dtype(), copy=True)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore, grads: dict[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def save_checkpoint(path: str | Path, params: ParamStore, config: dict | None = None) -> tuple[Path, Path]:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float64).

    The manifest lists ``name -> shape`` in the order the values appear in
    the binary file.
    """
    path = Path(path)
    manifest = {
        "format": "hetgcn-checkpoint/1",
        "dtype": "<f8",
        "tensors": {k: list(t.shape) for k, t in params.items()},
        "config": config or {},
    }
    json_path, bin_path = path.with_suffix(".json"), path.with_suffix(".bin")
    json_path.write_text(json.dumps(manifest, indent=1, sort_keys=False) + "\n")
    flat = [np.asarray(t.data, dtype="<f8").ravel() for t in params.values()]
    blob = np.concatenate(flat) if flat else np.zeros(0, dtype="<f8")
    bin_path.write_bytes(blob.astype("<f8").tobytes())
    return json_path, bin_path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns ``(name -> array, embedded config)``."""
    path = Path(path)
    try:
        manifest = json.loads(path.with_suffix(".json").read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: invalid manifest ({exc})") from exc
    if manifest.get("dtype") != "<f8" or not isinstance(manifest.get("tensors"), dict):
        raise CheckpointError(f"{path}: unsupported checkpoint manifest")
    blob = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    values, offset = {}, 0
    for name, shape in manifest["tensors"].items():
        n = int(np.prod(shape)) if shape else 1
        if offset + n > blob.size:
            raise CheckpointError(f"checkpoint binary too short at tensor {name!r}")
        values[name] = blob[offset:offset + n].reshape(shape).astype(np.float64)
        offset += n
    if offset != blob.size:
        raise CheckpointError(f"checkpoint binary has {blob.size - offset} trailing values")
    return values, manifest.get("config", {})
