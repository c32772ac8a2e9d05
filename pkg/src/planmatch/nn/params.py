"""Encoder architecture constants, parameter container, weights file format."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..graphs import FEATURE_DIM, FeatureStats

WEIGHTS_FORMAT_VERSION = 1


class WeightsError(ValueError):
    """Malformed or incompatible weights payload."""


@dataclass(frozen=True)
class ArchConfig:
    """Fixed shapes and rates of the shared MLP + two-layer attention encoder."""

    feature_dim: int = FEATURE_DIM
    mlp_hidden_dim: int = 64
    embed_dim: int = 64          # MLP output, first attention layer input
    n_heads: int = 4
    gat_hidden_dim: int = 64     # first layer output (heads concatenated)
    output_dim: int = 32         # second layer output (heads averaged)
    mlp_dropout_p: float = 0.15
    node_dropout_p: float = 0.15
    attn_dropout_p: float = 0.12
    leaky_slope: float = 0.2

    def validate(self) -> None:
        if self.gat_hidden_dim % self.n_heads != 0:
            raise WeightsError("gat_hidden_dim must divide evenly across heads")
        for name in ("mlp_dropout_p", "node_dropout_p", "attn_dropout_p"):
            p = getattr(self, name)
            if not (0.0 <= p < 1.0):
                raise WeightsError(f"{name} must be in [0, 1), got {p}")

    def layer_dims(self, layer: int) -> tuple[int, int]:
        """(input dim, per-head output dim) for attention layer 1 or 2."""
        if layer == 1:
            return self.embed_dim, self.gat_hidden_dim // self.n_heads
        if layer == 2:
            return self.gat_hidden_dim, self.output_dim
        raise WeightsError(f"no attention layer {layer}")

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        """Canonical tensor names to shapes, in canonical order."""
        self.validate()
        shapes: dict[str, tuple[int, ...]] = {
            "mlp.W1": (self.mlp_hidden_dim, self.feature_dim),
            "mlp.b1": (self.mlp_hidden_dim,),
            "mlp.W2": (self.embed_dim, self.mlp_hidden_dim),
            "mlp.b2": (self.embed_dim,),
        }
        for layer in (1, 2):
            d_in, d_head = self.layer_dims(layer)
            for h in range(self.n_heads):
                prefix = f"gat{layer}.h{h}"
                shapes[f"{prefix}.Wa"] = (d_head, 2 * d_in)
                shapes[f"{prefix}.a"] = (d_head,)
                shapes[f"{prefix}.Wh"] = (d_head, d_in)
        return shapes


def _glorot_fan(name: str, shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 1:
        # Attention vectors project d_head values to one logit.
        return shape[0], 1
    return shape[1], shape[0]


class EncoderParams:
    """Named float64 tensors of the encoder, in a fixed canonical order."""

    def __init__(self, arch: ArchConfig, tensors: dict[str, np.ndarray]):
        arch.validate()
        expected = arch.tensor_shapes()
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise WeightsError(f"tensor name mismatch: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise WeightsError(
                    f"tensor {name} has shape {tensors[name].shape}, expected {shape}"
                )
        self.arch = arch
        # Keep canonical ordering regardless of input dict order.
        self.tensors = {name: np.asarray(tensors[name], dtype=np.float64) for name in expected}

    @classmethod
    def initialize(cls, arch: ArchConfig = ArchConfig(), seed: int = 0) -> "EncoderParams":
        """Uniform Glorot weights, zero biases, drawn in canonical tensor order."""
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in arch.tensor_shapes().items():
            if name.endswith((".b1", ".b2")):
                tensors[name] = np.zeros(shape)
            else:
                fan_in, fan_out = _glorot_fan(name, shape)
                bound = np.sqrt(6.0 / (fan_in + fan_out))
                tensors[name] = rng.uniform(-bound, bound, size=shape)
        return cls(arch, tensors)

    def named(self):
        return self.tensors.items()

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(t) for name, t in self.tensors.items()}

    def n_scalars(self) -> int:
        return sum(t.size for t in self.tensors.values())


def save_weights(path: str | Path, params: EncoderParams, stats: FeatureStats) -> None:
    stats.validate()
    payload = {
        "format_version": WEIGHTS_FORMAT_VERSION,
        "arch": asdict(params.arch),
        "feature_stats": {"mean": stats.mean.tolist(), "std": stats.std.tolist()},
        "tensors": [
            {"name": name, "shape": list(t.shape), "data": t.ravel().tolist()}
            for name, t in params.named()
        ],
    }
    Path(path).write_text(json.dumps(payload) + "\n")


def load_weights(path: str | Path) -> tuple[EncoderParams, FeatureStats]:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise WeightsError(f"invalid JSON in {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != WEIGHTS_FORMAT_VERSION:
        raise WeightsError(
            f"unsupported weights format version {payload.get('format_version')!r}"
        )
    try:
        arch = ArchConfig(**payload["arch"])
        stats = FeatureStats(
            mean=np.asarray(payload["feature_stats"]["mean"], dtype=np.float64),
            std=np.asarray(payload["feature_stats"]["std"], dtype=np.float64),
        )
        entries = {e["name"]: e for e in payload["tensors"]}
    except (KeyError, TypeError) as exc:
        raise WeightsError(f"malformed weights payload: {exc}") from exc
    stats.validate()
    tensors = {}
    for name, shape in arch.tensor_shapes().items():
        if name not in entries:
            raise WeightsError(f"weights file is missing tensor {name}")
        entry = entries[name]
        if tuple(entry["shape"]) != shape:
            raise WeightsError(
                f"tensor {name} has shape {tuple(entry['shape'])}, expected {shape}"
            )
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.size != int(np.prod(shape)):
            raise WeightsError(f"tensor {name} data length does not match its shape")
        tensors[name] = data.reshape(shape)
    if len(entries) != len(tensors):
        extra = sorted(set(entries) - set(tensors))
        raise WeightsError(f"weights file has unexpected tensors {extra}")
    params = EncoderParams(arch, tensors)
    if not all(np.all(np.isfinite(t)) for t in params.tensors.values()):
        raise WeightsError("weights contain non-finite values")
    return params, stats
