"""Small classifiers: an MLP and a compact conv-relu-pool CNN (no batch norm)."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ModelParams, ShapeError, Tensor, as_tensor, get_default_dtype
from .autodiff import ops

__all__ = [
    "ModelSpec",
    "init_params",
    "forward",
    "loss_ce",
    "error_rate",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``kind="mlp"`` uses ``hidden`` as the list of hidden widths.
    ``kind="smallcnn"`` uses ``channels`` for two 3x3 conv blocks (each
    followed by relu and 2x2 max pooling) and ``hidden`` for the widths of
    the fully connected head.
    """

    kind: str = "smallcnn"
    input_shape: tuple = (1, 28, 28)
    num_classes: int = 10
    hidden: tuple = (32,)
    channels: tuple = (8, 16)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(s) for s in self.hidden))
        object.__setattr__(self, "channels", tuple(int(s) for s in self.channels))
        if self.kind not in ("mlp", "smallcnn"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if len(self.input_shape) != 3:
            raise ValueError("input_shape must be (channels, height, width)")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.kind == "smallcnn":
            _, h, w = self.input_shape
            pool = 2 ** len(self.channels)
            if h % pool or w % pool:
                raise ValueError(f"smallcnn needs spatial size divisible by {pool}, got {(h, w)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def _layer_shapes(spec: ModelSpec) -> list[tuple[str, tuple]]:
    c, h, w = spec.input_shape
    shapes = []
    if spec.kind == "smallcnn":
        cin = c
        for i, cout in enumerate(spec.channels, start=1):
            shapes.append((f"conv{i}.weight", (cout, cin, 3, 3)))
            shapes.append((f"conv{i}.bias", (cout,)))
            cin = cout
            h, w = h // 2, w // 2
        fan_in = cin * h * w
    else:
        fan_in = c * h * w
    widths = list(spec.hidden) + [spec.num_classes]
    for i, width in enumerate(widths, start=1):
        shapes.append((f"fc{i}.weight", (width, fan_in)))
        shapes.append((f"fc{i}.bias", (width,)))
        fan_in = width
    return shapes


def init_params(spec: ModelSpec, seed: int = 0) -> ModelParams:
    """He-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    dtype = get_default_dtype()
    out = []
    for name, shape in _layer_shapes(spec):
        if name.endswith("bias"):
            out.append((name, np.zeros(shape, dtype=dtype)))
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            out.append((name, rng.uniform(-bound, bound, size=shape).astype(dtype)))
    return ModelParams(out)


def _linear(x, weight, bias):
    return ops.matmul(x, ops.swap_last(weight)) + bias


def forward(spec: ModelSpec, params: ModelParams, x) -> Tensor:
    """Logits of shape (batch, num_classes).  Softmax lives in :func:`loss_ce`."""
    x = as_tensor(x)
    if tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeError(f"model expects input (*, {spec.input_shape}), got {x.shape}")
    b = x.shape[0]
    if spec.kind == "smallcnn":
        for i in range(1, len(spec.channels) + 1):
            x = ops.conv2d(x, params[f"conv{i}.weight"], params[f"conv{i}.bias"], pad=1)
            x = ops.max_pool2d(ops.relu(x), 2)
    x = ops.reshape(x, (b, -1))
    n_layers = len(spec.hidden) + 1
    for i in range(1, n_layers + 1):
        x = _linear(x, params[f"fc{i}.weight"], params[f"fc{i}.bias"])
        if i < n_layers:
            x = ops.relu(x)
    return x


def loss_ce(logits, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    n_classes = logits.shape[-1]
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    return ops.nll_loss(ops.log_softmax(logits, axis=-1), labels)


def error_rate(logits, labels) -> float:
    """Fraction of argmax mismatches; ties resolve to the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return float(np.mean(np.argmax(data, axis=-1) != labels))


def save_checkpoint(path, spec: ModelSpec, params: ModelParams) -> tuple[Path, Path]:
    """Write ``<path>.bin`` (flat float32, little-endian) and ``<path>.json``."""
    path = Path(path)
    entries, offset = [], 0
    for name, arr in zip(params.names, params.arrays()):
        arr = np.asarray(arr)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += int(arr.size)
    bin_path = path.with_suffix(".bin")
    json_path = path.with_suffix(".json")
    params.flatten().astype("<f4").tofile(bin_path)
    json_path.write_text(json.dumps({"spec": spec.to_dict(), "dtype": "float32", "tensors": entries}, indent=2))
    return bin_path, json_path


def load_checkpoint(path) -> tuple[ModelSpec, ModelParams]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    flat = np.fromfile(path.with_suffix(".bin"), dtype="<f4")
    tensors = []
    for e in meta["tensors"]:
        chunk = flat[e["offset"] : e["offset"] + e["count"]]
        if chunk.size != e["count"]:
            raise ValueError(f"checkpoint truncated at tensor {e['name']}")
        tensors.append((e["name"], chunk.reshape(e["shape"]).astype(get_default_dtype())))
    return ModelSpec.from_dict(meta["spec"]), ModelParams(tensors)
