"""Sequential model graph, loss, SGD and the binary checkpoint format."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import DataInvariantError, NumericError, SlideIOError
from .layers import layer_from_spec, param_count_formula


class ModelGraph:
    """Ordered layers plus one parameter dict per layer.

    Inference (``forward``/``predict_proba``) never mutates the graph, so one
    instance can serve many threads. Training mutates ``params`` in place.
    """

    def __init__(self, name: str, input_shape: tuple, layers: list,
                 params: Optional[list] = None, num_classes: int = 2,
                 seed: Optional[int] = None, meta: Optional[dict] = None):
        self.name = name
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = list(layers)
        self.num_classes = num_classes
        self.meta = dict(meta or {})
        self.shapes = self._infer_shapes()
        if self.shapes[-1] != (num_classes,):
            raise DataInvariantError(
                f"model {name} ends in shape {self.shapes[-1]}, expected ({num_classes},)")
        if params is None:
            rng = np.random.default_rng(seed)
            params = [layer.init_params(rng) for layer in self.layers]
        self.params = params
        for layer, p in zip(self.layers, self.params):
            want = layer.param_shapes()
            got = {k: tuple(v.shape) for k, v in p.items()}
            if got != {k: tuple(v) for k, v in want.items()}:
                raise DataInvariantError(f"parameter shapes for {layer!r} do not match its spec")

    def _infer_shapes(self) -> list:
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(tuple(layer.output_shape(shapes[-1])))
        return shapes

    @property
    def dtype(self):
        for p in self.params:
            for v in p.values():
                return v.dtype
        return np.dtype(np.float32)

    def param_count(self) -> int:
        return sum(int(v.size) for p in self.params for v in p.values())

    def formula_param_count(self) -> int:
        return sum(param_count_formula(layer) for layer in self.layers)

    def flops(self) -> int:
        return sum(layer.flops(shape) for layer, shape in zip(self.layers, self.shapes))

    def astype(self, dtype) -> "ModelGraph":
        params = [{k: v.astype(dtype) for k, v in p.items()} for p in self.params]
        return ModelGraph(self.name, self.input_shape, self.layers, params,
                          self.num_classes, meta=self.meta)

    def copy(self) -> "ModelGraph":
        return self.astype(self.dtype)

    def _check_input(self, x):
        if x.ndim != len(self.input_shape) + 1 or tuple(x.shape[1:]) != self.input_shape:
            raise DataInvariantError(
                f"model {self.name} expects input (N, {self.input_shape}), got {x.shape}")

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Logits for a batch."""
        self._check_input(x)
        x = x.astype(self.dtype, copy=False)
        for layer, p in zip(self.layers, self.params):
            x, _ = layer.forward(p, x)
        return x

    def forward_train(self, x: np.ndarray) -> tuple:
        self._check_input(x)
        x = x.astype(self.dtype, copy=False)
        caches = []
        for layer, p in zip(self.layers, self.params):
            x, cache = layer.forward(p, x)
            caches.append(cache)
        return x, caches

    def backward(self, caches: list, dlogits: np.ndarray, need_input_grad: bool = False) -> tuple:
        """Returns (per-layer gradient dicts, gradient w.r.t. the input or None)."""
        grads = [None] * len(self.layers)
        dy = dlogits
        for i in range(len(self.layers) - 1, -1, -1):
            dy, g = self.layers[i].backward(self.params[i], caches[i], dy,
                                            need_dx=need_input_grad or i > 0)
            grads[i] = g
        return grads, dy

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        """Softmax probability of class 1 (positive tumor) per sample."""
        return softmax(self.forward(x))[:, 1]

    def specs(self) -> list:
        return [layer.to_spec() for layer in self.layers]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple:
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_z
    loss = float(-log_p[np.arange(n), labels].mean())
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    if not math.isfinite(loss):
        raise NumericError("non-finite loss")
    return loss, grad.astype(logits.dtype, copy=False)


@dataclass
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.0
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise DataInvariantError("learning rate must be positive")
        if self.epochs < 1:
            raise DataInvariantError("epochs must be >= 1")
        if self.batch_size < 1:
            raise DataInvariantError("batch size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise DataInvariantError("momentum must lie in [0, 1)")


class SgdOptimizer:
    """Plain SGD, with an optional classical momentum buffer."""

    def __init__(self, config: SgdConfig):
        self.config = config
        self.velocity = None

    def step(self, model: ModelGraph, grads: list) -> ModelGraph:
        lr, mu = self.config.learning_rate, self.config.momentum
        if mu and self.velocity is None:
            self.velocity = [{k: np.zeros_like(v) for k, v in p.items()} for p in model.params]
        for i, (p, g) in enumerate(zip(model.params, grads)):
            for k, w in p.items():
                gk = g[k]
                if gk.shape != w.shape:
                    raise DataInvariantError(f"gradient shape mismatch for layer {i} param {k}")
                if mu:
                    vel = self.velocity[i][k]
                    vel *= mu
                    vel -= lr * gk
                    update = vel
                else:
                    update = -lr * gk
                if not np.isfinite(update).all():
                    raise NumericError(f"non-finite update for layer {i} param {k}")
                w += update.astype(w.dtype, copy=False)
        return model


def sgd_step(model: ModelGraph, grads: list, config: SgdConfig) -> ModelGraph:
    """One stateless update ``w <- w - lr * g`` (momentum needs an SgdOptimizer)."""
    if config.momentum:
        raise DataInvariantError("sgd_step is stateless; use SgdOptimizer for momentum")
    return SgdOptimizer(config).step(model, grads)


# -- checkpoint ---------------------------------------------------------------

MAGIC = b"PTRI"
FORMAT_VERSION = 1


def save_checkpoint(model: ModelGraph, path, meta: Optional[dict] = None) -> Path:
    """``PTRI`` | u32 version | u64 header length | JSON header | f32 LE blobs."""
    path = Path(path)
    tensors = []
    blobs = []
    for i, p in enumerate(model.params):
        for name, v in p.items():
            tensors.append({"layer": i, "name": name, "shape": list(v.shape)})
            blobs.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
    header = {
        "name": model.name,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "layers": model.specs(),
        "tensors": tensors,
        "param_count": model.param_count(),
        "meta": {**model.meta, **(meta or {})},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)
    return path


def read_checkpoint_header(path) -> tuple:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError as exc:
        raise SlideIOError(f"missing checkpoint {path}") from exc
    if len(data) < 16 or data[:4] != MAGIC:
        raise SlideIOError(f"{path}: not a checkpoint (bad magic bytes)")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != FORMAT_VERSION:
        raise SlideIOError(f"{path}: unsupported checkpoint version {version}")
    if len(data) < 16 + hlen:
        raise SlideIOError(f"{path}: truncated header")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise SlideIOError(f"{path}: corrupt header") from exc
    return header, data[16 + hlen:]


def load_checkpoint(path) -> ModelGraph:
    header, body = read_checkpoint_header(path)
    layers = [layer_from_spec(s) for s in header["layers"]]
    params = [dict() for _ in layers]
    offset = 0
    for t in header["tensors"]:
        n = math.prod(t["shape"])
        end = offset + 4 * n
        if end > len(body):
            raise SlideIOError(f"{path}: truncated tensor data")
        params[t["layer"]][t["name"]] = (
            np.frombuffer(body, dtype="<f4", count=n, offset=offset)
            .astype(np.float32).reshape(t["shape"]))
        offset = end
    if offset != len(body):
        raise SlideIOError(f"{path}: trailing bytes after tensor data")
    total = sum(v.size for p in params for v in p.values())
    if total != header["param_count"]:
        raise DataInvariantError(f"{path}: header declares {header['param_count']} "
                                 f"parameters, found {total}")
    for layer, p in zip(layers, params):
        expected = list(layer.param_shapes())
        if list(p) != expected:
            p_sorted = {k: p[k] for k in expected if k in p}
            if len(p_sorted) != len(expected):
                raise DataInvariantError(f"{path}: tensor list does not match layer {layer!r}")
            p.clear()
            p.update(p_sorted)
    return ModelGraph(header["name"], tuple(header["input_shape"]), layers, params,
                      header["num_classes"], meta=header.get("meta"))
