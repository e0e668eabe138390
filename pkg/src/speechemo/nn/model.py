"""Sequential network specs, layer objects, architecture presets and model files."""

from __future__ import annotations

import copy
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .. import serf
from . import layers as L


class SpecError(ValueError):
    pass


LAYER_TYPES = (
    "dense",
    "conv2d",
    "conv1d",
    "maxpool2d",
    "global_avg_pool",
    "relu",
    "flatten",
    "softmax_output",
)


@dataclass
class ModelSpec:
    """Ordered layer descriptors (JSON-able dicts) plus an init seed.

    Descriptor examples::

        {"type": "conv2d", "out_channels": 16, "kernel": [12, 12], "stride": 1, "pad": [5, 5]}
        {"type": "maxpool2d", "kernel": [2, 2], "stride": 2}
        {"type": "softmax_output", "n_classes": 14}
    """

    layers: list[dict]
    seed: int = 0
    name: str = "custom"

    def __post_init__(self):
        if not self.layers:
            raise SpecError("empty model spec")
        for d in self.layers:
            if d.get("type") not in LAYER_TYPES:
                raise SpecError(f"unknown layer type {d.get('type')!r}")
        if self.layers[-1]["type"] != "softmax_output":
            raise SpecError("the final layer must be softmax_output")

    @property
    def n_classes(self) -> int:
        return int(self.layers[-1]["n_classes"])

    def to_dict(self) -> dict:
        return {"name": self.name, "seed": self.seed, "layers": copy.deepcopy(self.layers)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(copy.deepcopy(d["layers"]), int(d.get("seed", 0)), d.get("name", "custom"))

    def output_shapes(self, input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
        """Per-layer output shapes (without batch axis); raises :class:`SpecError` if they do not compose."""
        shape = tuple(int(s) for s in input_shape)
        out = []
        for i, d in enumerate(self.layers):
            try:
                shape = _propagate(d, shape)
            except (SpecError, L.ShapeError) as e:
                raise SpecError(f"layer {i} ({d['type']}): {e}") from None
            out.append(shape)
        return out


def _propagate(d: dict, shape: tuple[int, ...]) -> tuple[int, ...]:
    t = d["type"]
    if t == "conv2d":
        if len(shape) != 3:
            raise SpecError(f"conv2d needs (C, H, W) input, got {shape}")
        kh, kw = L._pair(d["kernel"])
        sh, sw = L._pair(d.get("stride", 1))
        ph, pw = L._pair(d.get("pad", 0))
        ho = L.conv_output_size(shape[1], kh, sh, ph)
        wo = L.conv_output_size(shape[2], kw, sw, pw)
        if ho < 1 or wo < 1:
            raise SpecError(f"kernel {kh}x{kw} does not fit input {shape[1:]}")
        return (int(d["out_channels"]), ho, wo)
    if t == "conv1d":
        if len(shape) != 2:
            raise SpecError(f"conv1d needs (C, L) input, got {shape}")
        lo = L.conv_output_size(shape[1], int(d["kernel"]), int(d.get("stride", 1)), int(d.get("pad", 0)))
        if lo < 1:
            raise SpecError(f"kernel {d['kernel']} does not fit length {shape[1]}")
        return (int(d["out_channels"]), lo)
    if t == "maxpool2d":
        if len(shape) != 3:
            raise SpecError(f"maxpool2d needs (C, H, W) input, got {shape}")
        kh, kw, sh, sw = _pool_geometry(d, shape[1], shape[2])
        return (shape[0], (shape[1] - kh) // sh + 1, (shape[2] - kw) // sw + 1)
    if t == "global_avg_pool":
        if len(shape) < 2:
            raise SpecError(f"global_avg_pool needs spatial axes, got {shape}")
        return (shape[0],)
    if t == "relu":
        return shape
    if t == "flatten":
        return (int(np.prod(shape)),)
    if t in ("dense", "softmax_output"):
        if len(shape) != 1:
            raise SpecError(f"{t} needs a flat input, got {shape}; add flatten or global_avg_pool")
        return (int(d["units"] if t == "dense" else d["n_classes"]),)
    raise SpecError(f"unknown layer type {t!r}")


def _pool_geometry(d: dict, H: int, W: int) -> tuple[int, int, int, int]:
    """Pool windows larger than the map shrink to the map (one output along that axis)."""
    kh, kw = L._pair(d["kernel"])
    sh, sw = L._pair(d.get("stride", d["kernel"]))
    if kh > H:
        kh, sh = H, max(1, H)
    if kw > W:
        kw, sw = W, max(1, W)
    return kh, kw, sh, sw


# ---------------------------------------------------------------------------
# presets


def build_champion_cnn(n_classes: int, seed: int = 0, widths=(16, 32, 64, 64)) -> ModelSpec:
    """Four conv blocks (12x12, 7x7, 3x3, 3x3), the last pooled 4x4/4, then global average pooling."""
    c1, c2, c3, c4 = widths
    layers = [
        {"type": "conv2d", "out_channels": c1, "kernel": [12, 12], "stride": 1, "pad": [5, 5]},
        {"type": "relu"},
        {"type": "maxpool2d", "kernel": [2, 2], "stride": 2},
        {"type": "conv2d", "out_channels": c2, "kernel": [7, 7], "stride": 1, "pad": [3, 3]},
        {"type": "relu"},
        {"type": "maxpool2d", "kernel": [2, 2], "stride": 2},
        {"type": "conv2d", "out_channels": c3, "kernel": [3, 3], "stride": 1, "pad": [1, 1]},
        {"type": "relu"},
        {"type": "maxpool2d", "kernel": [2, 2], "stride": 2},
        {"type": "conv2d", "out_channels": c4, "kernel": [3, 3], "stride": 1, "pad": [1, 1]},
        {"type": "relu"},
        {"type": "maxpool2d", "kernel": [4, 4], "stride": 4},
        {"type": "global_avg_pool"},
        {"type": "softmax_output", "n_classes": n_classes},
    ]
    return ModelSpec(layers, seed, "champion_cnn")


def build_cnn2d(
    n_classes: int,
    n_layers: int = 2,
    widths=(16, 32, 64, 64, 64, 64),
    kernels=((3, 3),) * 6,
    head: str = "flatten",
    seed: int = 0,
) -> ModelSpec:
    """Plain stacks of conv(3x3)/relu/maxpool(2x2, stride 2) with a flatten or GAP head."""
    if not 1 <= n_layers <= len(widths):
        raise SpecError(f"n_layers must be in 1..{len(widths)}")
    layers = []
    for i in range(n_layers):
        kh, kw = kernels[i]
        layers += [
            {"type": "conv2d", "out_channels": widths[i], "kernel": [kh, kw], "stride": 1, "pad": [kh // 2, kw // 2]},
            {"type": "relu"},
            {"type": "maxpool2d", "kernel": [2, 2], "stride": 2},
        ]
    if head == "flatten":
        layers.append({"type": "flatten"})
    elif head == "gap":
        layers.append({"type": "global_avg_pool"})
    else:
        raise SpecError(f"unknown head {head!r}")
    layers.append({"type": "softmax_output", "n_classes": n_classes})
    return ModelSpec(layers, seed, f"cnn2d_{n_layers}layer_{head}")


def build_dnn(n_classes: int, hidden=(256, 128, 64), seed: int = 0) -> ModelSpec:
    layers: list[dict] = [{"type": "flatten"}]
    for h in hidden:
        layers += [{"type": "dense", "units": h}, {"type": "relu"}]
    layers.append({"type": "softmax_output", "n_classes": n_classes})
    return ModelSpec(layers, seed, f"dnn_{len(hidden)}layer")


def build_cnn1d(n_classes: int, seed: int = 0) -> ModelSpec:
    """Two strided 1-D conv layers over raw audio (or per-frame feature channels) with GAP."""
    layers = [
        {"type": "conv1d", "out_channels": 16, "kernel": 64, "stride": 8, "pad": 0},
        {"type": "relu"},
        {"type": "conv1d", "out_channels": 32, "kernel": 32, "stride": 4, "pad": 0},
        {"type": "relu"},
        {"type": "global_avg_pool"},
        {"type": "softmax_output", "n_classes": n_classes},
    ]
    return ModelSpec(layers, seed, "cnn1d_2layer")


# ---------------------------------------------------------------------------
# runtime network


class Network:
    """A built :class:`ModelSpec`: parameters, forward/backward, and normalization stats."""

    def __init__(self, spec: ModelSpec, input_shape, dtype=np.float32):
        self.spec = spec
        self.input_shape = tuple(int(s) for s in input_shape)
        self.shapes = spec.output_shapes(self.input_shape)
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.norm_mean: np.ndarray | None = None
        self.norm_std: np.ndarray | None = None
        self._init_params()
        self._cache: list = []

    def _init_params(self):
        rng = np.random.default_rng(self.spec.seed)
        shape = self.input_shape
        for i, d in enumerate(self.spec.layers):
            t = d["type"]
            if t == "conv2d":
                kh, kw = L._pair(d["kernel"])
                fan_in = shape[0] * kh * kw
                self._kaiming(rng, f"{i}.W", (int(d["out_channels"]), shape[0], kh, kw), fan_in)
                self.params[f"{i}.b"] = np.zeros(int(d["out_channels"]), dtype=self.dtype)
            elif t == "conv1d":
                k = int(d["kernel"])
                self._kaiming(rng, f"{i}.W", (int(d["out_channels"]), shape[0], k), shape[0] * k)
                self.params[f"{i}.b"] = np.zeros(int(d["out_channels"]), dtype=self.dtype)
            elif t in ("dense", "softmax_output"):
                units = int(d["units"] if t == "dense" else d["n_classes"])
                self._kaiming(rng, f"{i}.W", (shape[0], units), shape[0])
                self.params[f"{i}.b"] = np.zeros(units, dtype=self.dtype)
            shape = self.shapes[i]

    def _kaiming(self, rng, name, shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        self.params[name] = rng.uniform(-bound, bound, size=shape).astype(self.dtype)

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes

    def astype(self, dtype) -> "Network":
        net = copy.copy(self)
        net.dtype = np.dtype(dtype)
        net.params = {k: v.astype(dtype) for k, v in self.params.items()}
        net._cache = []
        return net

    def copy(self) -> "Network":
        net = copy.copy(self)
        net.params = {k: v.copy() for k, v in self.params.items()}
        net._cache = []
        return net

    # -- forward / backward --------------------------------------------------

    def normalize(self, x: np.ndarray) -> np.ndarray:
        """Apply stored per-dimension z-normalization (feature axis = input axis 1 of the sample)."""
        if self.norm_mean is None:
            return x
        return (x - self.norm_mean) / self.norm_std

    def forward(self, x: np.ndarray, keep_cache: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            # global average pooling lets conv stacks take other spatial sizes
            self.spec.output_shapes(x.shape[1:])
        cache = []
        for i, d in enumerate(self.spec.layers):
            t = d["type"]
            inp = x
            aux = None
            if t == "conv2d":
                x = L.conv2d_forward(x, self.params[f"{i}.W"], self.params[f"{i}.b"], d.get("stride", 1), d.get("pad", 0))
            elif t == "conv1d":
                x = L.conv1d_forward(x, self.params[f"{i}.W"], self.params[f"{i}.b"], d.get("stride", 1), d.get("pad", 0))
            elif t == "maxpool2d":
                kh, kw, sh, sw = _pool_geometry(d, x.shape[2], x.shape[3])
                x, aux = L.maxpool2d_forward(x, kh, kw, (sh, sw))
                aux = (aux, (kh, kw, sh, sw))
            elif t == "global_avg_pool":
                x = L.global_avg_pool_forward(x)
            elif t == "relu":
                x = L.relu_forward(x)
            elif t == "flatten":
                x = x.reshape(x.shape[0], -1)
            elif t in ("dense", "softmax_output"):
                x = L.dense_forward(x, self.params[f"{i}.W"], self.params[f"{i}.b"])
            if keep_cache:
                cache.append((inp, aux))
        self._cache = cache
        return x

    def backward(self, dlogits: np.ndarray, need_input_grad: bool = False) -> dict[str, np.ndarray]:
        """Parameter gradients for the last :meth:`forward` call.

        With ``need_input_grad`` the result also holds ``grads["input"]`` (dL/dx).
        """
        grads: dict[str, np.ndarray] = {}
        dy = dlogits
        for i in range(len(self.spec.layers) - 1, -1, -1):
            d = self.spec.layers[i]
            t = d["type"]
            inp, aux = self._cache[i]
            need_dx = i > 0 or need_input_grad
            if t == "conv2d":
                dy, grads[f"{i}.W"], grads[f"{i}.b"] = L.conv2d_backward(
                    dy, inp, self.params[f"{i}.W"], d.get("stride", 1), d.get("pad", 0), need_dx
                )
            elif t == "conv1d":
                dy, grads[f"{i}.W"], grads[f"{i}.b"] = L.conv1d_backward(
                    dy, inp, self.params[f"{i}.W"], d.get("stride", 1), d.get("pad", 0), need_dx
                )
            elif t == "maxpool2d":
                arg, (kh, kw, sh, sw) = aux
                dy = L.maxpool2d_backward(dy, arg, inp.shape, kh, kw, (sh, sw))
            elif t == "global_avg_pool":
                dy = L.global_avg_pool_backward(dy, inp.shape)
            elif t == "relu":
                dy = L.relu_backward(dy, inp)
            elif t == "flatten":
                dy = dy.reshape(inp.shape)
            elif t in ("dense", "softmax_output"):
                dy, grads[f"{i}.W"], grads[f"{i}.b"] = L.dense_backward(dy, inp, self.params[f"{i}.W"])
        if need_input_grad:
            grads["input"] = dy
        return grads

    def activation_pattern(self) -> list[np.ndarray]:
        """Relu masks and pooling argmaxes of the last cached forward pass."""
        out = []
        for d, (inp, aux) in zip(self.spec.layers, self._cache):
            if d["type"] == "relu":
                out.append(inp > 0)
            elif d["type"] == "maxpool2d":
                out.append(aux[0])
        return out

    def logits(self, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
        outs = [self.forward(x[i : i + batch_size], keep_cache=False) for i in range(0, len(x), batch_size)]
        self._cache = []
        return np.concatenate(outs) if outs else np.zeros((0, self.n_classes), dtype=self.dtype)

    def predict_proba(self, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Class probabilities for already-normalized inputs."""
        return L.softmax(self.logits(x, batch_size).astype(np.float64))

    # -- persistence ---------------------------------------------------------

    def manifest(self, extra: dict | None = None) -> dict:
        m = {
            "version": 1,
            "spec": self.spec.to_dict(),
            "input_shape": list(self.input_shape),
            "params": [[k, list(v.shape)] for k, v in self.params.items()],
            "has_norm": self.norm_mean is not None,
        }
        if extra:
            m["extra"] = extra
        return m


MODEL_MAGIC = b"SERM"


def save_network(path: str | os.PathLike, net: Network, extra: dict | None = None) -> None:
    """Container: ``b"SERM"``, u32 manifest length, JSON manifest, then SERF blobs.

    Blobs follow the manifest's parameter order; normalization mean/std come
    last when present.
    """
    manifest = json.dumps(net.manifest(extra), sort_keys=True).encode("utf-8")
    blobs = [serf.encode(v) for v in net.params.values()]
    if net.norm_mean is not None:
        blobs += [serf.encode(net.norm_mean), serf.encode(net.norm_std)]
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MODEL_MAGIC + struct.pack("<I", len(manifest)) + manifest)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_network(path: str | os.PathLike) -> tuple[Network, dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MODEL_MAGIC:
        raise SpecError(f"{path}: not a model file")
    (n,) = struct.unpack_from("<I", buf, 4)
    manifest = json.loads(buf[8 : 8 + n].decode("utf-8"))
    if manifest.get("version") != 1:
        raise SpecError(f"{path}: unsupported model version {manifest.get('version')!r}")
    net = Network(ModelSpec.from_dict(manifest["spec"]), manifest["input_shape"])
    pos = 8 + n
    for name, shape in manifest["params"]:
        arr, pos = serf.decode(buf, pos)
        if list(arr.shape) != shape:
            raise SpecError(f"{path}: parameter {name} has shape {arr.shape}, expected {shape}")
        net.params[name] = arr
    if manifest.get("has_norm"):
        net.norm_mean, pos = serf.decode(buf, pos)
        net.norm_std, pos = serf.decode(buf, pos)
    return net, manifest.get("extra", {})
