"""Layers and network assembly.

A network is a :class:`NetworkSpec` (pure description, JSON-serialisable)
plus a list of parameter dicts, one per layer.  Feature maps are
``(N, C, H, W)`` arrays; after ``flatten`` activations are ``(N, D)``.

Gradients follow the same layout as the parameters, so an update is just
``params[k] -= lr * grads[k]`` for every key.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .grid import DomainError, WindowShape, tap_mask
from .soft import (ErosionVariant, Form, MorphMode, SmoothSign, smooth_sign, smooth_sign_deriv,
                   soft_morph_maps, soft_morph_maps_backward)

MORPH_KINDS = ("dilation", "erosion", "adaptive")
KINDS = MORPH_KINDS + ("subtraction", "flatten", "dense", "softmax", "dropout")


class UsageError(RuntimeError):
    """Raised for invalid network descriptions or call sequences."""


@dataclass
class LayerSpec:
    kind: str
    shape: tuple[int, int] | None = None  # SE shape for morphological layers
    filters: int = 1
    form: str = Form.PRODUCT.value
    smooth: str | None = None  # adaptive layers only
    fc_width: int | None = None
    dropout_rate: float | None = None
    erosion_variant: str = ErosionVariant.CORRECTED.value

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UsageError(f"unknown layer kind {self.kind!r}")
        if self.shape is not None:
            self.shape = tuple(int(s) for s in self.shape)
        if self.kind in MORPH_KINDS:
            if self.shape is None:
                raise UsageError(f"{self.kind} layer needs an SE shape")
            Form(self.form)
            ErosionVariant(self.erosion_variant)
            if self.filters < 1:
                raise UsageError("filters must be >= 1")
        if self.kind == "adaptive":
            self.smooth = SmoothSign(self.smooth or SmoothSign.TANH).value
        if self.kind == "dense" and (self.fc_width is None or self.fc_width < 1):
            raise UsageError("dense layer needs a positive fc_width")
        if self.kind == "dropout":
            if self.dropout_rate is None:
                self.dropout_rate = 0.5
            if not 0.0 <= self.dropout_rate < 1.0:
                raise UsageError("dropout_rate must be in [0, 1)")


@dataclass
class NetworkSpec:
    input_shape: tuple[int, int, int]
    layers: list[LayerSpec] = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]
        self.shapes()

    def shapes(self) -> list[tuple[int, ...]]:
        """Output shape of every layer (without the batch axis); validates the chain."""
        cur = self.input_shape
        out = []
        for i, spec in enumerate(self.layers):
            k = spec.kind
            if k in MORPH_KINDS:
                if len(cur) != 3 or cur[0] not in (1, spec.filters):
                    raise UsageError(f"layer {i} ({k}) cannot take input {cur} with {spec.filters} filters")
                cur = (spec.filters,) + cur[1:]
            elif k == "subtraction":
                src = self.input_shape
                if len(cur) != 3 or src[1:] != cur[1:] or src[0] not in (1, cur[0]):
                    raise UsageError(f"layer {i}: subtraction skip {src} incompatible with {cur}")
            elif k == "flatten":
                cur = (int(np.prod(cur)),)
            elif k == "dense":
                if len(cur) != 1:
                    raise UsageError(f"layer {i}: dense needs flat input, got {cur}")
                cur = (spec.fc_width,)
            elif k == "softmax" and len(cur) != 1:
                raise UsageError(f"layer {i}: softmax needs flat input, got {cur}")
            out.append(cur)
        return out

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes()[-1] if self.layers else self.input_shape

    def to_dict(self) -> dict[str, Any]:
        layers = []
        for l in self.layers:
            d = asdict(l)
            d["shape"] = list(l.shape) if l.shape else None
            layers.append(d)
        return {"input_shape": list(self.input_shape), "layers": layers}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "NetworkSpec":
        return cls(tuple(d["input_shape"]), [LayerSpec(**l) for l in d["layers"]])

    @classmethod
    def from_json(cls, s: str) -> "NetworkSpec":
        return cls.from_dict(json.loads(s))


# -- layer implementations --------------------------------------------------

class MorphLayer:
    def __init__(self, spec: LayerSpec, in_shape):
        self.spec = spec
        self.in_shape = in_shape
        self.form = Form(spec.form)
        self.variant = ErosionVariant(spec.erosion_variant)

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        m = self.spec.filters
        p = {"weights": rng.random((m,) + self.spec.shape)}
        if self.spec.kind == "adaptive":
            a = rng.uniform(-1.0, 1.0, size=m)
            # a near 0 makes the gate gradient vanish
            while np.any(np.abs(a) < 0.05):
                small = np.abs(a) < 0.05
                a[small] = rng.uniform(-1.0, 1.0, size=int(small.sum()))
            p["gate"] = a
        # A flat background window yields g * ln(#taps); the bias starts by cancelling it,
        # otherwise large learning rates blow up on the first steps.
        grid = tuple(self.in_shape[1:])
        n_in = tap_mask(grid, WindowShape(*self.spec.shape)).sum(axis=0)
        g = np.broadcast_to(np.asarray(self.gain(p), dtype=np.float64), (m,))
        p["bias"] = -g[:, None, None] * np.log(n_in)[None]
        return p

    def gain(self, params):
        if self.spec.kind == "adaptive":
            return smooth_sign(params["gate"], self.spec.smooth)
        return MorphMode.DILATE.gain if self.spec.kind == "dilation" else MorphMode.ERODE.gain

    def forward(self, params, x, **_):
        if x.shape[2:] != params["bias"].shape[1:]:
            raise DomainError(f"input {x.shape[2:]} does not match bias grid {params['bias'].shape[1:]}")
        y, cache = soft_morph_maps(x, params["weights"], self.gain(params), self.form, self.variant)
        return y + params["bias"][None], cache

    def backward(self, params, cache, g):
        dw, dx, dgain = soft_morph_maps_backward(g, params["weights"], cache, self.form, self.variant,
                                                 gain_grad=self.spec.kind == "adaptive")
        grads = {"weights": dw, "bias": g.sum(axis=0)}
        if self.spec.kind == "adaptive":
            grads["gate"] = dgain * smooth_sign_deriv(params["gate"], self.spec.smooth)
        return grads, dx


class Subtraction:
    """``skip - processed``; the skip is the network input, broadcast over channels."""

    def __init__(self, spec, in_shape):
        self.spec = spec

    def init(self, rng):
        return {}

    def forward(self, params, x, skip=None, **_):
        if skip is None:
            raise UsageError("subtraction needs the network input as skip source")
        if skip.shape[2:] != x.shape[2:] or skip.shape[0] != x.shape[0]:
            raise DomainError(f"subtraction shapes differ: {skip.shape} vs {x.shape}")
        return skip - x, skip.shape[1]

    def backward(self, params, cache, g):
        skip_channels = cache
        dskip = g.sum(axis=1, keepdims=True) if skip_channels == 1 else g
        return {}, -g, dskip


class Flatten:
    def __init__(self, spec, in_shape):
        self.in_shape = in_shape

    def init(self, rng):
        return {}

    def forward(self, params, x, **_):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, cache, g):
        return {}, g.reshape(cache)


class Dense:
    def __init__(self, spec, in_shape):
        self.n_in = in_shape[0]
        self.n_out = spec.fc_width

    def init(self, rng):
        lim = np.sqrt(6.0 / (self.n_in + self.n_out))
        return {"weight": rng.uniform(-lim, lim, (self.n_out, self.n_in)), "bias": np.zeros(self.n_out)}

    def forward(self, params, x, **_):
        if x.shape[1] != self.n_in:
            raise DomainError(f"dense expects {self.n_in} inputs, got {x.shape[1]}")
        return x @ params["weight"].T + params["bias"], x

    def backward(self, params, x, g):
        return {"weight": g.T @ x, "bias": g.sum(axis=0)}, g @ params["weight"]


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class Softmax:
    def __init__(self, spec, in_shape):
        pass

    def init(self, rng):
        return {}

    def forward(self, params, x, **_):
        p = softmax(x)
        return p, p

    def backward(self, params, p, g):
        return {}, p * (g - (p * g).sum(axis=-1, keepdims=True))


class Dropout:
    def __init__(self, spec, in_shape):
        self.rate = spec.dropout_rate

    def init(self, rng):
        return {}

    def forward(self, params, x, training=False, rng=None, **_):
        if not training or self.rate == 0.0:
            return x, None
        if rng is None:
            raise UsageError("dropout in training mode needs an rng")
        mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * mask, mask

    def backward(self, params, mask, g):
        return {}, g if mask is None else g * mask


_IMPLS = {
    "dilation": MorphLayer, "erosion": MorphLayer, "adaptive": MorphLayer,
    "subtraction": Subtraction, "flatten": Flatten, "dense": Dense,
    "softmax": Softmax, "dropout": Dropout,
}


def _impls(spec: NetworkSpec):
    ins = [spec.input_shape] + spec.shapes()[:-1]
    return [_IMPLS[l.kind](l, s) for l, s in zip(spec.layers, ins)]


def init_states(spec: NetworkSpec, seed: int | np.random.Generator = 0) -> list[dict[str, np.ndarray]]:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return [impl.init(rng) for impl in _impls(spec)]


# -- whole-network passes ---------------------------------------------------

@dataclass
class ForwardTrace:
    spec_id: int
    input_shape: tuple[int, ...]
    caches: list[Any]


def network_forward(spec: NetworkSpec, states, x: np.ndarray, training: bool = False,
                    rng: np.random.Generator | None = None, upto: int | None = None):
    """Run the layers in order; returns ``(output, trace)``.

    ``upto`` stops after that many layers (used to read pre-softmax logits).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    if tuple(x.shape[1:]) != spec.input_shape:
        raise DomainError(f"input {x.shape[1:]} does not match network input {spec.input_shape}")
    skip = x
    caches = []
    impls = _impls(spec)
    n = len(impls) if upto is None else upto
    for impl, params in zip(impls[:n], states[:n]):
        x, cache = impl.forward(params, x, skip=skip, training=training, rng=rng)
        caches.append(cache)
    return x, ForwardTrace(id(spec), tuple(skip.shape), caches)


def network_backward(spec: NetworkSpec, states, trace: ForwardTrace | None, loss_grad: np.ndarray):
    """Reverse pass.  Returns ``(grads, dx)`` with one grad dict per layer.

    If the trace covers fewer layers than the spec (``upto`` forward), the
    gradient is taken to be with respect to the output of the last traced layer.
    """
    if trace is None:
        raise UsageError("network_backward needs a forward trace")
    if trace.spec_id != id(spec) or len(trace.caches) > len(spec.layers):
        raise UsageError("trace does not belong to this network spec")
    impls = _impls(spec)
    n = len(trace.caches)
    grads: list[dict[str, np.ndarray]] = [{} for _ in spec.layers]
    g = loss_grad
    dskip = np.zeros(trace.input_shape)
    for i in range(n - 1, -1, -1):
        out = impls[i].backward(states[i], trace.caches[i], g)
        if len(out) == 3:
            grads[i], g, ds = out
            dskip = dskip + ds
        else:
            grads[i], g = out
    for i in range(n, len(spec.layers)):
        grads[i] = {k: np.zeros_like(v) for k, v in states[i].items()}
    return grads, g + dskip


# -- builders ---------------------------------------------------------------

PROFILES = {
    "mnist": {"input": (28, 28), "fc": (120, 84), "classes": 10},
    "scgs": {"input": (64, 64), "fc": (1024, 512), "classes": 5},
    "gtsrb": {"input": (31, 35), "fc": (1024, 512), "classes": 43},
    "brain-tumor": {"input": (64, 64), "fc": (512,), "classes": 3},
}


def build_residual_mnn(profile: str | dict, filters: int = 1, form: str = "product",
                       dropout: float | None = None) -> NetworkSpec:
    """Erosion -> dilation -> subtraction from the input -> FC stack -> softmax.

    ``profile`` is a key of :data:`PROFILES` or a dict with the same fields.
    ``dropout`` inserts a dropout layer after the second fully-connected layer.
    """
    if isinstance(profile, str):
        if profile not in PROFILES:
            raise UsageError(f"unknown profile {profile!r}; known: {sorted(PROFILES)}")
        profile = PROFILES[profile]
    rows, cols = profile["input"]
    layers = [
        LayerSpec("erosion", (3, 3), filters, form),
        LayerSpec("dilation", (3, 3), filters, form),
        LayerSpec("subtraction"),
        LayerSpec("flatten"),
    ]
    for i, width in enumerate(profile["fc"]):
        layers.append(LayerSpec("dense", fc_width=width))
        if i == 1 and dropout:
            layers.append(LayerSpec("dropout", dropout_rate=dropout))
    layers += [LayerSpec("dense", fc_width=profile["classes"]), LayerSpec("softmax")]
    return NetworkSpec((1, rows, cols), layers)


def build_stacked(ops, se_shape=(3, 3), image_shape=(28, 28), form: str = "product",
                  erosion_variant: str = "corrected") -> NetworkSpec:
    """One single-filter morphological layer per entry of ``ops``."""
    ops = [MorphMode(o) for o in ops]
    if not ops:
        raise UsageError("build_stacked needs at least one operation")
    kinds = {MorphMode.DILATE: "dilation", MorphMode.ERODE: "erosion"}
    layers = [LayerSpec(kinds[o], tuple(se_shape), 1, form, erosion_variant=erosion_variant) for o in ops]
    return NetworkSpec((1,) + tuple(image_shape), layers)


def build_adaptive(se_shape=(3, 3), image_shape=(28, 28), smooth: str = "tanh",
                   form: str = "product") -> NetworkSpec:
    return NetworkSpec((1,) + tuple(image_shape),
                       [LayerSpec("adaptive", tuple(se_shape), 1, form, smooth=smooth)])


def parameter_report(spec: NetworkSpec) -> dict[str, Any]:
    """Itemised trainable-parameter counts.

    ``feature_extraction_scalar_bias`` counts the morphological layers as if
    each filter had one scalar bias instead of an image-sized grid.
    """
    items = []
    states = init_states(spec, 0)
    fe_grid = fe_scalar = 0
    for i, (l, st) in enumerate(zip(spec.layers, states)):
        for k, v in st.items():
            items.append({"layer": i, "kind": l.kind, "tensor": k, "shape": list(v.shape), "count": int(v.size)})
        if l.kind in MORPH_KINDS:
            se = int(st["weights"].size) + int(st.get("gate", np.empty(0)).size)
            fe_grid += se + int(st["bias"].size)
            fe_scalar += se + l.filters
    return {
        "items": items,
        "total": int(sum(it["count"] for it in items)),
        "feature_extraction_bias_grid": fe_grid,
        "feature_extraction_scalar_bias": fe_scalar,
    }


# -- model blob -------------------------------------------------------------

def _flat_params(states):
    for st in states:
        for k in sorted(st):
            yield k, st[k]


def save_model(path, spec: NetworkSpec, states) -> None:
    """Write ``<u32 LE json length><spec json><float64 LE params...>``."""
    blob = spec.to_json().encode("utf-8")
    parts = [struct.pack("<I", len(blob)), blob]
    parts += [np.ascontiguousarray(v, dtype="<f8").tobytes() for _, v in _flat_params(states)]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_model(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise ValueError("model blob truncated before header")
    (n,) = struct.unpack_from("<I", data, 0)
    if 4 + n > len(data):
        raise ValueError(f"model blob truncated inside spec json (need {4 + n} bytes, have {len(data)})")
    spec = NetworkSpec.from_json(data[4:4 + n].decode("utf-8"))
    states = init_states(spec, 0)
    off = 4 + n
    for _, v in _flat_params(states):
        nbytes = v.size * 8
        if off + nbytes > len(data):
            raise ValueError(f"model blob truncated at byte {off}")
        v[...] = np.frombuffer(data, dtype="<f8", count=v.size, offset=off).reshape(v.shape)
        off += nbytes
    if off != len(data):
        raise ValueError(f"model blob has {len(data) - off} trailing bytes")
    return spec, states
