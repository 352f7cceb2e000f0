"""Encoder, decoder and domain classifier stacks plus the reversal layer between them."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # dense | conv | deconv | batch_norm | leaky_relu | relu | sigmoid_out | dropout | flatten
    k: int = 0
    stride: int = 1
    channels: int = 0
    padding: int = 0
    output_padding: int = 0
    p: float = 0.0
    slope: float = 0.2


class Layer:
    params: tuple[Tensor, ...] = ()

    def __call__(self, x: Tensor, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
        raise NotImplementedError

    def buffers(self) -> dict[str, np.ndarray]:
        return {}


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (n_in, n_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)
        self.params = (self.weight, self.bias)

    def __call__(self, x, training, rng):
        return T.matmul(x, self.weight) + self.bias


class Conv(Layer):
    def __init__(self, c_in: int, spec: LayerSpec, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(c_in * spec.k * spec.k)
        self.spec = spec
        self.weight = Tensor(rng.uniform(-bound, bound, (spec.channels, c_in, spec.k, spec.k)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros((1, spec.channels, 1, 1)), requires_grad=True)
        self.params = (self.weight, self.bias)

    def __call__(self, x, training, rng):
        return T.conv2d(x, self.weight, self.spec.stride, self.spec.padding) + self.bias


class Deconv(Layer):
    def __init__(self, c_in: int, spec: LayerSpec, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(c_in * spec.k * spec.k)
        self.spec = spec
        self.weight = Tensor(rng.uniform(-bound, bound, (c_in, spec.channels, spec.k, spec.k)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros((1, spec.channels, 1, 1)), requires_grad=True)
        self.params = (self.weight, self.bias)

    def __call__(self, x, training, rng):
        s = self.spec
        return T.deconv2d(x, self.weight, s.stride, s.padding, s.output_padding) + self.bias


class BatchNorm(Layer):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum, self.eps = momentum, eps
        self.params = (self.gamma, self.beta)

    def __call__(self, x, training, rng):
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training, self.momentum, self.eps)

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class Activation(Layer):
    def __init__(self, spec: LayerSpec):
        self.spec = spec

    def __call__(self, x, training, rng):
        kind = self.spec.kind
        if kind == "leaky_relu":
            return T.leaky_relu(x, self.spec.slope)
        if kind == "relu":
            return T.relu(x)
        if kind == "sigmoid_out":
            return T.sigmoid(x)
        if kind == "tanh":
            return T.tanh(x)
        if kind == "dropout":
            return T.dropout(x, self.spec.p, training, rng)
        if kind == "flatten":
            return T.flatten(x)
        raise ValueError(f"unknown layer kind {kind!r}")


class Stack:
    """A sequential layer stack that tracks the shape it maps between."""

    def __init__(self, specs: Sequence[LayerSpec], input_shape: tuple[int, ...],
                 rng: np.random.Generator):
        self.specs = list(specs)
        self.input_shape = tuple(input_shape)
        self.layers: list[Layer] = []
        shape = self.input_shape
        for spec in self.specs:
            layer, shape = _build_layer(spec, shape, rng)
            self.layers.append(layer)
        self.output_shape = shape

    def __call__(self, x: Tensor, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        if x.shape[1:] != self.input_shape:
            raise T.DimensionError(f"stack expects per-sample shape {self.input_shape}, got {x.shape[1:]}")
        for layer in self.layers:
            x = layer(x, training, rng)
        return x

    @property
    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params]

    def buffers(self) -> list[np.ndarray]:
        return [b for layer in self.layers for b in layer.buffers().values()]

    def n_params(self) -> int:
        return sum(p.values.size for p in self.params)


def _build_layer(spec: LayerSpec, shape: tuple[int, ...], rng):
    kind = spec.kind
    if kind == "dense":
        if len(shape) != 1:
            raise T.DimensionError(f"dense layer needs flat input, got {shape}")
        return Dense(shape[0], spec.channels, rng), (spec.channels,)
    if kind in ("conv", "deconv"):
        if len(shape) != 3:
            raise T.DimensionError(f"{kind} layer needs (C, H, W) input, got {shape}")
        c, h, w = shape
        if kind == "conv":
            ho = T.conv_output_extent(h, spec.k, spec.stride, spec.padding)
            wo = T.conv_output_extent(w, spec.k, spec.stride, spec.padding)
            layer = Conv(c, spec, rng)
        else:
            ho = T.deconv_output_extent(h, spec.k, spec.stride, spec.padding, spec.output_padding)
            wo = T.deconv_output_extent(w, spec.k, spec.stride, spec.padding, spec.output_padding)
            layer = Deconv(c, spec, rng)
        if ho < 1 or wo < 1:
            raise T.DimensionError(f"{kind} geometry {spec} collapses input {shape}")
        return layer, (spec.channels, ho, wo)
    if kind == "batch_norm":
        return BatchNorm(shape[0]), shape
    if kind == "flatten":
        return Activation(spec), (int(np.prod(shape)),)
    return Activation(spec), shape


# ---------------------------------------------------------------- architectures

def encoder_specs(arch: str, slope: float = 0.2) -> list[LayerSpec]:
    if arch == "mlp":
        return [LayerSpec("dense", channels=16), LayerSpec("leaky_relu", slope=slope),
                LayerSpec("dense", channels=8)]
    if arch == "conv":
        specs = []
        for k, s, c in ((3, 2, 32), (3, 2, 16), (3, 3, 8)):
            specs.append(LayerSpec("conv", k=k, stride=s, channels=c, padding=1))
            specs += [LayerSpec("batch_norm"), LayerSpec("leaky_relu", slope=slope)]
        return specs[:-2]
    raise ValueError(f"unknown arch {arch!r}")


def decoder_specs(arch: str, out_dim: int, slope: float = 0.2, bounded: bool = True) -> list[LayerSpec]:
    if arch == "mlp":
        specs = [LayerSpec("dense", channels=16), LayerSpec("leaky_relu", slope=slope),
                 LayerSpec("dense", channels=out_dim)]
    elif arch == "conv":
        specs = []
        for k, s, c, op in ((3, 3, 16, 0), (3, 2, 32, 1), (3, 2, out_dim, 1)):
            specs.append(LayerSpec("deconv", k=k, stride=s, channels=c, padding=1, output_padding=op))
            specs += [LayerSpec("batch_norm"), LayerSpec("leaky_relu", slope=slope)]
        specs = specs[:-2]
    else:
        raise ValueError(f"unknown arch {arch!r}")
    if bounded:
        specs.append(LayerSpec("sigmoid_out"))
    return specs


def classifier_specs(dropout: float = 0.5, hidden: int = 128) -> list[LayerSpec]:
    return [LayerSpec("dense", channels=hidden), LayerSpec("relu"), LayerSpec("dropout", p=dropout),
            LayerSpec("dense", channels=hidden), LayerSpec("relu"), LayerSpec("dropout", p=dropout),
            LayerSpec("dense", channels=1), LayerSpec("sigmoid_out")]


def build_encoder(arch: str, input_shape: tuple[int, ...], rng, slope: float = 0.2) -> Stack:
    return Stack(encoder_specs(arch, slope), input_shape, rng)


def build_decoder(arch: str, feature_shape: tuple[int, ...], out_shape: tuple[int, ...], rng,
                  slope: float = 0.2, bounded: Optional[bool] = None) -> Stack:
    if bounded is None:
        bounded = arch == "conv"
    out_dim = out_shape[0]
    dec = Stack(decoder_specs(arch, out_dim, slope, bounded), feature_shape, rng)
    if dec.output_shape != tuple(out_shape):
        raise T.DimensionError(f"decoder maps to {dec.output_shape}, input was {out_shape}")
    return dec


def build_domain_classifier(feature_width: int, rng, dropout: float = 0.5) -> Stack:
    return Stack(classifier_specs(dropout), (feature_width,), rng)


@dataclass
class ArchConfig:
    arch: str = "mlp"
    input_shape: tuple[int, ...] = (2,)
    leaky_slope: float = 0.2
    dropout: float = 0.5
    bounded_output: Optional[bool] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)


@dataclass
class ModelBundle:
    config: ArchConfig
    encoder: Stack
    decoder: Stack
    classifier: Stack
    grl_coefficient: float = 1.0
    rng: np.random.Generator = field(default_factory=lambda: np.random.Generator(np.random.Philox(0)))

    @property
    def ae_params(self) -> list[Tensor]:
        return self.encoder.params + self.decoder.params

    @property
    def classifier_params(self) -> list[Tensor]:
        return self.classifier.params

    def buffers(self) -> list[np.ndarray]:
        return self.encoder.buffers() + self.decoder.buffers() + self.classifier.buffers()


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator owned by one run."""
    return np.random.Generator(np.random.Philox(seed))


def build_model(config: ArchConfig, seed: int, grl_coefficient: float = 1.0) -> ModelBundle:
    rng = make_rng(seed)
    enc = build_encoder(config.arch, config.input_shape, rng, config.leaky_slope)
    dec = build_decoder(config.arch, enc.output_shape, config.input_shape, rng,
                        config.leaky_slope, config.bounded_output)
    width = int(np.prod(enc.output_shape))
    clf = build_domain_classifier(width, rng, config.dropout)
    return ModelBundle(config, enc, dec, clf, grl_coefficient, rng)


def forward_autoencode(bundle: ModelBundle, x: Tensor, training: bool = False):
    features = bundle.encoder(x, training, bundle.rng)
    return features, bundle.decoder(features, training, bundle.rng)


def domain_logits(bundle: ModelBundle, features: Tensor, training: bool = False,
                  coefficient: Optional[float] = None) -> Tensor:
    """Classifier pre-sigmoid scores, routed through the reversal layer. Shape (N,)."""
    c = bundle.grl_coefficient if coefficient is None else coefficient
    x = T.flatten(T.grl(features, c))
    for layer in bundle.classifier.layers[:-1]:
        x = layer(x, training, bundle.rng)
    return T.reshape(x, (features.shape[0],))


def forward_domain(bundle: ModelBundle, features: Tensor, training: bool = False,
                   coefficient: Optional[float] = None) -> Tensor:
    """P(target | features) in (0, 1), routed through the reversal layer. Shape (N,)."""
    return T.sigmoid(domain_logits(bundle, features, training, coefficient))


# ---------------------------------------------------------------- checkpoints

def _encode_state(o):
    # Philox state carries uint64 arrays; JSON ints are exact at any width
    if isinstance(o, dict):
        return {k: _encode_state(v) for k, v in o.items()}
    if isinstance(o, np.ndarray):
        return {"__uint64__": [int(v) for v in o]}
    return o


def _decode_state(o):
    if isinstance(o, dict):
        if set(o) == {"__uint64__"}:
            return np.array(o["__uint64__"], dtype=np.uint64)
        return {k: _decode_state(v) for k, v in o.items()}
    return o


def save_checkpoint(bundle: ModelBundle, path: str | Path, extra: Optional[dict] = None) -> None:
    """Write an ``.npz`` holding every parameter, BN buffer, the arch config and rng state."""
    arrays = {}
    for prefix, stack in (("enc", bundle.encoder), ("dec", bundle.decoder), ("clf", bundle.classifier)):
        for i, p in enumerate(stack.params):
            arrays[f"{prefix}.param{i}"] = p.values
        for i, b in enumerate(stack.buffers()):
            arrays[f"{prefix}.buffer{i}"] = b
    meta = {"config": bundle.config.to_dict(), "grl_coefficient": bundle.grl_coefficient,
            "rng_state": _encode_state(bundle.rng.bit_generator.state), "extra": extra or {}}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[ModelBundle, dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(data["meta"].tobytes().decode())
        bundle = build_model(ArchConfig.from_dict(meta["config"]), seed=0,
                             grl_coefficient=meta["grl_coefficient"])
        for prefix, stack in (("enc", bundle.encoder), ("dec", bundle.decoder), ("clf", bundle.classifier)):
            for i, p in enumerate(stack.params):
                p.values[...] = data[f"{prefix}.param{i}"]
            for i, b in enumerate(stack.buffers()):
                b[...] = data[f"{prefix}.buffer{i}"]
    bundle.rng.bit_generator.state = _decode_state(meta["rng_state"])
    return bundle, meta.get("extra", {})
