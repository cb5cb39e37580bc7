"""Dense ReLU feature extractor, growing linear head, manual backprop and Adam."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .numerics import DimensionError, SeededRng

RELU = "relu"
IDENTITY = "identity"


@dataclass
class Layer:
    weight: np.ndarray  # (in, out); h = x @ weight + bias
    bias: np.ndarray
    activation: str = RELU

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape


@dataclass
class BackboneParams:
    layers: list[Layer]

    def __post_init__(self) -> None:
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise DimensionError("consecutive layer dimensions do not chain")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out


def init_backbone(sizes: list[int], rng: SeededRng) -> BackboneParams:
    """He-initialized MLP; the last layer is the (linear) feature layer."""
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        w = rng.normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        layers.append(Layer(w, np.zeros(fan_out), IDENTITY if last else RELU))
    return BackboneParams(layers)


@dataclass
class ClassifierHead:
    weight: np.ndarray  # (n, m), logits = f @ weight
    task_ranges: list[tuple[int, int]] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def columns(self, task: int | None = None) -> np.ndarray:
        """Head columns of one task (0-based), or all columns."""
        if task is None:
            return np.arange(self.num_classes)
        start, stop = self.task_ranges[task]
        return np.arange(start, stop)


def empty_head(feature_dim: int) -> ClassifierHead:
    return ClassifierHead(np.zeros((feature_dim, 0)), [])


def extend_head(head: ClassifierHead, new_class_count: int, init_scale: float, rng: SeededRng) -> ClassifierHead:
    if new_class_count < 1:
        raise ValueError("new_class_count must be at least 1")
    n, m = head.weight.shape
    fresh = rng.normal((n, new_class_count)) * init_scale
    weight = np.concatenate([head.weight, fresh], axis=1)
    return ClassifierHead(weight, head.task_ranges + [(m, m + new_class_count)])


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each layer
    preacts: list[np.ndarray]
    features: np.ndarray


def forward_features(x, params: BackboneParams, cache: bool = False):
    """Features for a single vector or a batch of row vectors."""
    h = np.asarray(x, dtype=np.float64)
    single = h.ndim == 1
    if single:
        h = h[None, :]
    if h.shape[1] != params.input_dim:
        raise DimensionError(f"input has dim {h.shape[1]}, backbone expects {params.input_dim}")
    inputs, preacts = [], []
    for layer in params.layers:
        inputs.append(h)
        z = h @ layer.weight + layer.bias
        preacts.append(z)
        h = np.maximum(z, 0.0) if layer.activation == RELU else z
    feats = h[0] if single else h
    if cache:
        return feats, ForwardCache(inputs, preacts, h)
    return feats


@dataclass
class GradientBuffer:
    layers: list[tuple[np.ndarray, np.ndarray]]  # (dW, db) per layer
    head: np.ndarray | None = None

    def arrays(self) -> list[np.ndarray]:
        out = []
        for dw, db in self.layers:
            out.extend((dw, db))
        if self.head is not None:
            out.append(self.head)
        return out


def backward(params: BackboneParams, cache: ForwardCache | None, grad_features) -> GradientBuffer:
    """Backpropagate dL/dfeatures (batch x n) to every backbone parameter."""
    if cache is None:
        raise RuntimeError("backward needs the cache of a forward pass")
    g = np.asarray(grad_features, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    grads = []
    for layer, h_in, z in zip(reversed(params.layers), reversed(cache.inputs), reversed(cache.preacts)):
        if layer.activation == RELU:
            g = g * (z > 0)
        grads.append((h_in.T @ g, g.sum(axis=0)))
        g = g @ layer.weight.T
    grads.reverse()
    return GradientBuffer(grads)


@dataclass
class IncrementalModel:
    backbone: BackboneParams
    head: ClassifierHead

    def features(self, x) -> np.ndarray:
        return forward_features(x, self.backbone)

    def logits(self, x) -> np.ndarray:
        return self.features(x) @ self.head.weight

    def parameters(self) -> list[np.ndarray]:
        return self.backbone.arrays() + [self.head.weight]

    def snapshot(self) -> "ModelSnapshot":
        return ModelSnapshot.of(self)


class ModelSnapshot(IncrementalModel):
    """Frozen copy of a model; its arrays are made read-only."""

    @classmethod
    def of(cls, model: IncrementalModel) -> "ModelSnapshot":
        backbone = copy.deepcopy(model.backbone)
        head = ClassifierHead(model.head.weight.copy(), list(model.head.task_ranges))
        for a in backbone.arrays() + [head.weight]:
            a.setflags(write=False)
        return cls(backbone, head)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in self.parameters():
            h.update(a.tobytes())
        return h.hexdigest()


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """In-place Adam update with decoupled weight decay.

    ``lr`` may be a scalar or one rate per parameter array (split rates).
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    rates = lr if isinstance(lr, (list, tuple)) else [lr] * len(params)
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    root_bc2 = np.sqrt(1.0 - beta2**state.step)
    for p, g, m, v, rate in zip(params, grads, state.m, state.v, rates):
        if p.shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        if weight_decay:
            p *= 1.0 - rate * weight_decay
        denom = np.sqrt(v)
        denom /= root_bc2
        denom += eps
        p -= (rate / bc1) * m / denom
    return state
