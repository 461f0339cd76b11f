"""Frozen base network with designated tap points.

The backbone is a flat layer sequence; tap m (1-based) exposes the
activation right after layer `tap_indices[m-1]`. Heads attach to those
activations; after pretraining the backbone is frozen and its parameters
never receive gradient updates again. A frozen backbone is immutable and
safe to share across evaluation workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .exceptions import ConfigError, ShapeError, TrainingError
from .layers import ConvLayer, DenseLayer, Flatten, MaxPool, Relu
from .optim import make_optimizer, minibatches
from .rng import SplitMix64


@dataclass
class TapActivations:
    """Per-batch tap activations plus the final logits, from one forward pass."""

    taps: list          # M tensors, in tap order
    final: Tensor       # [N, K] logits


@dataclass
class BackboneModel:
    layers: list
    tap_indices: list
    input_shape: tuple
    num_classes: int
    frozen: bool = False
    tap_view_shapes: list = field(default_factory=list)

    def __post_init__(self):
        m = len(self.tap_indices)
        if m == 0:
            raise ConfigError("backbone needs at least one tap point")
        if any(b <= a for a, b in zip(self.tap_indices, self.tap_indices[1:])):
            raise ConfigError(f"tap indices must be strictly increasing: {self.tap_indices}")
        if self.tap_indices[-1] >= len(self.layers) - 1:
            raise ConfigError("last tap must precede the final classifier layer")
        if not self.tap_view_shapes:
            self.tap_view_shapes = [
                _spatial_view(shape) for shape in self.tap_shapes()
            ]

    @property
    def num_taps(self) -> int:
        return len(self.tap_indices)

    def params(self) -> list:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def layer_shapes(self) -> list:
        """Per-sample output shape after each layer."""
        shapes = []
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
            shapes.append(shape)
        return shapes

    def tap_shapes(self) -> list:
        shapes = self.layer_shapes()
        return [shapes[i] for i in self.tap_indices]

    def _check_input(self, x: Tensor):
        if tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ShapeError(
                f"backbone expects input {self.input_shape}, got {tuple(x.shape[1:])}")

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x)
        h = x
        for layer in self.layers:
            h = layer.forward(h)
        return h

    def forward_with_taps(self, x: Tensor) -> TapActivations:
        """One pass through the layer stack, recording tapped activations."""
        self._check_input(x)
        taps = []
        want = set(self.tap_indices)
        h = x
        for i, layer in enumerate(self.layers):
            h = layer.forward(h)
            if i in want:
                taps.append(h)
        return TapActivations(taps=taps, final=h)

    def prefix_flops(self, m: int) -> int:
        """Per-sample backbone FLOPs up to and including tap m (1-based).

        The sentinel m = M + 1 returns the full-network cost. Head and
        ensemble costs are accounted separately by the cost table.
        """
        if m == self.num_taps + 1:
            return self.total_flops()
        if not 1 <= m <= self.num_taps:
            raise IndexError(f"tap index {m} outside 1..{self.num_taps + 1}")
        upto = self.tap_indices[m - 1]
        total = 0
        shape = self.input_shape
        for layer in self.layers[:upto + 1]:
            total += layer.flops(shape)
            shape = layer.out_shape(shape)
        return total

    def total_flops(self) -> int:
        total = 0
        shape = self.input_shape
        for layer in self.layers:
            total += layer.flops(shape)
            shape = layer.out_shape(shape)
        return total

    def freeze(self):
        self.frozen = True
        for p in self.params():
            p.requires_grad = False
            p.grad = None

    def param_entries(self) -> list:
        entries = []
        for i, layer in enumerate(self.layers):
            for name, t in layer.param_entries():
                entries.append((f"backbone.{i}.{name}", t))
        return entries

    def param_bytes(self) -> bytes:
        return b"".join(t.data.tobytes() for _, t in self.param_entries())


def _spatial_view(shape: tuple) -> tuple:
    """(C, H, W) view of a tap activation for conv-based heads.

    Flat feature vectors are viewed as a single-channel map using the
    most-square factorization of the width, which keeps the head
    architecture uniform across backbone families.
    """
    if len(shape) == 3:
        return tuple(shape)
    if len(shape) == 1:
        width = shape[0]
        h = math.isqrt(width)
        while width % h != 0:
            h -= 1
        return (1, h, width // h)
    raise ConfigError(f"unsupported tap activation shape {shape}")


def make_mlp_backbone(in_dim: int, hidden: int, depth: int, num_classes: int,
                      seed: int) -> BackboneModel:
    """Dense relu stack with a tap after each hidden activation."""
    rng = SplitMix64(seed)
    layers: list = []
    taps = []
    prev = in_dim
    for _ in range(depth):
        layers.append(DenseLayer.create(prev, hidden, rng))
        layers.append(Relu())
        taps.append(len(layers) - 1)
        prev = hidden
    layers.append(DenseLayer.create(prev, num_classes, rng))
    return BackboneModel(layers=layers, tap_indices=taps,
                         input_shape=(in_dim,), num_classes=num_classes)


def make_cnn_backbone(in_shape: tuple, channels: int, blocks: int,
                      num_classes: int, seed: int) -> BackboneModel:
    """Conv/relu/pool blocks with channel doubling; tap after each block."""
    rng = SplitMix64(seed)
    layers: list = []
    taps = []
    c_in = in_shape[0]
    c_out = channels
    shape = tuple(in_shape)
    for _ in range(blocks):
        layers.append(ConvLayer.create(c_in, c_out, 3, rng, stride=1, padding="same"))
        layers.append(Relu())
        layers.append(MaxPool(2))
        taps.append(len(layers) - 1)
        c_in = c_out
        c_out *= 2
    layers.append(Flatten())
    # resolve flattened width by walking the shapes so far
    for layer in layers:
        shape = layer.out_shape(shape)
    layers.append(DenseLayer.create(shape[0], num_classes, rng))
    return BackboneModel(layers=layers, tap_indices=taps,
                         input_shape=tuple(in_shape), num_classes=num_classes)


def pretrain_backbone(model: BackboneModel, dataset: Dataset, *, epochs: int,
                      lr: float, batch_size: int, optimizer: str = "adam",
                      seed: int = 0) -> BackboneModel:
    """Minibatch cross-entropy training of the base network, then freeze.

    Training and data-order randomness come from one SplitMix64 stream,
    so a fixed seed reproduces the final parameters exactly.
    """
    if model.frozen:
        raise ConfigError("backbone is already frozen")
    if dataset.labels.size and dataset.labels.max() >= model.num_classes:
        raise ConfigError("dataset labels exceed backbone class count")
    rng = SplitMix64(seed)
    opt = make_optimizer(optimizer, model.params(), lr)
    n = len(dataset)
    for epoch in range(epochs):
        for batch in minibatches(n, batch_size, rng):
            x = Tensor(dataset.inputs[batch])
            y = dataset.labels[batch]
            loss = ad.cross_entropy(ad.log_softmax(model.forward(x)), y)
            if not np.isfinite(loss.data):
                raise TrainingError(f"backbone pretraining diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.freeze()
    return model


def backbone_logits(model: BackboneModel, inputs: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Plain forward over a large batch, in the standard evaluation chunks.

    Chunking is a fixed execution parameter (256), so everything that
    claims bit-identity with "the base network" compares against this.
    """
    parts = [model.forward(Tensor(inputs[lo:lo + chunk])).data
             for lo in range(0, inputs.shape[0], chunk)]
    return np.concatenate(parts)


def backbone_accuracy(model: BackboneModel, dataset: Dataset) -> float:
    logits = backbone_logits(model, dataset.inputs)
    return float((logits.argmax(axis=1) == dataset.labels).mean())
