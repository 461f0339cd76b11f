"""Internal classifiers: conv -> relu -> blend-pool -> linear, chained.

Head m > 1 may take the previous head's raw logits as an extra input to
its linear layer (the forward dependence that lets later heads improve on
earlier answers). During training that link is gradient-blocked so a
later head's loss cannot disturb an earlier head's parameters; the value
still flows forward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import CascadeError, ConfigError, ZtwError
from .layers import ConvLayer, DenseLayer, SdnPool
from .rng import SplitMix64


@dataclass
class InternalClassifier:
    conv: ConvLayer
    pool: SdnPool
    linear: DenseLayer
    cascade_enabled: bool
    index: int                 # 1-based position in the chain
    input_view: tuple          # (C, H, W) view of the tap activation
    num_classes: int

    def __post_init__(self):
        if self.index < 1:
            raise ConfigError("head index is 1-based")
        feat = self._feature_width()
        expected = feat + self.num_classes if (self.cascade_enabled and self.index > 1) else feat
        if self.linear.in_features != expected:
            raise ConfigError(
                f"head {self.index}: linear expects {self.linear.in_features} inputs, "
                f"needs {expected} (features {feat}"
                + (f" + {self.num_classes} cascade" if expected != feat else "") + ")")

    def _feature_width(self) -> int:
        c, h, w = self.conv.out_shape(self.input_view)
        th, tw = self.pool.target
        return c * th * tw

    def params(self) -> list:
        return self.conv.params() + self.pool.params() + self.linear.params()

    def param_entries(self) -> list:
        out = []
        for sub, obj in (("conv", self.conv), ("pool", self.pool), ("linear", self.linear)):
            for name, t in obj.param_entries():
                out.append((f"ic{self.index}.{sub}.{name}", t))
        return out

    def param_bytes(self) -> bytes:
        return b"".join(t.data.tobytes() for _, t in self.param_entries())

    def flops(self) -> int:
        """Per-sample cost of evaluating this head on its tap activation."""
        conv_out = self.conv.out_shape(self.input_view)
        total = self.conv.flops(self.input_view)
        total += int(np.prod(conv_out))              # relu
        total += self.pool.flops(conv_out)
        total += self.linear.flops((self.linear.in_features,))
        return total


def make_head(index: int, input_view: tuple, num_classes: int, cascade: bool,
              rng: SplitMix64, pool_target=(2, 2), conv_stride: int = 1) -> InternalClassifier:
    """Standard head: k=3 conv preserving channel count, blend pool, linear."""
    c = input_view[0]
    conv = ConvLayer.create(c, c, 3, rng, stride=conv_stride, padding="same")
    pool = SdnPool.create(target=pool_target)
    feat = c * pool_target[0] * pool_target[1]
    in_features = feat + num_classes if (cascade and index > 1) else feat
    linear = DenseLayer.create(in_features, num_classes, rng)
    return InternalClassifier(conv=conv, pool=pool, linear=linear,
                              cascade_enabled=cascade, index=index,
                              input_view=tuple(input_view), num_classes=num_classes)


def make_heads(backbone, cascade: bool, seed: int, pool_target=(2, 2),
               conv_stride: int = 1) -> list:
    rng = SplitMix64(seed)
    heads = []
    for m, view in enumerate(backbone.tap_view_shapes, start=1):
        heads.append(make_head(m, view, backbone.num_classes, cascade, rng,
                               pool_target=pool_target, conv_stride=conv_stride))
    return heads


@dataclass
class HeadOutputs:
    logits: list   # M tensors [N, K]
    probs: list    # M tensors [N, K]; rows sum to 1


def head_forward(ic: InternalClassifier, activation: Tensor,
                 prev_logits: Tensor | None = None, detach_cascade: bool = True) -> Tensor:
    """Logits of one head given its tap activation (and cascade input)."""
    wants_prev = ic.cascade_enabled and ic.index > 1
    if wants_prev and prev_logits is None:
        raise CascadeError(f"head {ic.index} requires the previous head's logits")
    if not wants_prev and prev_logits is not None:
        raise CascadeError(f"head {ic.index} does not take a cascade input")

    n = activation.shape[0]
    x = ad.reshape(activation, (n,) + ic.input_view)
    h = ad.relu(ic.conv.forward(x))
    h = ic.pool.forward(h)
    feats = ad.reshape(h, (n, -1))
    if wants_prev:
        link = ad.stop_gradient(prev_logits) if detach_cascade else prev_logits
        feats = ad.concat([feats, link], axis=-1)
    return ic.linear.forward(feats)


def cascade_forward_all(heads: list, taps, detach_cascade: bool = True) -> HeadOutputs:
    """Left-to-right evaluation of the head chain on tapped activations."""
    if len(heads) != len(taps.taps):
        raise ConfigError(f"{len(heads)} heads but {len(taps.taps)} tap activations")
    logits: list = []
    probs: list = []
    prev = None
    for ic, act in zip(heads, taps.taps):
        wants_prev = ic.cascade_enabled and ic.index > 1
        try:
            out = head_forward(ic, act, prev_logits=prev if wants_prev else None,
                               detach_cascade=detach_cascade)
        except ZtwError as e:
            raise type(e)(f"head {ic.index}: {e}") from e
        logits.append(out)
        probs.append(ad.softmax(out))
        prev = out
    return HeadOutputs(logits=logits, probs=probs)
