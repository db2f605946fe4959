"""Detector network: depthwise-separable backbone, top-down FPN, anchor-free heads.

Weights live in a flat ordered mapping ``name -> ndarray`` (the weight
store). Layer objects only hold parameter names, so swapping or reloading the
store never leaves stale references behind.
"""
from collections import OrderedDict
from dataclasses import dataclass, replace
from typing import NamedTuple, Tuple

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, ShapeError, StateError

BN_BUFFERS = ("running_mean", "running_var")


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    The defaults are the reference topology (1,101,077 learnable scalars).
    """

    input_channels: int = 1
    stem_channels: int = 32
    stage_channels: Tuple[int, ...] = (64, 128, 256, 512)
    blocks_per_stage: Tuple[int, ...] = (1, 2, 3, 3)
    fpn_channels: int = 128
    num_classes: int = 2
    strides: Tuple[int, ...] = (8, 16, 32)
    activation: str = "silu"
    head_box_clamp: float = 8.0

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        self.strides = tuple(int(s) for s in self.strides)
        self.validate()

    def validate(self):
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ConfigError("stage_channels and blocks_per_stage need exactly 4 entries")
        if min(self.stage_channels) < 1 or min(self.blocks_per_stage) < 1:
            raise ConfigError("stage channels and block counts must be positive")
        for name in ("input_channels", "stem_channels", "fpn_channels", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.strides != (8, 16, 32):
            # the backbone is fixed at stem/2 followed by four /2 stages
            raise ConfigError(f"strides must be (8, 16, 32) for this topology, got {self.strides}")
        if self.activation not in T.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not self.head_box_clamp > 0:
            raise ConfigError("head_box_clamp must be positive")

    @property
    def max_stride(self):
        return max(self.strides)

    @property
    def num_outputs(self):
        return 5 + self.num_classes


def reference_config(**overrides):
    return replace(ModelConfig(), **overrides)


def shrunk_config(**overrides):
    """Small variant used for gradient checks and desk-scale training.

    Backbone channels 8/16/32/64 with the reference block layout; the FPN and
    heads stay at 64 channels, which is what lets an 8-frame set be memorized
    within 300 epochs at batch 4.
    """
    base = ModelConfig(
        stem_channels=8,
        stage_channels=(8, 16, 32, 64),
        blocks_per_stage=(1, 2, 3, 2),
        fpn_channels=64,
    )
    return replace(base, **overrides)


class ConvSpec(NamedTuple):
    name: str
    c_in: int
    c_out: int
    k: int
    stride: int
    groups: int
    bias: bool
    bn: bool
    act: bool
    out_stride: int  # cumulative stride of this layer's output


def layer_specs(config, separable=True):
    """Every convolution in forward order.

    With ``separable=False`` each depthwise+pointwise pair is replaced by one
    standard 3x3 convolution of the same in/out channels and stride, which is
    the baseline for FLOP comparisons.
    """
    specs = []

    def block(prefix, c_in, c_out, stride, out_stride):
        if separable:
            specs.append(ConvSpec(f"{prefix}.dw", c_in, c_in, 3, stride, c_in, False, True, True, out_stride))
            specs.append(ConvSpec(f"{prefix}.pw", c_in, c_out, 1, 1, 1, False, True, True, out_stride))
        else:
            specs.append(ConvSpec(f"{prefix}.conv", c_in, c_out, 3, stride, 1, False, True, True, out_stride))

    c = config.stem_channels
    specs.append(ConvSpec("stem.0.conv", config.input_channels, c, 3, 2, 1, False, True, True, 2))
    s = 2
    for i, (width, nblocks) in enumerate(zip(config.stage_channels, config.blocks_per_stage), start=1):
        s *= 2
        for b in range(nblocks):
            block(f"stage{i}.{b}", c, width, 2 if b == 0 else 1, s)
            c = width
    f = config.fpn_channels
    for level, stage in zip(("p3", "p4", "p5"), (2, 3, 4)):
        st = 2 ** (stage + 1)
        specs.append(ConvSpec(f"fpn.{level}.lateral", config.stage_channels[stage - 1], f, 1, 1, 1, True, False, False, st))
    for level, st in zip(("p3", "p4", "p5"), config.strides):
        block(f"fpn.{level}", f, f, 1, st)
    for level, st in zip(("p3", "p4", "p5"), config.strides):
        block(f"head.{level}", f, f, 1, st)
        specs.append(ConvSpec(f"head.{level}.pred", f, config.num_outputs, 1, 1, 1, True, False, False, st))
    return specs


def count_params(config, separable=True):
    total = 0
    for sp in layer_specs(config, separable):
        total += T.conv_param_count(sp.c_in, sp.c_out, sp.k, sp.k, sp.groups, sp.bias)
        if sp.bn:
            total += 2 * sp.c_out
    return total


def flop_estimate(config, input_hw, separable=True):
    """Multiply-accumulate count for one forward pass at ``input_hw`` (H, W)."""
    h, w = input_hw
    total = 0
    for sp in layer_specs(config, separable):
        ho, wo = -(-h // sp.out_stride), -(-w // sp.out_stride)
        total += ho * wo * sp.c_out * (sp.c_in // sp.groups) * sp.k * sp.k
    return total


def param_shapes(config):
    """Ordered ``name -> shape`` for every tensor in the weight store."""
    shapes = OrderedDict()
    for sp in layer_specs(config):
        shapes[f"{sp.name}.weight"] = (sp.c_out, sp.c_in // sp.groups, sp.k, sp.k)
        if sp.bias:
            shapes[f"{sp.name}.bias"] = (sp.c_out,)
        if sp.bn:
            for p in ("gamma", "beta") + BN_BUFFERS:
                shapes[f"{sp.name}_bn.{p}"] = (sp.c_out,)
    return shapes


_BN_INIT = {"gamma": 1.0, "running_var": 1.0}
OBJ_PRIOR = 0.001
PRED_WEIGHT_STD = 0.01


def init_weights(config, seed=0, dtype=np.float32):
    """Kaiming fan-in normal init in deterministic layer order.

    Prediction layers start near zero with the objectness bias set so every
    cell begins at probability ``OBJ_PRIOR``; otherwise the first updates are
    spent pushing thousands of background cells down.
    """
    rng = np.random.default_rng(seed)
    specs = {sp.name: sp for sp in layer_specs(config)}
    weights = OrderedDict()
    for name, shape in param_shapes(config).items():
        layer, param = name.rsplit(".", 1)
        if param == "weight":
            sp = specs[layer]
            fan_in = shape[1] * shape[2] * shape[3]
            gain = np.sqrt(2.0) if sp.act else 1.0
            std = PRED_WEIGHT_STD if layer.endswith(".pred") else gain / np.sqrt(fan_in)
            weights[name] = (rng.standard_normal(shape) * std).astype(dtype)
        elif layer.endswith(".pred"):
            bias = np.zeros(shape)
            bias[4] = -np.log((1 - OBJ_PRIOR) / OBJ_PRIOR)
            weights[name] = bias.astype(dtype)
        else:
            weights[name] = np.full(shape, _BN_INIT.get(param, 0.0), dtype=dtype)
    return weights


def check_weights(weights, config):
    """Raise ShapeError naming the first missing, extra or mis-shaped tensor."""
    expected = param_shapes(config)
    for name, shape in expected.items():
        if name not in weights:
            raise ShapeError(f"weight store is missing tensor {name!r}")
        if tuple(weights[name].shape) != shape:
            raise ShapeError(f"tensor {name!r} has shape {tuple(weights[name].shape)}, expected {shape}")
    for name in weights:
        if name not in expected:
            raise ShapeError(f"weight store has unexpected tensor {name!r}")


def is_learnable(name):
    return not name.endswith(BN_BUFFERS)


# ------------------------------------------------------------------- layers


class _ConvUnit:
    """conv -> optional BN -> optional activation, with cached forward state."""

    def __init__(self, spec, activation):
        self.spec = spec
        self.act, self.act_backward = T.ACTIVATIONS[activation]
        self._cache = None

    def params(self, w):
        sp = self.spec
        return T.ConvParams(
            w[f"{sp.name}.weight"],
            w.get(f"{sp.name}.bias"),
            stride=sp.stride,
            padding=sp.k // 2,
            groups=sp.groups,
        )

    def bn_params(self, w):
        n = f"{self.spec.name}_bn"
        return T.BatchNormParams(w[f"{n}.gamma"], w[f"{n}.beta"], w[f"{n}.running_mean"], w[f"{n}.running_var"])

    def forward(self, x, w, mode):
        cp = self.params(w)
        z = T.conv2d(x, cp)
        zb = T.batch_norm(z, self.bn_params(w), mode) if self.spec.bn else z
        out = self.act(zb) if self.spec.act else zb
        self._cache = (x, z, zb, mode)
        return out

    def backward(self, grad, w, grads):
        if self._cache is None:
            raise StateError(f"backward called on {self.spec.name} without a recorded forward")
        x, z, zb, mode = self._cache
        self._cache = None
        sp = self.spec
        if sp.act:
            grad = self.act_backward(grad, zb)
        if sp.bn:
            n = f"{sp.name}_bn"
            grad, dg, db = T.batch_norm_backward(grad, z, self.bn_params(w), mode)
            grads[f"{n}.gamma"] += dg
            grads[f"{n}.beta"] += db
        dx, dk, dbias = T.conv2d_backward(grad, x, self.params(w))
        grads[f"{sp.name}.weight"] += dk
        if dbias is not None:
            grads[f"{sp.name}.bias"] += dbias
        return dx


class _Sequence:
    def __init__(self, units):
        self.units = units

    def forward(self, x, w, mode):
        for u in self.units:
            x = u.forward(x, w, mode)
        return x

    def backward(self, grad, w, grads):
        for u in reversed(self.units):
            grad = u.backward(grad, w, grads)
        return grad


class Model:
    """Built network plus its weight store.

    ``forward`` returns one raw prediction tensor per pyramid level, finest
    first, with channels ``[tx, ty, tw, th, obj, class logits...]``.
    """

    def __init__(self, config, weights):
        check_weights(weights, config)
        self.config = config
        self.weights = weights
        self.grads = None
        units = {sp.name: _ConvUnit(sp, config.activation) for sp in layer_specs(config)}

        def group(prefix):
            return _Sequence([u for n, u in units.items() if n.startswith(prefix + ".")])

        self.stem = group("stem")
        self.stages = [group(f"stage{i}") for i in range(1, 5)]
        self.levels = ("p3", "p4", "p5")
        self.laterals = [units[f"fpn.{lv}.lateral"] for lv in self.levels]
        self.smooth = [_Sequence([units[f"fpn.{lv}.dw"], units[f"fpn.{lv}.pw"]]) for lv in self.levels]
        self.heads = [
            _Sequence([units[f"head.{lv}.dw"], units[f"head.{lv}.pw"], units[f"head.{lv}.pred"]])
            for lv in self.levels
        ]
        self._recorded = False

    # construction ------------------------------------------------------

    @classmethod
    def build(cls, config, seed=0):
        return cls(config, init_weights(config, seed))

    def astype(self, dtype):
        return Model(self.config, OrderedDict((k, v.astype(dtype)) for k, v in self.weights.items()))

    def copy(self):
        return Model(self.config, OrderedDict((k, v.copy()) for k, v in self.weights.items()))

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype

    def param_count(self):
        return sum(v.size for k, v in self.weights.items() if is_learnable(k))

    def flop_estimate(self, input_hw):
        return flop_estimate(self.config, input_hw)

    def learnable_names(self):
        return [k for k in self.weights if is_learnable(k)]

    # passes ------------------------------------------------------------

    def check_input(self, x):
        T.check_tensor(x)
        n, c, h, w = x.shape
        if c != self.config.input_channels:
            raise ShapeError(f"model expects {self.config.input_channels} input channels, got {c}")
        s = self.config.max_stride
        if h % s or w % s:
            raise ShapeError(
                f"input {h}x{w} is not divisible by the max stride {s}; "
                "letterbox it first (imaging.letterbox_to_stride)"
            )

    def forward(self, x, training=False, frozen_bn=False):
        """``frozen_bn`` keeps BN on its running statistics during a training pass."""
        self.check_input(x)
        x = x.astype(self.dtype, copy=False)
        mode = "train" if training and not frozen_bn else "infer"
        w = self.weights
        h = self.stem.forward(x, w, mode)
        feats = []
        for stage in self.stages:
            h = stage.forward(h, w, mode)
            feats.append(h)
        lat = [u.forward(f, w, mode) for u, f in zip(self.laterals, feats[1:])]
        p5 = lat[2]
        p4 = T.add(lat[1], T.upsample_nearest_2x(p5))
        p3 = T.add(lat[0], T.upsample_nearest_2x(p4))
        outs = []
        for merged, smooth, head in zip((p3, p4, p5), self.smooth, self.heads):
            outs.append(head.forward(smooth.forward(merged, w, mode), w, mode))
        self._recorded = True
        return outs

    def backward(self, grad_levels):
        """Accumulate parameter gradients into ``self.grads`` and return d(loss)/d(input)."""
        if not self._recorded:
            raise StateError("backward called without a recorded forward pass")
        self._recorded = False
        w = self.weights
        grads = OrderedDict((k, np.zeros_like(v)) for k, v in w.items() if is_learnable(k))
        dmerged = [
            smooth.backward(head.backward(g, w, grads), w, grads)
            for g, smooth, head in zip(grad_levels, self.smooth, self.heads)
        ]
        dp3, dp4, dp5 = dmerged
        dlat3, dup = T.add_backward(dp3)
        dp4 = dp4 + T.upsample_nearest_2x_backward(dup)
        dlat4, dup = T.add_backward(dp4)
        dlat5 = dp5 + T.upsample_nearest_2x_backward(dup)
        dfeats = [u.backward(g, w, grads) for u, g in zip(self.laterals, (dlat3, dlat4, dlat5))]
        g = dfeats[2]
        g = self.stages[3].backward(g, w, grads)
        g = self.stages[2].backward(g + dfeats[1], w, grads)
        g = self.stages[1].backward(g + dfeats[0], w, grads)
        g = self.stages[0].backward(g, w, grads)
        dx = self.stem.backward(g, w, grads)
        self.grads = grads
        return dx

    def output_shapes(self, input_hw, batch=1):
        h, w = input_hw
        return [(batch, self.config.num_outputs, h // s, w // s) for s in self.config.strides]
