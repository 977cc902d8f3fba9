"""Parameterized layer objects over the functional primitives.

Layers own their tensors; ``named_parameters`` walks attributes in
definition order so registry names stay stable across runs. Weight
init is He-normal for convolution kernels, zeros for biases, ones/zeros
for normalization scale/shift, 0.25 for PReLU slopes.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from segforge import boxconv as bcv
from segforge import ops
from segforge import tensor as tz
from segforge.tensor import Tensor, derive_seed

__all__ = [
    "Layer",
    "SeedStream",
    "Conv2d",
    "ConvTranspose2d",
    "BatchNorm2d",
    "PReLU",
    "SpatialDropout2d",
    "BoxConv2d",
]


class SeedStream:
    """Deterministic per-layer seeds derived from one base seed."""

    def __init__(self, base_seed):
        self.base_seed = int(base_seed)
        self._n = 0

    def next(self, tag=""):
        self._n += 1
        return derive_seed(self.base_seed, self._n, tag)


class Layer:
    """Base block: named parameter registry, mode switching, constraints."""

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Layer):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Layer):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        out = OrderedDict()
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[prefix + name] = value
        for name, child in self._children():
            out.update(child.named_parameters(prefix + name + "."))
        return out

    def named_buffers(self, prefix=""):
        """Non-learnable state that still belongs in checkpoints."""
        out = OrderedDict()
        for name, child in self._children():
            out.update(child.named_buffers(prefix + name + "."))
        return out

    def set_mode(self, mode):
        for _, child in self._children():
            child.set_mode(mode)

    def constrain(self):
        """Project parameters back onto their valid sets after an optimizer step."""
        for _, child in self._children():
            child.constrain()

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Layer):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, dilation=1, bias=True, seed=0, dtype=np.float32):
        fan_in = in_ch * kernel * kernel
        self.weight = tz.he_normal((out_ch, in_ch, kernel, kernel), seed, fan_in, dtype=dtype, requires_grad=True)
        self.bias = tz.zeros((out_ch,), dtype=dtype, requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding
        self.dilation = dilation

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding, dilation=self.dilation)


class ConvTranspose2d(Layer):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, bias=True, seed=0, dtype=np.float32):
        fan_in = in_ch * kernel * kernel
        self.weight = tz.he_normal((in_ch, out_ch, kernel, kernel), seed, fan_in, dtype=dtype, requires_grad=True)
        self.bias = tz.zeros((out_ch,), dtype=dtype, requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return ops.conv_transpose2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Layer):
    def __init__(self, channels, dtype=np.float32, momentum=0.1, eps=1e-5):
        self.state = ops.batchnorm_state(channels, dtype=dtype, momentum=momentum, eps=eps)

    def named_parameters(self, prefix=""):
        return OrderedDict([(prefix + "scale", self.state.scale), (prefix + "shift", self.state.shift)])

    def named_buffers(self, prefix=""):
        return OrderedDict(
            [
                (prefix + "running_mean", self.state.running_mean),
                (prefix + "running_var", self.state.running_var),
                (prefix + "updates", np.array([self.state.updates], dtype=np.int64)),
            ]
        )

    def load_buffers(self, values, prefix=""):
        self.state.running_mean = values[prefix + "running_mean"].copy()
        self.state.running_var = values[prefix + "running_var"].copy()
        self.state.updates = int(values[prefix + "updates"][0])

    def set_mode(self, mode):
        self.state.mode = mode

    def forward(self, x):
        return ops.batchnorm2d(x, self.state)


class PReLU(Layer):
    def __init__(self, channels, init=0.25, dtype=np.float32):
        self.slopes = tz.constant((channels,), init, dtype=dtype, requires_grad=True)

    def forward(self, x):
        return ops.prelu(x, self.slopes)


class SpatialDropout2d(Layer):
    """Channel dropout whose per-call masks come from an owned seeded stream."""

    def __init__(self, p, seed=0):
        self.p = float(p)
        self.mode = "eval"
        self._rng = tz.make_rng(seed)

    def set_mode(self, mode):
        self.mode = mode

    def forward(self, x):
        if self.mode != "train" or self.p == 0.0:
            return x
        call_seed = int(self._rng.integers(0, 2**62))
        return ops.spatial_dropout2d(x, self.p, seed=call_seed, mode="train")


class BoxConv2d(Layer):
    """One learnable box per input plane, clamped to the feature-map radius."""

    def __init__(self, channels, radius, boxes_per_plane=1, delta_min=1.0, seed=0):
        self.params = bcv.init_boxes(
            seed, channels, boxes_per_plane, r0=radius / 2.0, delta_min=delta_min, radius=radius
        )

    def named_parameters(self, prefix=""):
        return OrderedDict([(prefix + "coords", self.params.coords)])

    def constrain(self):
        self.params.clamp_()

    def forward(self, x):
        return bcv.box_convolution(x, self.params)
