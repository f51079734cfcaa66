"""Configurable 1-D convolutional residual feature extractor.

Maps a raw D_in x L_in frame sequence to a D_out x L_out sequence for the
pooling layer, halving the temporal axis (ceiling division) at every
downsampling stage. Convolutions use symmetric same-padding so
L_out = ceil(L_in / stride) holds for every length; residual blocks are
pre-activation with parameter-free shortcuts (strided subsampling plus
zero-padded channels), so a block with all-zero weights is exactly the
(possibly downsampled) identity. Forward and backward are written by
hand; there is no autodiff anywhere in this package.

Internally everything is batched as (B, channels, length); the public
single-utterance API adds and strips the batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ndcore import DimensionError, Param, Rng

ACTIVATIONS = ("relu", "linear", "tanh")


class LengthError(ValueError):
    """Input sequence is shorter than the network can downsample."""


@dataclass
class StageSpec:
    channels: int
    blocks: int
    downsample: bool

    def __post_init__(self):
        if self.channels < 1 or self.blocks < 1:
            raise ValueError("channels and blocks must be >= 1")


@dataclass
class ConvSpec:
    """Network shape: stem conv into a list of residual stages."""

    in_dim: int
    stages: list
    kernel: int = 3
    activation: str = "relu"

    def __post_init__(self):
        if self.in_dim < 1:
            raise ValueError("in_dim must be >= 1")
        if not self.stages:
            raise ValueError("at least one stage required")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be odd and >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        prev = self.stages[0].channels
        for st in self.stages[1:]:
            if st.channels < prev:
                raise ValueError("stage channels must be non-decreasing "
                                 "(shortcuts zero-pad, never truncate)")
            prev = st.channels

    @property
    def num_downsamples(self) -> int:
        return sum(1 for st in self.stages if st.downsample)

    @property
    def min_length(self) -> int:
        return 2 ** self.num_downsamples

    @property
    def out_dim(self) -> int:
        return self.stages[-1].channels

    def out_length(self, length: int) -> int:
        for st in self.stages:
            if st.downsample:
                length = -(-length // 2)
        return length

    @classmethod
    def desk_default(cls, in_dim: int) -> "ConvSpec":
        """Two downsampling stages, 16 then 32 channels, one block each."""
        return cls(in_dim=in_dim,
                   stages=[StageSpec(16, 1, True), StageSpec(32, 1, True)],
                   kernel=3, activation="relu")


def _act_forward(kind: str, x: np.ndarray):
    if kind == "relu":
        mask = x > 0
        return x * mask, mask
    if kind == "tanh":
        y = np.tanh(x)
        return y, y
    return x, None


def _act_backward(kind: str, cache, dy: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return dy * cache
    if kind == "tanh":
        return dy * (1.0 - cache ** 2)
    return dy


def _same_padding(length: int, kernel: int, stride: int):
    out_len = -(-length // stride)
    total = max((out_len - 1) * stride + kernel - length, 0)
    left = total // 2
    return out_len, left, total - left


class Conv1d:
    """Cross-correlation over time with same-padding and optional stride."""

    def __init__(self, name, in_channels, out_channels, kernel, stride,
                 rng: Rng | None = None):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        if rng is None:
            w = np.zeros((out_channels, in_channels, kernel))
        else:
            std = np.sqrt(2.0 / (in_channels * kernel))
            w = rng.normal((out_channels, in_channels, kernel), std=std)
        self.weight = Param(f"{name}.weight", w)
        self.bias = Param(f"{name}.bias", np.zeros(out_channels))

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray):
        batch, _, length = x.shape
        out_len, left, right = _same_padding(length, self.kernel, self.stride)
        xp = np.pad(x, ((0, 0), (0, 0), (left, right)))
        # patches[b, i, k, j] = xp[b, i, j*stride + k]
        patches = np.empty((batch, self.in_channels, self.kernel, out_len))
        span = self.stride * (out_len - 1) + 1
        for k in range(self.kernel):
            patches[:, :, k, :] = xp[:, :, k:k + span:self.stride]
        flat = patches.reshape(batch, self.in_channels * self.kernel, out_len)
        w2 = self.weight.value.reshape(self.out_channels, -1)
        y = np.matmul(w2, flat) + self.bias.value[None, :, None]
        cache = (flat, length, left, out_len)
        return y, cache

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        flat, length, left, out_len = cache
        batch = dy.shape[0]
        self.bias.grad += dy.sum(axis=(0, 2))
        self.weight.grad += np.einsum("bol,bml->om", dy, flat).reshape(
            self.weight.value.shape)
        w2 = self.weight.value.reshape(self.out_channels, -1)
        dflat = np.matmul(w2.T, dy)
        dpatches = dflat.reshape(batch, self.in_channels, self.kernel, out_len)
        _, pl, pr = _same_padding(length, self.kernel, self.stride)
        dxp = np.zeros((batch, self.in_channels, length + pl + pr))
        span = self.stride * (out_len - 1) + 1
        for k in range(self.kernel):
            dxp[:, :, k:k + span:self.stride] += dpatches[:, :, k, :]
        return dxp[:, :, left:left + length]


class ResidualBlock:
    """Pre-activation residual block.

    out = shortcut(x) + conv2(act(conv1(act(x)))); conv1 carries the
    stride and the channel change, the shortcut is strided subsampling
    plus zero-padded channels and has no parameters.
    """

    def __init__(self, name, in_channels, out_channels, kernel, stride,
                 activation, rng: Rng | None):
        if out_channels < in_channels:
            raise ValueError("residual blocks cannot shrink channels")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.activation = activation
        self.conv1 = Conv1d(f"{name}.conv1", in_channels, out_channels,
                            kernel, stride, rng)
        self.conv2 = Conv1d(f"{name}.conv2", out_channels, out_channels,
                            kernel, 1, rng)

    def params(self):
        return self.conv1.params() + self.conv2.params()

    def forward(self, x: np.ndarray):
        a1, ca1 = _act_forward(self.activation, x)
        h1, cc1 = self.conv1.forward(a1)
        a2, ca2 = _act_forward(self.activation, h1)
        h2, cc2 = self.conv2.forward(a2)
        short = x[:, :, ::self.stride] if self.stride > 1 else x
        if self.out_channels > self.in_channels:
            pad = self.out_channels - self.in_channels
            short = np.pad(short, ((0, 0), (0, pad), (0, 0)))
        y = short + h2
        return y, (ca1, cc1, ca2, cc2, x.shape)

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        ca1, cc1, ca2, cc2, x_shape = cache
        da2 = self.conv2.backward(cc2, dy)
        dh1 = _act_backward(self.activation, ca2, da2)
        da1 = self.conv1.backward(cc1, dh1)
        dx = _act_backward(self.activation, ca1, da1)
        dshort = dy[:, :self.in_channels, :]
        if self.stride > 1:
            dx_short = np.zeros(x_shape)
            dx_short[:, :, ::self.stride] = dshort
            dx += dx_short
        else:
            dx += dshort
        return dx


@dataclass
class FrontendSaved:
    caches: list
    was_2d: bool


class Frontend:
    """Stem convolution followed by the configured residual stages."""

    def __init__(self, spec: ConvSpec, rng: Rng | None):
        self.spec = spec
        self.stem = Conv1d("frontend.stem", spec.in_dim,
                           spec.stages[0].channels, spec.kernel, 1, rng)
        self.blocks = []
        prev = spec.stages[0].channels
        for si, stage in enumerate(spec.stages):
            for bi in range(stage.blocks):
                stride = 2 if (bi == 0 and stage.downsample) else 1
                self.blocks.append(ResidualBlock(
                    f"frontend.s{si}b{bi}", prev, stage.channels,
                    spec.kernel, stride, spec.activation, rng))
                prev = stage.channels

    def params(self):
        out = self.stem.params()
        for b in self.blocks:
            out += b.params()
        return out

    def forward_batch(self, x: np.ndarray):
        if x.ndim != 3 or x.shape[1] != self.spec.in_dim:
            raise DimensionError(
                f"expected (B, {self.spec.in_dim}, L) input, got {x.shape}")
        if x.shape[2] < self.spec.min_length:
            raise LengthError(
                f"input length {x.shape[2]} below the minimum "
                f"{self.spec.min_length} required by "
                f"{self.spec.num_downsamples} downsampling stages")
        caches = []
        h, cache = self.stem.forward(x)
        caches.append(cache)
        for block in self.blocks:
            h, cache = block.forward(h)
            caches.append(cache)
        return h, FrontendSaved(caches=caches, was_2d=False)

    def backward_batch(self, saved: FrontendSaved, dy: np.ndarray):
        caches = saved.caches
        for block, cache in zip(reversed(self.blocks), reversed(caches[1:])):
            dy = block.backward(cache, dy)
        return self.stem.backward(caches[0], dy)


def frontend_forward(x: np.ndarray, state: Frontend):
    """Single utterance: D_in x L_in to D_out x L_out, plus saved tensors."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected a 2-D input, got shape {x.shape}")
    y, saved = state.forward_batch(x[None])
    saved.was_2d = True
    return y[0], saved


def frontend_backward(state: Frontend, saved: FrontendSaved,
                      grad_out: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the single-utterance input; accumulates param grads."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if not saved.was_2d:
        raise DimensionError("saved state came from a batched forward")
    dx = state.backward_batch(saved, grad_out[None])
    return dx[0]
