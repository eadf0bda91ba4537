"""Network blocks and the segmentation model assembly.

The model is an encoder-decoder with residual blocks throughout: a
five-stage residual downsampling encoder producing skip taps at output
strides 2/4/8/16 plus a stride-32 bottleneck input, a bottleneck that is
either a residual block (``baseline`` variant) or an atrous spatial
pyramid pooling module (``enhanced``), and a four-level residual decoder
whose skip concatenations are followed by parameter-free channel attention
in the enhanced variant. The output head is a 2x2 stride-2 transposed
convolution to 32 channels followed by a 1x1 convolution and a sigmoid,
yielding three probability maps in the fixed region order
(whole tumor, tumor core, enhancing tumor).

Parameters live in a :class:`NamedParams` map keyed by hierarchical names
such as ``encoder.stage2.block.conv1.kernel``; iteration order is always
lexicographic.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .tensor import Tensor, concat, relu, reshape, sigmoid, broadcast_to
from .convops import conv2d, conv2d_transpose, global_avg_pool, global_max_pool

VARIANTS = ("baseline", "enhanced")


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 128
    input_channels: int = 4
    encoder_tap_widths: tuple = (16, 24, 40, 80)
    decoder_widths: tuple = (256, 128, 64, 32)
    aspp_filters: int = 256
    aspp_dilations: tuple = (6, 12, 18)
    output_channels: int = 3
    variant: str = "enhanced"

    def __post_init__(self):
        object.__setattr__(self, "encoder_tap_widths", tuple(self.encoder_tap_widths))
        object.__setattr__(self, "decoder_widths", tuple(self.decoder_widths))
        object.__setattr__(self, "aspp_dilations", tuple(self.aspp_dilations))
        if self.input_size % 32 != 0 or self.input_size <= 0:
            raise ValueError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if self.input_channels < 1:
            raise ValueError("input_channels must be >= 1")
        if len(self.encoder_tap_widths) != 4 or any(w < 1 for w in self.encoder_tap_widths):
            raise ValueError("encoder_tap_widths must be 4 positive integers")
        if len(self.decoder_widths) != 4:
            raise ValueError("decoder_widths must have 4 entries")
        if any(a <= b for a, b in zip(self.decoder_widths, self.decoder_widths[1:])):
            raise ValueError("decoder_widths must be strictly decreasing")
        if self.decoder_widths[-1] != 32:
            raise ValueError("decoder_widths must end at 32")
        if len(self.aspp_dilations) != 3 or len(set(self.aspp_dilations)) != 3:
            raise ValueError("aspp_dilations must be 3 distinct rates")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    @property
    def stage_widths(self) -> tuple:
        # Fifth downsampling stage hosts the stride-32 bottleneck input;
        # its width continues the tap progression by doubling the last tap.
        return self.encoder_tap_widths + (2 * self.encoder_tap_widths[-1],)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class NamedParams:
    """Ordered map of hierarchical parameter names to trainable tensors."""

    def __init__(self):
        self._store: dict[str, Tensor] = {}

    def add(self, name: str, t: Tensor) -> None:
        if name in self._store:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._store[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._store[name]

    def __contains__(self, name: str) -> bool:
        return name in self._store

    def __len__(self) -> int:
        return len(self._store)

    def __iter__(self):
        return iter(sorted(self._store))

    def names(self) -> list[str]:
        return sorted(self._store)

    def items(self):
        for name in sorted(self._store):
            yield name, self._store[name]

    def zero_grad(self) -> None:
        for t in self._store.values():
            t.grad = None

    def count(self) -> int:
        return sum(t.size for t in self._store.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.items()}

    @classmethod
    def from_state_dict(cls, state: dict[str, np.ndarray]) -> "NamedParams":
        p = cls()
        for name in sorted(state):
            p.add(name, Tensor(np.array(state[name]), requires_grad=True))
        return p

    def astype(self, dtype) -> "NamedParams":
        return NamedParams.from_state_dict(
            {name: t.data.astype(dtype) for name, t in self.items()})


# ---------------------------------------------------------------------------
# Parameter layout
# ---------------------------------------------------------------------------

def parameter_specs(config: ModelConfig) -> list[tuple[str, tuple, int]]:
    """(name, shape, fan_in) for every parameter, in creation order.

    Convolution kernels are (kH, kW, Cin, Cout); transposed-convolution
    kernels are (kH, kW, Cout, Cin); fan_in is kH*kW*Cin of the consuming
    operation.
    """
    specs: list[tuple[str, tuple, int]] = []

    def conv(name, kh, kw, cin, cout):
        specs.append((f"{name}.kernel", (kh, kw, cin, cout), kh * kw * cin))
        specs.append((f"{name}.bias", (cout,), 0))

    def tconv(name, kh, kw, cout, cin):
        specs.append((f"{name}.kernel", (kh, kw, cout, cin), kh * kw * cin))
        specs.append((f"{name}.bias", (cout,), 0))

    def block(name, cin, cout):
        conv(f"{name}.conv1", 3, 3, cin, cout)
        conv(f"{name}.conv2", 3, 3, cout, cout)
        if cin != cout:
            conv(f"{name}.proj", 1, 1, cin, cout)

    widths = config.stage_widths
    cin = config.input_channels
    for k, w in enumerate(widths, start=1):
        conv(f"encoder.stage{k}.down", 3, 3, cin, w)
        block(f"encoder.stage{k}.block", w, w)
        cin = w

    w5 = widths[-1]
    a = config.aspp_filters
    if config.variant == "enhanced":
        conv("bottleneck.aspp.b1x1", 1, 1, w5, a)
        for d in config.aspp_dilations:
            conv(f"bottleneck.aspp.d{d}", 3, 3, w5, a)
        conv("bottleneck.aspp.pool", 1, 1, w5, a)
        conv("bottleneck.aspp.fuse", 1, 1, 5 * a, a)
    else:
        block("bottleneck.block", w5, a)

    prev = a
    for k in range(1, 5):
        dw = config.decoder_widths[k - 1]
        tap_c = config.encoder_tap_widths[4 - k]
        tconv(f"decoder.level{k}.up", 2, 2, dw, prev)
        block(f"decoder.level{k}.block", dw + tap_c, dw)
        prev = dw

    tconv("head.up", 2, 2, 32, prev)
    conv("head.out", 1, 1, 32, config.output_channels)
    return specs


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> NamedParams:
    """Fan-in-scaled uniform kernel init (He-style bounds), zero biases."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params = NamedParams()
    for name, shape, fan_in in parameter_specs(config):
        if name.endswith(".bias"):
            data = np.zeros(shape, dtype=dtype)
        else:
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params.add(name, Tensor(data, requires_grad=True))
    return params


def check_params_match(config: ModelConfig, params: NamedParams) -> None:
    """Raise ArchitectureMismatchError unless names and shapes match exactly."""
    expected = {name: shape for name, shape, _ in parameter_specs(config)}
    actual = {name: tuple(t.shape) for name, t in params.items()}
    if expected != actual:
        missing = sorted(set(expected) - set(actual))
        extra = sorted(set(actual) - set(expected))
        wrong = sorted(n for n in set(expected) & set(actual)
                       if tuple(expected[n]) != actual[n])
        raise ArchitectureMismatchError(
            f"checkpoint does not fit config: missing={missing[:4]} "
            f"extra={extra[:4]} shape_mismatch={wrong[:4]}")


class ArchitectureMismatchError(ValueError):
    """Parameter name/shape set differs from the config's architecture."""


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------

def residual_block(x: Tensor, params: NamedParams, prefix: str, cout: int) -> Tensor:
    """conv3x3 -> ReLU -> conv3x3, plus identity/1x1-projection shortcut,
    summed then ReLU. Spatial dims are preserved."""
    h = relu(conv2d(x, params[f"{prefix}.conv1.kernel"], params[f"{prefix}.conv1.bias"]))
    h = conv2d(h, params[f"{prefix}.conv2.kernel"], params[f"{prefix}.conv2.bias"])
    if x.shape[-1] == cout:
        shortcut = x
    else:
        shortcut = conv2d(x, params[f"{prefix}.proj.kernel"], params[f"{prefix}.proj.bias"])
    return relu(h + shortcut)


def channel_attention(x: Tensor) -> Tensor:
    """Parameter-free channel gating: sigmoid(avg_pool + max_pool) per
    channel, multiplied back onto the feature map."""
    gate = sigmoid(global_avg_pool(x) + global_max_pool(x))
    if x.ndim == 4:
        gate = reshape(gate, (x.shape[0], 1, 1, x.shape[-1]))
    return x * gate


def aspp(x: Tensor, params: NamedParams, config: ModelConfig) -> Tensor:
    """Atrous spatial pyramid pooling bottleneck.

    Five parallel branches (1x1 conv, three dilated 3x3 convs, global
    average pooling followed by a 1x1 conv broadcast back to full
    resolution), each with ``aspp_filters`` filters and ReLU, concatenated
    and fused by a final 1x1 convolution. Spatial dims are preserved.
    """
    p = "bottleneck.aspp"
    branches = [relu(conv2d(x, params[f"{p}.b1x1.kernel"], params[f"{p}.b1x1.bias"]))]
    for d in config.aspp_dilations:
        branches.append(relu(conv2d(x, params[f"{p}.d{d}.kernel"],
                                    params[f"{p}.d{d}.bias"], dilation=d)))
    pooled = global_avg_pool(x)
    if x.ndim == 4:
        pooled = reshape(pooled, (x.shape[0], 1, 1, x.shape[-1]))
    else:
        pooled = reshape(pooled, (1, 1, x.shape[-1]))
    pooled = relu(conv2d(pooled, params[f"{p}.pool.kernel"], params[f"{p}.pool.bias"]))
    target = x.shape[:-1] + (config.aspp_filters,)
    branches.append(broadcast_to(pooled, target))
    merged = concat(branches, axis=-1)
    return conv2d(merged, params[f"{p}.fuse.kernel"], params[f"{p}.fuse.bias"])


# ---------------------------------------------------------------------------
# Network assembly
# ---------------------------------------------------------------------------

def _check_input(x: Tensor, config: ModelConfig) -> None:
    h, w = (x.shape[1], x.shape[2]) if x.ndim == 4 else (x.shape[0], x.shape[1])
    if h % 32 != 0 or w % 32 != 0:
        raise ValueError(f"input spatial dims must be divisible by 32, got {h}x{w}")
    if x.shape[-1] != config.input_channels:
        raise ValueError(f"expected {config.input_channels} input channels, got {x.shape[-1]}")


def encoder_forward(image: Tensor, params: NamedParams, config: ModelConfig):
    """Returns (tap1, tap2, tap3, tap4, bottleneck_in) at output strides
    2, 4, 8, 16 and 32. Each stage is a stride-2 3x3 convolution followed
    by a residual block."""
    _check_input(image, config)
    x = image
    taps = []
    for k, w in enumerate(config.stage_widths, start=1):
        x = conv2d(x, params[f"encoder.stage{k}.down.kernel"],
                   params[f"encoder.stage{k}.down.bias"], stride=2)
        x = residual_block(x, params, f"encoder.stage{k}.block", w)
        taps.append(x)
    return taps[0], taps[1], taps[2], taps[3], taps[4]


def bottleneck_forward(x: Tensor, params: NamedParams, config: ModelConfig) -> Tensor:
    if config.variant == "enhanced":
        return aspp(x, params, config)
    return residual_block(x, params, "bottleneck.block", config.aspp_filters)


def decoder_forward(taps, bottleneck: Tensor, params: NamedParams,
                    config: ModelConfig) -> Tensor:
    """Four upsampling levels consuming taps in deep-to-shallow order, then
    the sigmoid output head. The enhanced variant applies channel attention
    right after each skip concatenation."""
    if len(taps) != 4:
        raise ValueError(f"expected 4 encoder taps, got {len(taps)}")
    x = bottleneck
    for k in range(1, 5):
        dw = config.decoder_widths[k - 1]
        x = conv2d_transpose(x, params[f"decoder.level{k}.up.kernel"],
                             params[f"decoder.level{k}.up.bias"], stride=2)
        tap = taps[4 - k]
        if x.shape[:-1] != tap.shape[:-1]:
            raise ValueError(
                f"tap/level mismatch at level {k}: {x.shape} vs tap {tap.shape}")
        x = concat([x, tap], axis=-1)
        if config.variant == "enhanced":
            x = channel_attention(x)
        x = residual_block(x, params, f"decoder.level{k}.block", dw)
    x = conv2d_transpose(x, params["head.up.kernel"], params["head.up.bias"], stride=2)
    x = conv2d(x, params["head.out.kernel"], params["head.out.bias"])
    return sigmoid(x)


def model_forward(image, params: NamedParams, config: ModelConfig) -> Tensor:
    """Full forward pass: probability maps of shape (S, S, 3) in (0, 1),
    channel order (WT, TC, ET)."""
    if not isinstance(image, Tensor):
        image = Tensor(image)
    t1, t2, t3, t4, bott_in = encoder_forward(image, params, config)
    bott = bottleneck_forward(bott_in, params, config)
    return decoder_forward((t1, t2, t3, t4), bott, params, config)
