"""Configurable U-Net: per level two same-padded convs + relu, 2x2 pooling on the
way down, 2x2 up-convolution + skip concatenation on the way up, and a final
1x1 conv with sigmoid giving a per-pixel clear-sky probability."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .ndtensor import Tensor, concat_channels, conv2d, maxpool2, relu, sigmoid, upconv2


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 9
    depth: int = 2
    base_channels: int = 8
    kernel_size: int = 3
    patch_size: int = 64

    def validate(self) -> None:
        problems = []
        if self.in_channels < 1:
            problems.append(f"in_channels >= 1 (got {self.in_channels})")
        if self.depth < 1:
            problems.append(f"depth >= 1 (got {self.depth})")
        if self.base_channels < 1:
            problems.append(f"base_channels >= 1 (got {self.base_channels})")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            problems.append(f"kernel_size odd and >= 1 (got {self.kernel_size})")
        if self.patch_size < 1 or self.patch_size % (2 ** self.depth):
            problems.append(
                f"patch_size divisible by 2**depth = {2 ** self.depth} (got {self.patch_size})"
            )
        if problems:
            raise ConfigError("invalid UNetConfig, violated: " + "; ".join(problems))

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(config: UNetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list; this order is the checkpoint layout."""
    k = config.kernel_size
    shapes: list[tuple[str, tuple[int, ...]]] = []

    def double_conv(prefix: str, cin: int, cout: int) -> None:
        shapes.append((f"{prefix}.conv_a.weight", (cout, cin, k, k)))
        shapes.append((f"{prefix}.conv_a.bias", (cout,)))
        shapes.append((f"{prefix}.conv_b.weight", (cout, cout, k, k)))
        shapes.append((f"{prefix}.conv_b.bias", (cout,)))

    cin = config.in_channels
    for level in range(config.depth):
        double_conv(f"down{level}", cin, config.channels(level))
        cin = config.channels(level)
    double_conv("bottom", cin, config.channels(config.depth))
    for level in reversed(range(config.depth)):
        c_hi, c = config.channels(level + 1), config.channels(level)
        shapes.append((f"up{level}.upconv.weight", (c_hi, c, 2, 2)))
        shapes.append((f"up{level}.upconv.bias", (c,)))
        double_conv(f"up{level}", 2 * c, c)
    shapes.append(("out.weight", (1, config.channels(0), 1, 1)))
    shapes.append(("out.bias", (1,)))
    return shapes


def param_count(config: UNetConfig) -> int:
    config.validate()
    return sum(int(np.prod(shape)) for _, shape in param_shapes(config))


class ModelParams:
    """Named parameter tensors of one U-Net, in the order fixed by its config."""

    def __init__(self, config: UNetConfig, tensors: dict[str, Tensor]):
        expected = param_shapes(config)
        if [n for n, _ in expected] != list(tensors):
            raise ConfigError("parameter names/order do not match the config layout")
        for name, shape in expected:
            if tensors[name].shape != shape:
                raise ConfigError(f"{name}: expected shape {shape}, got {tensors[name].shape}")
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def arrays(self) -> list[np.ndarray]:
        return [t.data for t in self.tensors.values()]

    def size(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def to_bytes(self) -> bytes:
        return b"".join(t.data.astype("<f4").tobytes() for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {n: Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in self.tensors.items()},
        )


def build_unet(config: UNetConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases.

    fan_in is the number of terms summed into one output: Cin*k*k for convs and
    Cin for the stride-2 up-convolution (each output pixel sees one tap per
    input channel).
    """
    config.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config):
        if name.endswith(".bias"):
            data = np.zeros(shape, dtype=dtype)
        else:
            fan_in = shape[0] if "upconv" in name else int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(dtype)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return ModelParams(config, tensors)


def unet_forward(params: ModelParams, batch) -> Tensor:
    """Map an (N, C, H, W) batch to (N, 1, H, W) clear-sky probabilities."""
    cfg = params.config
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ConfigError(f"expected input (N, {cfg.in_channels}, H, W), got {x.shape}")
    step = 2 ** cfg.depth
    if x.shape[2] % step or x.shape[3] % step:
        raise ConfigError(f"spatial dims {x.shape[2:]} not divisible by 2**depth = {step}")
    p = params.tensors

    def double_conv(prefix: str, h: Tensor) -> Tensor:
        h = relu(conv2d(h, p[f"{prefix}.conv_a.weight"], p[f"{prefix}.conv_a.bias"]))
        return relu(conv2d(h, p[f"{prefix}.conv_b.weight"], p[f"{prefix}.conv_b.bias"]))

    skips = []
    h = x
    for level in range(cfg.depth):
        h = double_conv(f"down{level}", h)
        skips.append(h)
        h, _ = maxpool2(h)
    h = double_conv("bottom", h)
    for level in reversed(range(cfg.depth)):
        h = upconv2(h, p[f"up{level}.upconv.weight"], p[f"up{level}.upconv.bias"])
        h = concat_channels(h, skips[level])
        h = double_conv(f"up{level}", h)
    return sigmoid(conv2d(h, p["out.weight"], p["out.bias"]))
