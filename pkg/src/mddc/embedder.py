"""ConvNet feature extractor and classifier head.

Blocks of conv(3x3, pad 1) -> ReLU -> avg-pool(2x2), flattened at the end.
Parameters are drawn once from a seed and never updated while embedding
(distribution matching treats the net as a fixed random feature map); the
evaluation harness re-initializes with ``tracked=True`` to train the same
architecture from scratch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Value


def depth_for_resolution(hw: int) -> int:
    """Default block count: 3 for 32px inputs, 4 for 64px."""
    return 3 if hw <= 32 else 4


@dataclass
class ConvNetConfig:
    depth: int = 3
    width: int = 64
    input_hw: int = 32
    num_outputs: int = 10

    def __post_init__(self):
        if self.width < 1:
            raise ValueError(f"width must be positive, got {self.width}")
        if self.input_hw >> self.depth < 1:
            raise ValueError(
                f"{self.depth} poolings collapse a {self.input_hw}px input")

    @property
    def embed_dim(self) -> int:
        side = self.input_hw >> self.depth
        return self.width * side * side


@dataclass(frozen=True)
class EmbedderParams:
    config: ConvNetConfig
    blocks: list  # [(kernel Value[Cout,Cin,3,3], bias Value[Cout]), ...]
    head_w: Value = field(repr=False, default=None)
    head_b: Value = field(repr=False, default=None)
    role: str = "theta"


def init_convnet(config: ConvNetConfig, seed: int, role: str = "theta",
                 tracked: bool = False) -> EmbedderParams:
    """Deterministic uniform(+-sqrt(1/fan_in)) initialization from a seed."""
    if role not in ("theta", "theta_prime"):
        raise ValueError(f"unknown role {role!r}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    blocks = []
    cin = 3
    for _ in range(config.depth):
        fan_in = cin * 9
        bound = (1.0 / fan_in) ** 0.5
        k = Value(rng.uniform(-bound, bound, (config.width, cin, 3, 3)), tracked)
        b = Value(rng.uniform(-bound, bound, config.width), tracked)
        blocks.append((k, b))
        cin = config.width
    fan_in = config.embed_dim
    bound = (1.0 / fan_in) ** 0.5
    head_w = Value(rng.uniform(-bound, bound, (fan_in, config.num_outputs)), tracked)
    head_b = Value(rng.uniform(-bound, bound, config.num_outputs), tracked)
    return EmbedderParams(config, blocks, head_w, head_b, role)


def parameters(params: EmbedderParams) -> list[Value]:
    out = []
    for k, b in params.blocks:
        out += [k, b]
    return out + [params.head_w, params.head_b]


def embed(params: EmbedderParams, batch: Value) -> Value:
    """Map batch[B,3,H,W] to flat embeddings[B,E]."""
    hw = params.config.input_hw
    if batch.data.ndim != 4 or batch.shape[1:] != (3, hw, hw):
        raise ValueError(
            f"embed: batch {batch.shape} does not match [B,3,{hw},{hw}]")
    x = batch
    for kernel, bias in params.blocks:
        x = ad.conv2d(x, kernel, stride=1, padding=1)
        x = channel_bias_add(x, bias)
        x = ad.relu(x)
        x = ad.avg_pool2d(x, 2)
    return ad.flatten(x)


def classify(params: EmbedderParams, batch: Value) -> Value:
    """Logits[B, num_outputs] = linear head over the embedding."""
    return ad.linear(embed(params, batch), params.head_w, params.head_b)


def channel_bias_add(x: Value, bias: Value) -> Value:
    """Add a per-channel bias[C] to x[B,C,H,W]."""
    if x.shape[1] != bias.shape[0]:
        raise ValueError(f"bias {bias.shape} vs channels {x.shape[1]}")
    b4 = bias.data.reshape(1, -1, 1, 1)

    def bw(g):
        if x.tracked:
            ad._accum(x, g)
        if bias.tracked:
            ad._accum(bias, np.sum(g, axis=(0, 2, 3)))

    return ad._make(x.data + b4, (x, bias), bw)
