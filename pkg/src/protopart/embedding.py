"""Embedding layer: a small convolutional backbone plus optional add-on
1x1 convolutions, mapping [B,C,H,W] images to [B,D,H',W'] feature maps.

The backbone is a stack of 3x3 conv blocks (padding 1, configurable stride)
with ReLU.  Add-on layers, when present, are 1x1 convs ending in a Sigmoid,
so the latent values the prototype layer sees are bounded in (0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor, add, conv2d, relu, reshape, sigmoid


@dataclass
class EmbeddingConfig:
    input_channels: int = 3
    # (out_channels, stride) per block; kernel is always 3x3 with padding 1,
    # so stride > 1 is what downsamples.
    blocks: list = field(default_factory=lambda: [(32, 2), (64, 2), (64, 2)])
    num_addon_layers: int = 1
    latent_dim_multiplier_exp: int = 0
    target_latent_hw: tuple = (8, 8)
    input_hw: tuple = (64, 64)

    def __post_init__(self):
        self.blocks = [tuple(b) for b in self.blocks]
        self.target_latent_hw = tuple(self.target_latent_hw)
        self.input_hw = tuple(self.input_hw)
        if self.num_addon_layers not in (0, 1, 2):
            raise ConfigError(f"num_addon_layers must be 0, 1 or 2, got {self.num_addon_layers}")
        if not -4 <= self.latent_dim_multiplier_exp <= 1:
            raise ConfigError(
                f"latent_dim_multiplier_exp must lie in [-4, 1], got {self.latent_dim_multiplier_exp}")
        if self.num_addon_layers == 0:
            self.latent_dim_multiplier_exp = 0
        if not self.blocks:
            raise ConfigError("backbone needs at least one block")

    @property
    def backbone_out_channels(self) -> int:
        return self.blocks[-1][0]

    @property
    def output_dim(self) -> int:
        if self.num_addon_layers == 0:
            return self.backbone_out_channels
        return int(round(self.backbone_out_channels * 2.0 ** self.latent_dim_multiplier_exp))

    def latent_hw(self) -> tuple:
        h, w = self.input_hw
        for _, stride in self.blocks:
            h = (h + 2 - 3) // stride + 1
            w = (w + 2 - 3) // stride + 1
        return (h, w)


class EmbeddingNet:
    """Built embedding layer holding backbone and add-on parameters."""

    def __init__(self, cfg: EmbeddingConfig, seed: int = 0):
        if cfg.output_dim < 1:
            raise ConfigError(
                f"latent dimension collapsed to {cfg.output_dim} "
                f"(backbone {cfg.backbone_out_channels} channels x 2^{cfg.latent_dim_multiplier_exp})")
        got = cfg.latent_hw()
        if got != cfg.target_latent_hw:
            raise ConfigError(
                f"backbone produces latent grid {got}, config demands {cfg.target_latent_hw}")
        self.cfg = cfg
        self.output_dim = cfg.output_dim
        rng = np.random.default_rng([seed, 0xE4BED])

        self.backbone_weights = []
        self.backbone_biases = []
        c_in = cfg.input_channels
        for c_out, _stride in cfg.blocks:
            self.backbone_weights.append(_kaiming_conv(rng, c_out, c_in, 3))
            self.backbone_biases.append(Tensor(np.zeros(c_out), requires_grad=True))
            c_in = c_out

        self.addon_weights = []
        self.addon_biases = []
        width = cfg.output_dim
        for _ in range(cfg.num_addon_layers):
            self.addon_weights.append(_kaiming_conv(rng, width, c_in, 1))
            self.addon_biases.append(Tensor(np.zeros(width), requires_grad=True))
            c_in = width


def _kaiming_conv(rng, c_out: int, c_in: int, k: int) -> Tensor:
    fan_in = c_in * k * k
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k))
    return Tensor(w, requires_grad=True)


def build_embedding(cfg: EmbeddingConfig, seed: int = 0) -> EmbeddingNet:
    return EmbeddingNet(cfg, seed=seed)


def _bias_add(x: Tensor, b: Tensor) -> Tensor:
    return add(x, reshape(b, (1, b.data.shape[0], 1, 1)))


INPUT_CENTER = 0.5   # images arrive in [0, 1]; the first conv sees them centered


def embed(net: EmbeddingNet, batch) -> Tensor:
    """Run the embedding layer; output is [B,D,H',W']."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.data.ndim != 4:
        raise DimensionError(f"embed expects [B,C,H,W], got {x.data.shape}")
    if x.data.shape[2:] != net.cfg.input_hw:
        raise DimensionError(
            f"embed input spatial size {x.data.shape[2:]} does not match configured {net.cfg.input_hw}")
    x = x - INPUT_CENTER
    for i, (w, b) in enumerate(zip(net.backbone_weights, net.backbone_biases)):
        stride = net.cfg.blocks[i][1]
        x = relu(_bias_add(conv2d(x, w, stride=stride, padding=1), b))
    n_addon = len(net.addon_weights)
    for i, (w, b) in enumerate(zip(net.addon_weights, net.addon_biases)):
        x = _bias_add(conv2d(x, w), b)
        x = sigmoid(x) if i == n_addon - 1 else relu(x)
    return x


def parameter_groups(net: EmbeddingNet) -> dict:
    """Disjoint, exhaustive split of parameters for phase-wise freezing."""
    return {
        "backbone": list(net.backbone_weights) + list(net.backbone_biases),
        "addon": list(net.addon_weights) + list(net.addon_biases),
    }
