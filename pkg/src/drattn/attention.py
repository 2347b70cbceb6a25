"""Global attention block (channel then spatial attention) and category
attention block (k channels per class, pooled into one spatial map).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .tensor_core import Conv1x1, ShapeError, Tensor, ops


class ConfigError(ValueError):
    pass


@dataclass
class GabState:
    conv_a: Conv1x1  # c' -> c'/r
    conv_b: Conv1x1  # c'/r -> c'
    reduction_ratio: int

    @classmethod
    def create(cls, channels: int, reduction_ratio: int = 8, rng=None, prefix: str = "gab") -> "GabState":
        if reduction_ratio < 1 or channels % reduction_ratio:
            raise ConfigError(f"channels {channels} not divisible by reduction ratio {reduction_ratio}")
        hidden = channels // reduction_ratio
        return cls(
            Conv1x1.create(f"{prefix}.conv_a", channels, hidden, rng),
            Conv1x1.create(f"{prefix}.conv_b", hidden, channels, rng),
            reduction_ratio,
        )

    @property
    def channels(self) -> int:
        return self.conv_a.c_in

    def parameters(self) -> list:
        return self.conv_a.parameters() + self.conv_b.parameters()


@dataclass
class CabState:
    conv_k: Conv1x1  # c -> k*L
    k: int
    num_classes: int
    dropout_rate: float = 0.5
    cab_sigmoid: bool = False

    @classmethod
    def create(cls, channels: int, k: int = 5, num_classes: int = 5, dropout_rate: float = 0.5,
               cab_sigmoid: bool = False, rng=None, prefix: str = "cab") -> "CabState":
        if k < 1 or num_classes < 1:
            raise ConfigError(f"k and num_classes must be positive (got {k}, {num_classes})")
        conv = Conv1x1.create(f"{prefix}.conv_k", channels, k * num_classes, rng)
        return cls(conv, k, num_classes, dropout_rate, cab_sigmoid)

    def __post_init__(self):
        if self.conv_k.c_out != self.k * self.num_classes:
            raise ConfigError(
                f"conv_k has {self.conv_k.c_out} outputs, need k*L = {self.k * self.num_classes}")

    def channel_allocation(self) -> list:
        """Projection channel indices owned by each class."""
        return [list(range(i * self.k, (i + 1) * self.k)) for i in range(self.num_classes)]

    def parameters(self) -> list:
        return self.conv_k.parameters()


@dataclass
class CabForwardArtifacts:
    scores: Tensor  # (n, L)
    class_maps: Tensor  # (n, L, h, w)
    attention_map: Tensor  # (n, 1, h, w)


# --- GAB -----------------------------------------------------------------

def gab_channel_weights(f_in: Tensor, state: GabState) -> Tensor:
    """sigmoid(conv_b(relu(conv_a(GAP(f_in))))), shape (n, c', 1, 1)."""
    if f_in.shape[1] != state.channels:
        raise ShapeError(f"GAB expects {state.channels} channels, got {f_in.shape[1]}")
    pooled = ops.global_avg_pool(f_in)
    return ops.sigmoid(state.conv_b(ops.relu(state.conv_a(pooled))))


def gab_channel_attention(f_in: Tensor, state: GabState) -> Tensor:
    return ops.broadcast_mul(f_in, gab_channel_weights(f_in, state))


def gab_spatial_weights(f_ch: Tensor) -> Tensor:
    """sigmoid of the per-pixel channel mean, shape (n, 1, h, w)."""
    return ops.sigmoid(ops.cross_channel_avg_pool(f_ch))


def gab_spatial_attention(f_ch: Tensor) -> Tensor:
    return ops.broadcast_mul(f_ch, gab_spatial_weights(f_ch))


def gab_forward(f_reduce: Tensor, state: GabState) -> Tensor:
    return gab_spatial_attention(gab_channel_attention(f_reduce, state))


# --- CAB -----------------------------------------------------------------

def _check_kl(f_prime: Tensor, k: int, num_classes: int) -> None:
    if k < 1 or num_classes < 1 or f_prime.shape[1] != k * num_classes:
        raise ConfigError(f"{f_prime.shape[1]} channels cannot be split as k={k} x L={num_classes}")


def cab_project(f_cab_in: Tensor, state: CabState, training: bool = False, seed=None) -> Tensor:
    """1x1 projection to k*L channels; class i owns channels [i*k, (i+1)*k).

    Dropout at ``state.dropout_rate`` is applied only when training.
    """
    projected = state.conv_k(f_cab_in)
    return ops.dropout(projected, state.dropout_rate, training, seed)


def cab_scores(f_prime: Tensor, k: int, num_classes: int) -> Tensor:
    """Per-class score: mean over the class's k channels of each channel's spatial max."""
    _check_kl(f_prime, k, num_classes)
    maxima = ops.global_max_pool(f_prime)
    return ops.flatten(ops.channel_group_mean(maxima, num_classes))


def cab_class_maps(f_prime: Tensor, k: int, num_classes: int) -> Tensor:
    _check_kl(f_prime, k, num_classes)
    return ops.channel_group_mean(f_prime, num_classes)


def cab_attention_map(class_maps: Tensor) -> Tensor:
    """Pixelwise mean of the L class maps, (n, L, h, w) -> (n, 1, h, w)."""
    return ops.cross_channel_avg_pool(class_maps)


def cab_forward(f_cab_in: Tensor, state: CabState, training: bool = False,
                seed=None) -> tuple[Tensor, CabForwardArtifacts]:
    f_prime = cab_project(f_cab_in, state, training, seed)
    scores = cab_scores(f_prime, state.k, state.num_classes)
    class_maps = cab_class_maps(f_prime, state.k, state.num_classes)
    att = cab_attention_map(class_maps)
    if state.cab_sigmoid:
        att = ops.sigmoid(att)
    out = ops.broadcast_mul(f_cab_in, att)
    return out, CabForwardArtifacts(scores, class_maps, att)


def attention_forward(x: Tensor, gab: Optional[GabState], cab: Optional[CabState],
                      training: bool = False, seed=None):
    """GAB then CAB; a missing block is an identity passthrough."""
    g = gab_forward(x, gab) if gab is not None else x
    if cab is None:
        return g, g, None
    out, artifacts = cab_forward(g, cab, training, seed)
    return g, out, artifacts
