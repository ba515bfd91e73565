"""Low-rank adaptation of the attention Q/V projections.

Two modes share one container. "conventional" keeps a single down-projection
shared by every head, so the weight delta is A @ B with A split across head
rows. "head_aware" gives each head its own down-projection: the delta is a
stack of independent per-head blocks A_h @ B_h, and touching one head's
factors can never change another head's rows.

Up-projections start at zero, so a freshly attached adapter is an exact
no-op; after training, deltas fold into the base weights with `merge` and the
branch disappears at inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Parameter, Tensor

TARGETS = ("Q", "V")


def default_ranks(num_layers: int) -> tuple:
    """Rank 2 everywhere, 8 on the last two layers."""
    ranks = [2] * num_layers
    for i in range(max(0, num_layers - 2), num_layers):
        ranks[i] = 8
    return tuple(ranks)


@dataclass
class LoRAConfig:
    mode: str = "head_aware"                  # or "conventional"
    targets: tuple = ("Q", "V")
    rank_per_layer: Optional[tuple] = None    # None: default_ranks(num_layers)
    b_init_std: float = 0.02

    def ranks(self, num_layers: int) -> tuple:
        ranks = self.rank_per_layer if self.rank_per_layer is not None else default_ranks(num_layers)
        ranks = tuple(int(r) for r in ranks)
        if len(ranks) != num_layers:
            raise ConfigError(f"rank_per_layer has {len(ranks)} entries for {num_layers} layers")
        return ranks

    def validate(self, num_layers: int, num_heads: int, head_dim: int, model_dim: int) -> None:
        if self.mode not in ("head_aware", "conventional"):
            raise ConfigError(f"unknown LoRA mode {self.mode!r}")
        bad = [t for t in self.targets if t not in TARGETS]
        if bad or not self.targets:
            raise ConfigError(f"targets must be a non-empty subset of {TARGETS}, got {self.targets}")
        for r in self.ranks(num_layers):
            if r < 1:
                raise ConfigError("ranks must be positive")
            if self.mode == "head_aware" and r > min(head_dim, model_dim):
                raise ConfigError(f"head_aware rank {r} exceeds min(head_dim, model_dim)")
            if self.mode == "conventional" and r >= model_dim:
                raise ConfigError(f"conventional rank {r} must be below model_dim {model_dim}")


class HeadAwareLoRA:
    """Factor parameters for every (layer, target) pair of one encoder."""

    def __init__(self, config: LoRAConfig, num_layers: int, num_heads: int,
                 head_dim: int, seed: int):
        model_dim = num_heads * head_dim
        config.validate(num_layers, num_heads, head_dim, model_dim)
        self.config = config
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.head_dim = head_dim
        self.model_dim = model_dim
        self._factors: dict = {}
        rng = np.random.default_rng(seed)
        ranks = config.ranks(num_layers)
        for layer in range(num_layers):
            r = ranks[layer]
            for target in config.targets:
                key = (layer, target)
                prefix = f"halora.layer{layer}.{target}"
                if config.mode == "head_aware":
                    heads = []
                    for h in range(num_heads):
                        up = Parameter(f"{prefix}.h{h}.up", T.tensor(np.zeros((head_dim, r))), group="halora")
                        down = Parameter(
                            f"{prefix}.h{h}.down",
                            T.tensor(rng.normal(0.0, config.b_init_std, (r, model_dim))),
                            group="halora",
                        )
                        heads.append((up, down))
                    self._factors[key] = heads
                else:
                    up = Parameter(f"{prefix}.up", T.tensor(np.zeros((model_dim, r))), group="halora")
                    down = Parameter(
                        f"{prefix}.down",
                        T.tensor(rng.normal(0.0, config.b_init_std, (r, model_dim))),
                        group="halora",
                    )
                    self._factors[key] = (up, down)

    def parameters(self) -> list:
        params = []
        for layer in range(self.num_layers):
            for target in self.config.targets:
                entry = self._factors[(layer, target)]
                if self.config.mode == "head_aware":
                    for up, down in entry:
                        params.extend([up, down])
                else:
                    params.extend(entry)
        return params

    def factors(self, layer: int, target: str):
        key = (layer, target)
        if key not in self._factors:
            raise ConfigError(f"no adapter at layer {layer} target {target!r}")
        return self._factors[key]

    def has(self, layer: int, target: str) -> bool:
        return (layer, target) in self._factors

    # -- forward paths ------------------------------------------------------

    def branch(self, layer: int, target: str, x: Tensor) -> Tensor:
        """The adapter's additive contribution for input x of shape [..., d]."""
        if x.shape[-1] != self.model_dim:
            raise ShapeError(f"adapter input dim {x.shape[-1]} != model_dim {self.model_dim}")
        entry = self.factors(layer, target)
        if self.config.mode == "head_aware":
            blocks = []
            for up, down in entry:
                low = T.matmul(x, T.swap_last2(down.value))   # [..., r]
                blocks.append(T.matmul(low, T.swap_last2(up.value)))  # [..., n]
            return T.concat(blocks, axis=-1)
        up, down = entry
        low = T.matmul(x, T.swap_last2(down.value))
        return T.matmul(low, T.swap_last2(up.value))

    def delta_weight(self, layer: int, target: str) -> Tensor:
        """The dense weight delta, head rows stacked in head order."""
        entry = self.factors(layer, target)
        if self.config.mode == "head_aware":
            rows = [T.matmul(up.value, down.value) for up, down in entry]
            return T.concat(rows, axis=0)
        up, down = entry
        return T.matmul(up.value, down.value)

    def merge(self, base_weight: np.ndarray, layer: int, target: str) -> np.ndarray:
        """Fold the adapter into a copy of the base weight."""
        if base_weight.shape != (self.model_dim, self.model_dim):
            raise ShapeError(f"base weight shape {base_weight.shape} unexpected")
        return base_weight + self.delta_weight(layer, target).data

    # -- bookkeeping --------------------------------------------------------

    def parameter_count(self, layer: int, target: str) -> int:
        r = self.config.ranks(self.num_layers)[layer]
        if self.config.mode == "head_aware":
            return self.num_heads * r * (self.head_dim + self.model_dim)
        return r * 2 * self.model_dim


def adapted_forward(base_weight: Tensor, lora: Optional[HeadAwareLoRA],
                    layer: int, target: str, x: Tensor) -> Tensor:
    """x @ W^T plus the adapter branch; gradients reach only the factors."""
    out = T.matmul(x, T.swap_last2(base_weight))
    if lora is not None and lora.has(layer, target):
        out = out + lora.branch(layer, target, x)
    return out
