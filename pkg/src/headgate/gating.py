"""Learnable per-head gates on attention-head outputs.

Soft variant: per layer, head logits pass through softmax and the result is
scaled by the head count, so all-equal logits reproduce the ungated block
exactly. Binary variant: each head carries an independent Bernoulli retention
gate sampled with the Gumbel trick; the forward pass is a hard 0/1 mask, the
backward pass uses the relaxed sample (straight-through), and there is no
softmax coupling or scale compensation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Parameter, Tensor


@dataclass
class GateConfig:
    variant: str = "soft"            # or "gumbel_binary"
    temperature: float = 1.0
    anneal_to: Optional[float] = None  # linear anneal target over a run

    def validate(self) -> None:
        if self.variant not in ("soft", "gumbel_binary"):
            raise ConfigError(f"unknown gate variant {self.variant!r}")
        if self.temperature <= 0 or (self.anneal_to is not None and self.anneal_to <= 0):
            raise ConfigError("temperatures must be positive")

    def temperature_at(self, step: int, total_steps: int) -> float:
        if self.anneal_to is None or total_steps <= 1:
            return self.temperature
        frac = min(max(step / (total_steps - 1), 0.0), 1.0)
        return self.temperature + frac * (self.anneal_to - self.temperature)


class GateParams:
    """One logit vector per layer, init zero; scale equals the head count."""

    def __init__(self, config: GateConfig, num_layers: int, num_heads: int):
        config.validate()
        if num_heads < 1 or num_layers < 1:
            raise ConfigError("need positive layer and head counts")
        self.config = config
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.logits = [
            Parameter(f"gate.layer{i}.logits", T.tensor(np.zeros(num_heads)), group="gate")
            for i in range(num_layers)
        ]

    @property
    def scale(self) -> float:
        """Compensates the softmax shrinkage: uniform gates become exactly 1."""
        return float(self.num_heads)

    def parameters(self) -> list:
        return list(self.logits)

    def soft_weights(self, layer: int) -> Tensor:
        """Per-head multipliers scale * softmax(logits), differentiable."""
        return normalize_gates(self.logits[layer].value) * self.scale

    def hard_retention_mask(self, layer: int) -> np.ndarray:
        """Deterministic eval-time mask for the binary variant: keep iff p > 0.5."""
        return (_sigmoid(self.logits[layer].value.data) > 0.5).astype(np.float64)

    def retention_probs(self) -> np.ndarray:
        """[L, H] sigmoid of the logits (binary-variant head keep-probability)."""
        return np.stack([_sigmoid(p.value.data) for p in self.logits])

    def report_rows(self) -> list:
        rows = []
        for layer in range(self.num_layers):
            raw = self.logits[layer].value.data
            with T.no_grad():
                normalized = T.softmax_lastdim(self.logits[layer].value).data
            # the gamma-scaled column is what the forward pass multiplies by
            for head in range(self.num_heads):
                rows.append((layer, head, float(raw[head]), float(normalized[head]),
                             float(self.scale * normalized[head])))
        return rows

    def write_report_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "head", "raw_logit", "normalized_weight", "gamma_scaled_weight"])
            for row in self.report_rows():
                writer.writerow([row[0], row[1], repr(row[2]), repr(row[3]), repr(row[4])])


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def normalize_gates(logits: Tensor) -> Tensor:
    """Relative head importances: softmax over the logit vector."""
    if logits.shape[-1] < 1:
        raise ShapeError("need at least one head")
    return T.softmax_lastdim(logits)


def apply_gates(head_features: list, gate_params: GateParams, layer: int) -> Tensor:
    """Concatenate per-head features weighted by the layer's gates.

    head_features holds H tensors of shape [..., head_dim]; the result matches
    the plain concatenation exactly when all logits are equal.
    """
    if len(head_features) != gate_params.num_heads:
        raise ShapeError(
            f"got {len(head_features)} head features for {gate_params.num_heads} gates"
        )
    weights = gate_params.soft_weights(layer)
    gated = [
        head_features[h] * T.slice_axis(weights, 0, h, h + 1)
        for h in range(gate_params.num_heads)
    ]
    return T.concat(gated, axis=-1)


def gumbel_binary_gates(logits: Tensor, temperature: float, rng: np.random.Generator) -> Tensor:
    """Hard 0/1 retention mask per head with straight-through gradients.

    Forward: for each head, keep wins iff logit + G1 - G0 > 0 with i.i.d.
    Gumbel noise, which samples Bernoulli(sigmoid(logit)) exactly. Backward:
    gradient of the relaxed sample sigmoid((logit + G1 - G0) / temperature).
    """
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    g_keep = -np.log(-np.log(rng.random(logits.shape)))
    g_drop = -np.log(-np.log(rng.random(logits.shape)))
    relaxed = _sigmoid((logits.data + g_keep - g_drop) / temperature)
    hard = (relaxed > 0.5).astype(np.float64)

    def vjp(g):
        return (g * relaxed * (1.0 - relaxed) / temperature,)

    return T.custom_op(hard, (logits,), vjp)
