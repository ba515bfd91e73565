"""Frozen toy multi-head transformer with adapter, gating, and tap hooks.

The trunk is a pre-norm encoder (norm, attention, residual, norm, MLP,
residual) whose weights are drawn once per seed and never trained. Token 0 is
the class-token slot: the encoder adds its frozen class embedding there, and
that token's representation after each block is the layer's pooled feature
tap. Low-rank adapters may sit on the Q and V projections, per-head gates and
drop masks multiply the scaled dot-product attention outputs right before the
heads are concatenated.

Positional encodings are off by default (the synthetic task is position-free,
and attention is then exactly permutation-equivariant over content tokens); a
frozen learned table can be switched on.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .gating import GateConfig, GateParams, gumbel_binary_gates
from .io import read_blob, write_blob
from .lora import HeadAwareLoRA, LoRAConfig, adapted_forward
from .losses import ClassAnchors
from .tensor import Parameter, Tensor

LN_EPS = 1e-5


@dataclass
class EncoderConfig:
    num_layers: int = 4
    num_heads: int = 4
    head_dim: int = 8
    num_tokens: int = 9
    mlp_ratio: float = 2.0
    positional: bool = False
    tap_feature: str = "cls"     # or "mean": which per-layer feature gets tapped
    head_input_rank: Optional[int] = 4   # None: full-rank (statistically uniform) heads

    @property
    def model_dim(self) -> int:
        return self.num_heads * self.head_dim

    def validate(self) -> None:
        if min(self.num_layers, self.num_heads, self.head_dim) < 1:
            raise ConfigError("layer, head and head-dim counts must be positive")
        if self.num_tokens < 2:
            raise ConfigError("need the class token plus at least one content token")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")
        if self.tap_feature not in ("cls", "mean"):
            raise ConfigError(f"unknown tap_feature {self.tap_feature!r}")
        if self.head_input_rank is not None and not 1 <= self.head_input_rank <= self.model_dim:
            raise ConfigError("head_input_rank must lie in [1, model_dim]")


@dataclass
class LayerTap:
    layer_index: int
    pooled_feature: Tensor       # [batch, model_dim]


_LAYER_WEIGHTS = ("wq", "wk", "wv", "wo", "mlp_w1", "mlp_w2",
                  "ln1_scale", "ln1_bias", "ln2_scale", "ln2_bias")


class Encoder:
    """The frozen random trunk; owns every group=="frozen" parameter."""

    def __init__(self, config: EncoderConfig, seed: int):
        config.validate()
        self.config = config
        self.seed = seed
        d = config.model_dim
        hidden = int(round(config.mlp_ratio * d))
        rng = np.random.default_rng(seed)
        self.params: dict[str, Parameter] = {}

        def frozen(name, arr):
            p = Parameter(name, T.tensor(arr), group="frozen")
            self.params[name] = p
            return p

        frozen("cls_token", rng.standard_normal(d))
        if config.positional:
            frozen("pos_embed", rng.standard_normal((config.num_tokens, d)) * 0.1)

        def headed(rows_per_head):
            # heads read random low-dimensional input subspaces, so different
            # heads are sensitive to genuinely different content directions
            # (mirroring how specialized pretrained heads behave); rank None
            # falls back to dense rows that make all heads statistically alike
            k = config.head_input_rank
            if k is None:
                return rng.standard_normal((d, d)) / np.sqrt(d)
            blocks = []
            for _ in range(config.num_heads):
                mix = rng.standard_normal((rows_per_head, k)) / np.sqrt(k)
                subspace = rng.standard_normal((k, d)) / np.sqrt(d)
                blocks.append(mix @ subspace)  # per-entry variance 1/d, like dense
            return np.concatenate(blocks, axis=0)

        for i in range(config.num_layers):
            pre = f"layer{i}."
            frozen(pre + "wq", rng.standard_normal((d, d)) / np.sqrt(d))
            frozen(pre + "wk", headed(config.head_dim))
            frozen(pre + "wv", headed(config.head_dim))
            frozen(pre + "wo", rng.standard_normal((d, d)) / np.sqrt(d))
            frozen(pre + "mlp_w1", rng.standard_normal((hidden, d)) / np.sqrt(d))
            frozen(pre + "mlp_w2", rng.standard_normal((d, hidden)) / np.sqrt(hidden))
            frozen(pre + "ln1_scale", np.ones(d))
            frozen(pre + "ln1_bias", np.zeros(d))
            frozen(pre + "ln2_scale", np.ones(d))
            frozen(pre + "ln2_bias", np.zeros(d))

    def layer_weights(self, layer: int) -> dict[str, Tensor]:
        return {k: self.params[f"layer{layer}.{k}"].value for k in _LAYER_WEIGHTS}

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())


def _layer_norm(x: Tensor, scale: Tensor, bias: Tensor) -> Tensor:
    return T.layer_norm_lastdim(x, eps=LN_EPS) * scale + bias


def _gelu(x: Tensor) -> Tensor:
    return T.gelu(x)


def msa_block(x: Tensor, weights: dict[str, Tensor], num_heads: int,
              lora: Optional[HeadAwareLoRA] = None, layer: int = 0,
              gate_weights: Optional[Tensor] = None,
              head_mask: Optional[np.ndarray] = None,
              head_sink: Optional[list] = None) -> Tensor:
    """Multi-head self-attention with optional adapters and head gating.

    gate_weights, when given, is the per-head multiplier vector (already
    softmax-normalized and scale-compensated, or a hard binary mask); it is
    applied to the scaled dot-product attention outputs before concatenation
    and the output projection. head_mask is a constant 0/1 drop vector
    applied at the same point. head_sink, when given, receives the raw
    pre-gate head outputs [batch, heads, tokens, head_dim] as an ndarray.
    """
    b, t, d = x.shape
    if d % num_heads != 0:
        raise ShapeError(f"model dim {d} not divisible by {num_heads} heads")
    n = d // num_heads
    if gate_weights is not None and gate_weights.shape != (num_heads,):
        raise ShapeError(f"gate vector shape {gate_weights.shape} != ({num_heads},)")
    if head_mask is not None and np.shape(head_mask) != (num_heads,):
        raise ShapeError(f"head mask shape {np.shape(head_mask)} != ({num_heads},)")

    q = adapted_forward(weights["wq"], lora, layer, "Q", x)
    k = T.matmul(x, T.swap_last2(weights["wk"]))
    v = adapted_forward(weights["wv"], lora, layer, "V", x)

    def split(z):  # [b, t, d] -> [b, H, t, n]
        return T.transpose(z.reshape(b, t, num_heads, n), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    scores = T.matmul(qh, T.swap_last2(kh)) * (1.0 / np.sqrt(n))
    attn = T.softmax_lastdim(scores)
    heads = T.matmul(attn, vh)                      # [b, H, t, n] per-head outputs
    if head_sink is not None:
        head_sink.append(heads.data.copy())
    if gate_weights is not None:
        heads = heads * gate_weights.reshape(1, num_heads, 1, 1)
    if head_mask is not None:
        heads = heads * T.tensor(np.asarray(head_mask, dtype=np.float64).reshape(1, num_heads, 1, 1))
    merged = T.transpose(heads, (0, 2, 1, 3)).reshape(b, t, d)
    return T.matmul(merged, T.swap_last2(weights["wo"]))


class GatedEncoderModel:
    """Frozen trunk plus whatever is trainable: adapters, gates, or neither.

    head_drop_mask is an [L, H] 0/1 array for hard head removal (1 keeps);
    it composes with the learned gates and is how drop experiments build
    model views without touching the original.
    """

    def __init__(self, encoder: Encoder, lora: Optional[HeadAwareLoRA] = None,
                 gates: Optional[GateParams] = None, anchors: Optional[ClassAnchors] = None,
                 head_drop_mask: Optional[np.ndarray] = None):
        cfg = encoder.config
        if gates is not None and gates.num_heads != cfg.num_heads:
            raise ShapeError(
                f"gate head count {gates.num_heads} != encoder heads {cfg.num_heads}"
            )
        if gates is not None and gates.num_layers != cfg.num_layers:
            raise ShapeError("gate layer count differs from encoder depth")
        if lora is not None and (lora.num_heads, lora.head_dim) != (cfg.num_heads, cfg.head_dim):
            raise ShapeError("adapter geometry differs from encoder")
        if head_drop_mask is not None:
            head_drop_mask = np.asarray(head_drop_mask, dtype=np.float64)
            if head_drop_mask.shape != (cfg.num_layers, cfg.num_heads):
                raise ShapeError("head_drop_mask must be [num_layers, num_heads]")
            if np.any(head_drop_mask.sum(axis=1) == 0):
                raise ConfigError("dropping every head of a layer leaves it degenerate")
        self.encoder = encoder
        self.lora = lora
        self.gates = gates
        self.anchors = anchors
        self.head_drop_mask = head_drop_mask
        names = [p.name for p in self.all_parameters()]
        if len(names) != len(set(names)):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ConfigError(f"duplicate parameter names: {dupes[:4]}")
        # consumed by the binary gate variant during training steps
        self.gumbel_rng: Optional[np.random.Generator] = None
        self.gumbel_temperature: Optional[float] = None

    @property
    def config(self) -> EncoderConfig:
        return self.encoder.config

    def with_head_mask(self, head_drop_mask: np.ndarray) -> "GatedEncoderModel":
        """A view sharing all weights, with extra heads hard-dropped."""
        return GatedEncoderModel(self.encoder, self.lora, self.gates, self.anchors,
                                 head_drop_mask=head_drop_mask)

    def _gate_vector(self, layer: int, train: bool) -> Optional[Tensor]:
        if self.gates is None:
            return None
        if self.gates.config.variant == "soft":
            return self.gates.soft_weights(layer)
        if train:
            if self.gumbel_rng is None:
                raise ConfigError("binary gates need a sampling generator during training")
            temp = self.gumbel_temperature or self.gates.config.temperature
            return gumbel_binary_gates(self.gates.logits[layer].value, temp, self.gumbel_rng)
        return T.tensor(self.gates.hard_retention_mask(layer))

    def forward(self, tokens: np.ndarray, train: bool = False,
                head_sink: Optional[list] = None) -> tuple[Tensor, list[LayerTap]]:
        """Run the trunk; returns the final pooled feature and per-layer taps."""
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.ndim != 3 or tokens.shape[1] != cfg.num_tokens or tokens.shape[2] != cfg.model_dim:
            raise ShapeError(
                f"expected [batch, {cfg.num_tokens}, {cfg.model_dim}] tokens, got {tokens.shape}"
            )
        prepared = tokens.copy()
        prepared[:, 0, :] += self.encoder.params["cls_token"].value.data
        if cfg.positional:
            prepared += self.encoder.params["pos_embed"].value.data
        x = T.tensor(prepared)

        taps = []
        for layer in range(cfg.num_layers):
            w = self.encoder.layer_weights(layer)
            normed = _layer_norm(x, w["ln1_scale"], w["ln1_bias"])
            attn_out = msa_block(
                normed, w, cfg.num_heads, lora=self.lora, layer=layer,
                gate_weights=self._gate_vector(layer, train),
                head_mask=None if self.head_drop_mask is None else self.head_drop_mask[layer],
                head_sink=head_sink,
            )
            x = x + attn_out
            normed2 = _layer_norm(x, w["ln2_scale"], w["ln2_bias"])
            mlp = T.matmul(_gelu(T.matmul(normed2, T.swap_last2(w["mlp_w1"]))),
                           T.swap_last2(w["mlp_w2"]))
            x = x + mlp
            if cfg.tap_feature == "cls":
                pooled = T.index_axis(x, 1, 0)
            else:
                pooled = T.mean(x, axis=1)
            taps.append(LayerTap(layer, pooled))
        return taps[-1].pooled_feature, taps

    # -- evaluation conveniences (no tape) -----------------------------------

    def features_np(self, tokens: np.ndarray) -> np.ndarray:
        with T.no_grad():
            feature, _ = self.forward(tokens, train=False)
        return feature.data

    def predict(self, tokens: np.ndarray) -> np.ndarray:
        from .losses import predict_batch
        if self.anchors is None:
            raise ConfigError("model has no class anchors to predict with")
        return predict_batch(self.features_np(tokens), self.anchors)

    def accuracy(self, tokens: np.ndarray, labels: np.ndarray) -> float:
        return float(np.mean(self.predict(tokens) == np.asarray(labels)))

    # -- parameter plumbing ---------------------------------------------------

    def trainable_parameters(self, group: Optional[str] = None) -> list[Parameter]:
        params: list[Parameter] = []
        if self.lora is not None and group in (None, "halora"):
            params.extend(self.lora.parameters())
        if self.gates is not None and group in (None, "gate"):
            params.extend(self.gates.parameters())
        return params

    def all_parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + self.trainable_parameters()

    def merged_clone(self) -> "GatedEncoderModel":
        """A copy with adapters folded into the frozen weights and removed."""
        clone_encoder = Encoder(self.config, self.encoder.seed)
        for name, p in self.encoder.params.items():
            clone_encoder.params[name].value.data = p.value.data.copy()
        if self.lora is not None:
            for layer in range(self.config.num_layers):
                for target in self.lora.config.targets:
                    key = f"layer{layer}.w{target.lower()}"
                    base = clone_encoder.params[key].value.data
                    clone_encoder.params[key].value.data = self.lora.merge(base, layer, target)
        clone_gates = None
        if self.gates is not None:
            clone_gates = GateParams(self.gates.config, self.gates.num_layers, self.gates.num_heads)
            for src, dst in zip(self.gates.logits, clone_gates.logits):
                dst.value.data = src.value.data.copy()
        return GatedEncoderModel(clone_encoder, None, clone_gates, self.anchors,
                                 self.head_drop_mask)


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model: GatedEncoderModel, path) -> None:
    cfg = model.config
    meta = {
        "kind": "model",
        "encoder": asdict(cfg),
        "encoder_seed": model.encoder.seed,
        "lora": None if model.lora is None else {
            **asdict(model.lora.config),
            "rank_per_layer": list(model.lora.config.ranks(cfg.num_layers)),
            "targets": list(model.lora.config.targets),
        },
        "gates": None if model.gates is None else asdict(model.gates.config),
        "anchors_temperature": None if model.anchors is None else model.anchors.temperature,
        "head_drop_mask": None if model.head_drop_mask is None else model.head_drop_mask.tolist(),
    }
    arrays = [(p.name, p.value.data) for p in model.encoder.parameters()]
    if model.lora is not None:
        arrays.extend((p.name, p.value.data) for p in model.lora.parameters())
    if model.gates is not None:
        arrays.extend((p.name, p.value.data) for p in model.gates.parameters())
    if model.anchors is not None:
        arrays.append(("class_anchors", model.anchors.anchors))
    write_blob(path, meta, arrays)


def load_model(path) -> GatedEncoderModel:
    meta, arrays = read_blob(path)
    if meta.get("kind") != "model":
        raise ConfigError(f"{path}: not a model checkpoint")
    cfg = EncoderConfig(**meta["encoder"])
    encoder = Encoder(cfg, int(meta["encoder_seed"]))
    lora = None
    if meta["lora"] is not None:
        raw = dict(meta["lora"])
        raw["targets"] = tuple(raw["targets"])
        raw["rank_per_layer"] = tuple(raw["rank_per_layer"])
        lora = HeadAwareLoRA(LoRAConfig(**raw), cfg.num_layers, cfg.num_heads, cfg.head_dim, seed=0)
    gates = None
    if meta["gates"] is not None:
        gates = GateParams(GateConfig(**meta["gates"]), cfg.num_layers, cfg.num_heads)
    anchors = None
    if "class_anchors" in arrays:
        anchors = ClassAnchors(arrays.pop("class_anchors"),
                               temperature=float(meta["anchors_temperature"]))
    mask = meta.get("head_drop_mask")
    model = GatedEncoderModel(encoder, lora, gates, anchors,
                              None if mask is None else np.asarray(mask, dtype=np.float64))
    for p in model.encoder.parameters() + model.trainable_parameters():
        if p.name not in arrays:
            raise ConfigError(f"checkpoint missing parameter {p.name}")
        if arrays[p.name].shape != p.value.shape:
            raise ShapeError(f"checkpoint shape mismatch for {p.name}")
        p.value.data = arrays[p.name]
    return model
