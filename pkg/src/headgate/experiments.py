"""Experiment configs and the runs the CLI and test suites share.

An ExperimentConfig bundles every knob of one study: encoder geometry,
adapter and gate settings (either may be absent), training recipe, synthetic
data spec, and the seed list. One seed drives one reproducible world: the
dataset, the frozen trunk, the adapter init, the anchors and the batch
stream are all derived from it, so model variants compared under the same
seed see identical data and trunk.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .data import DomainSpec, lodo_split, make_dataset
from .encoder import Encoder, EncoderConfig, GatedEncoderModel
from .errors import ConfigError
from .gating import GateConfig, GateParams
from .io import dumps_json
from .lora import HeadAwareLoRA, LoRAConfig
from .losses import ClassAnchors
from .trainer import TrainConfig, Trainer


@dataclass
class ExperimentConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    lora: Optional[LoRAConfig] = field(default_factory=LoRAConfig)
    gates: Optional[GateConfig] = field(default_factory=GateConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DomainSpec = field(default_factory=DomainSpec)
    anchor_temperature: float = 0.01
    seeds: tuple = (0, 1, 2)
    target_domain: int = 0
    out_dir: str = "runs"

    def validate(self) -> None:
        self.encoder.validate()
        self.train.validate()
        self.data.validate()
        if self.lora is not None:
            self.lora.validate(self.encoder.num_layers, self.encoder.num_heads,
                               self.encoder.head_dim, self.encoder.model_dim)
        if self.gates is not None:
            self.gates.validate()
        if self.data.model_dim != self.encoder.model_dim:
            raise ConfigError(
                f"data model_dim {self.data.model_dim} != encoder model_dim {self.encoder.model_dim}"
            )
        if self.data.num_tokens != self.encoder.num_tokens:
            raise ConfigError("data and encoder disagree on num_tokens")
        if self.anchor_temperature <= 0:
            raise ConfigError("anchor_temperature must be positive")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if not 0 <= self.target_domain < self.data.num_domains:
            raise ConfigError("target_domain out of range")

    # -- (de)serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        out = {
            "encoder": asdict(self.encoder),
            "lora": None if self.lora is None else {
                **asdict(self.lora),
                "targets": list(self.lora.targets),
                "rank_per_layer": (None if self.lora.rank_per_layer is None
                                   else list(self.lora.rank_per_layer)),
            },
            "gates": None if self.gates is None else asdict(self.gates),
            "train": {**asdict(self.train),
                      "kernel_multipliers": list(self.train.kernel_multipliers)},
            "data": asdict(self.data),
            "anchor_temperature": self.anchor_temperature,
            "seeds": list(self.seeds),
            "target_domain": self.target_domain,
            "out_dir": self.out_dir,
        }
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")

        def build(klass, payload, post=None):
            if payload is None:
                return None
            fields = klass.__dataclass_fields__
            bad = set(payload) - set(fields)
            if bad:
                raise ConfigError(f"unknown {klass.__name__} fields: {sorted(bad)}")
            obj = klass(**payload)
            if post:
                post(obj)
            return obj

        cfg = cls(
            encoder=build(EncoderConfig, raw.get("encoder", {})) or EncoderConfig(),
            lora=build(LoRAConfig, raw.get("lora", asdict(LoRAConfig()))),
            gates=build(GateConfig, raw.get("gates", asdict(GateConfig()))),
            train=build(TrainConfig, raw.get("train", {})) or TrainConfig(),
            data=build(DomainSpec, raw.get("data", {})) or DomainSpec(),
            anchor_temperature=raw.get("anchor_temperature", 0.01),
            seeds=tuple(raw.get("seeds", (0, 1, 2))),
            target_domain=raw.get("target_domain", 0),
            out_dir=raw.get("out_dir", "runs"),
        )
        if cfg.lora is not None:
            cfg.lora.targets = tuple(cfg.lora.targets)
            if cfg.lora.rank_per_layer is not None:
                cfg.lora.rank_per_layer = tuple(cfg.lora.rank_per_layer)
        cfg.train.kernel_multipliers = tuple(cfg.train.kernel_multipliers)
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})") from err
        return cls.from_dict(raw)

    def apply_overrides(self, overrides: list[str]) -> None:
        """dotted.path=value assignments; values parse as JSON, else strings."""
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form path=value")
            path, _, raw_value = item.partition("=")
            try:
                value = json.loads(raw_value)
            except json.JSONDecodeError:
                value = raw_value
            parts = path.split(".")
            target = self
            for part in parts[:-1]:
                if not hasattr(target, part):
                    raise ConfigError(f"unknown config path {path!r}")
                target = getattr(target, part)
                if target is None:
                    raise ConfigError(f"cannot set {path!r}: section is disabled (null)")
            leaf = parts[-1]
            if not hasattr(target, leaf):
                raise ConfigError(f"unknown config path {path!r}")
            current = getattr(target, leaf)
            if isinstance(current, tuple) and isinstance(value, list):
                value = tuple(value)
            setattr(target, leaf, value)

    def run_id(self, seed: int, extra: str = "") -> str:
        import hashlib
        payload = dumps_json(self.to_dict()) + f"|seed={seed}|{extra}"
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


def derive_seeds(seed: int) -> dict:
    """Five independent streams per experiment seed, stable across versions."""
    state = np.random.SeedSequence(seed).generate_state(5)
    names = ("dataset", "encoder", "lora", "anchors", "train")
    return {name: int(v) for name, v in zip(names, state)}


def build_world(cfg: ExperimentConfig, seed: int):
    """Dataset plus a fresh model for one seed."""
    cfg.validate()
    sub = derive_seeds(seed)
    dataset = make_dataset(cfg.data, sub["dataset"])
    encoder = Encoder(cfg.encoder, sub["encoder"])
    lora = None
    if cfg.lora is not None:
        lora = HeadAwareLoRA(cfg.lora, cfg.encoder.num_layers, cfg.encoder.num_heads,
                             cfg.encoder.head_dim, seed=sub["lora"])
    gates = None
    if cfg.gates is not None:
        gates = GateParams(cfg.gates, cfg.encoder.num_layers, cfg.encoder.num_heads)
    anchors = ClassAnchors.make(cfg.data.num_classes, cfg.encoder.model_dim,
                                seed=sub["anchors"], temperature=cfg.anchor_temperature)
    model = GatedEncoderModel(encoder, lora, gates, anchors)
    return dataset, model, sub


def run_single(cfg: ExperimentConfig, seed: int, target_domain: int) -> dict:
    """One leave-one-domain-out training run; returns a summary record."""
    dataset, model, sub = build_world(cfg, seed)
    train_ds, test_ds = lodo_split(dataset, target_domain)
    train_cfg = TrainConfig(**{**asdict(cfg.train), "seed": sub["train"] + target_domain,
                               "kernel_multipliers": cfg.train.kernel_multipliers})
    history = []
    if model.trainable_parameters():
        trainer = Trainer(model, train_ds, train_cfg,
                          eval_tokens=test_ds.tokens, eval_labels=test_ds.labels)
        history = trainer.run()
    summary = {
        "seed": seed,
        "target_domain": int(target_domain),
        "accuracy": model.accuracy(test_ds.tokens, test_ds.labels),
        "train_accuracy": model.accuracy(train_ds.tokens, train_ds.labels),
        "gate_weights": (None if model.gates is None else
                         [[round(v, 12) for v in (model.gates.soft_weights(l).data
                                                  if cfg.gates.variant == "soft"
                                                  else model.gates.retention_probs()[l])]
                          for l in range(model.gates.num_layers)]),
    }
    return {"summary": summary, "history": history, "model": model,
            "train_data": train_ds, "test_data": test_ds}


def run_lodo(cfg: ExperimentConfig, seed: int) -> dict:
    """All leave-one-domain-out targets for one seed; returns per-target and mean."""
    per_target = {}
    for target in range(cfg.data.num_domains):
        per_target[target] = run_single(cfg, seed, target)["summary"]["accuracy"]
    return {
        "seed": seed,
        "per_target": {str(k): v for k, v in per_target.items()},
        "mean_accuracy": float(np.mean(list(per_target.values()))),
    }


# -- named model variants used by the ablation grids --------------------------


def variant(cfg: ExperimentConfig, use_adapter: bool, use_gates: bool,
            lora_mode: Optional[str] = None, gate_variant: Optional[str] = None,
            mmd_updates: Optional[str] = None, mmd_weight: Optional[float] = None,
            strategy: Optional[str] = None) -> ExperimentConfig:
    """A copy of cfg with components switched on or off."""
    raw = cfg.to_dict()
    clone = ExperimentConfig.from_dict(raw)
    if not use_adapter:
        clone.lora = None
    elif lora_mode is not None:
        clone.lora.mode = lora_mode
    if not use_gates:
        clone.gates = None
    elif gate_variant is not None:
        clone.gates.variant = gate_variant
    if mmd_updates is not None:
        clone.train.mmd_updates = mmd_updates
    if mmd_weight is not None:
        clone.train.mmd_weight = mmd_weight
    if strategy is not None:
        clone.train.strategy = strategy
    if clone.gates is None:
        # no gates: the routed MMD term has no destination under dig routing
        if clone.train.mmd_updates == "dig":
            clone.train.mmd_weight = 0.0
    clone.validate()
    return clone


def conventional_baseline(cfg: ExperimentConfig, use_gates: bool) -> ExperimentConfig:
    """Conventional-LoRA twin with the head-aware parameter budget.

    Head-aware factors hold H * r * (head_dim + d) values per layer/target
    versus 2 * r * d for the shared-factor form, so comparing at equal rank
    hands the head-aware side a multiple of the capacity. The baseline used
    for mode comparisons scales each layer's rank to match parameter counts
    as closely as possible (always at least 1, capped below the model dim).
    """
    if cfg.lora is None:
        raise ConfigError("no adapter section to derive a baseline from")
    enc = cfg.encoder
    ranks = cfg.lora.ranks(enc.num_layers)
    factor = enc.num_heads * (enc.head_dim + enc.model_dim) / (2.0 * enc.model_dim)
    matched = tuple(min(enc.model_dim - 1, max(1, round(r * factor))) for r in ranks)
    clone = variant(cfg, use_adapter=True, use_gates=use_gates, lora_mode="conventional")
    clone.lora.rank_per_layer = matched
    clone.validate()
    return clone


COMPONENT_GRID = ("none", "halora", "dig", "both")


def component_variant(cfg: ExperimentConfig, name: str) -> ExperimentConfig:
    if name == "none":
        return variant(cfg, use_adapter=False, use_gates=False)
    if name == "halora":
        return variant(cfg, use_adapter=True, use_gates=False)
    if name == "dig":
        return variant(cfg, use_adapter=False, use_gates=True)
    if name == "both":
        return variant(cfg, use_adapter=True, use_gates=True)
    raise ConfigError(f"unknown component variant {name!r}")
