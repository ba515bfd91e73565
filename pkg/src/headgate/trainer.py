"""Training loop with group-routed gradients.

Two parameter groups train with separate learning rates: the low-rank
adapter factors ("halora") and the head-gate logits ("gate"). The
classification loss always updates every active group; the multi-domain MMD
term, scaled by mmd_weight, is accumulated only into the groups named by
mmd_updates. Routing happens at gradient-collection time: the MMD backward
still flows through the adapter-augmented projections as a path, but adapter
parameters outside the routed set receive nothing from it.

Strategies cover the ablation grid: "joint" updates both groups every step,
"alternative" alternates whole epochs starting with the adapter group, and
the two_stage modes train one group for the first half of the epochs and the
other for the second half. Cosine decay anneals each group's learning rate
over that group's own active steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import tensor as T
from .data import DomainDataset, stratified_batches
from .encoder import GatedEncoderModel
from .errors import ConfigError, NumericError
from .io import read_blob, write_blob
from .losses import cls_loss, median_heuristic, mmd_layered
from .tensor import Parameter

ROUTED_GROUPS = {
    "neither": (),
    "halora": ("halora",),
    "dig": ("gate",),
    "halora_and_dig": ("halora", "gate"),
}

STRATEGIES = ("joint", "alternative", "two_stage_task_then_domain", "two_stage_domain_then_task")


@dataclass
class TrainConfig:
    mmd_weight: float = 0.2
    lr_halora: float = 5e-5
    lr_gate: float = 1e-3
    batch_size: int = 36
    epochs: int = 40
    schedule: str = "cosine"          # or "constant"
    strategy: str = "joint"
    mmd_updates: str = "dig"
    seed: int = 0
    weight_decay: float = 0.01        # decoupled, adapter group only
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_every: int = 0               # epochs between held-out evals; 0 = final only
    kernel_multipliers: tuple = (0.25, 0.5, 1.0, 2.0, 4.0)

    def validate(self) -> None:
        if self.mmd_weight < 0:
            raise ConfigError("mmd_weight must be nonnegative")
        if min(self.lr_halora, self.lr_gate) < 0:
            raise ConfigError("learning rates must be nonnegative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.mmd_updates not in ROUTED_GROUPS:
            raise ConfigError(f"unknown mmd_updates {self.mmd_updates!r}")


def strategy_groups(strategy: str, epoch: int, total_epochs: int) -> tuple:
    if strategy == "joint":
        return ("halora", "gate")
    if strategy == "alternative":
        return ("halora",) if epoch % 2 == 0 else ("gate",)
    half = total_epochs // 2
    if strategy == "two_stage_task_then_domain":
        return ("halora",) if epoch < half else ("gate",)
    if strategy == "two_stage_domain_then_task":
        return ("gate",) if epoch < half else ("halora",)
    raise ConfigError(f"unknown strategy {strategy!r}")


class AdamW:
    """Adaptive moments with decoupled weight decay.

    Update per parameter: m and v are exponential moving averages of the
    gradient and its square, bias-corrected by step count t, and
    p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p).
    """

    def __init__(self, beta1: float, beta2: float, eps: float):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: dict = {}

    def step(self, params: list, grads: dict, lr: float, weight_decay: float) -> None:
        for p in params:
            if p.group == "frozen":
                raise ConfigError(f"refusing to move frozen parameter {p.name}")
            g = grads[p.name]
            m, v, t = self.state.get(p.name, (np.zeros(p.value.shape), np.zeros(p.value.shape), 0))
            t += 1
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p.value.data = p.value.data - lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                                + weight_decay * p.value.data)
            self.state[p.name] = (m, v, t)


def _mmd_loss_from_taps(taps, domains: np.ndarray, multipliers) -> T.Tensor:
    order = np.unique(domains)
    if len(order) < 2:
        raise ConfigError("feature-alignment loss needs at least 2 source domains in the batch")
    taps_by_layer = []
    specs = []
    for tap in taps:
        specs.append(median_heuristic(tap.pooled_feature.data, multipliers))
        taps_by_layer.append([
            T.take_rows(tap.pooled_feature, np.flatnonzero(domains == dom)) for dom in order
        ])
    return mmd_layered(taps_by_layer, specs)


def routed_gradients(model: GatedEncoderModel, tokens, labels, domains,
                     cfg: TrainConfig) -> tuple[dict, dict]:
    """Per-parameter gradients of the routed objective on one batch.

    Returns (grads, metrics) where grads maps every trainable parameter name
    to d(L_cls)/dp, plus mmd_weight * d(L_MMD)/dp for parameters whose group
    is routed by cfg.mmd_updates. metrics carries the raw loss values.
    """
    params = model.trainable_parameters()
    routed = [g for g in ROUTED_GROUPS[cfg.mmd_updates]
              if model.trainable_parameters(g)]
    need_mmd = cfg.mmd_weight > 0.0 and bool(routed)
    if need_mmd and len(np.unique(domains)) < 2:
        raise ConfigError("single-domain batch with an active feature-alignment term")

    feature, taps = model.forward(tokens, train=True)
    loss_cls = cls_loss(feature, labels, model.anchors)
    if not np.isfinite(loss_cls.data):
        raise NumericError("classification loss is not finite")
    grads = T.reverse_grad(loss_cls, params)

    loss_mmd_value = None
    if need_mmd:
        loss_mmd = _mmd_loss_from_taps(taps, domains, cfg.kernel_multipliers)
        if not np.isfinite(loss_mmd.data):
            raise NumericError("feature-alignment (MMD) loss is not finite")
        loss_mmd_value = float(loss_mmd.data)
        routed_params = [p for g in routed for p in model.trainable_parameters(g)]
        mmd_grads = T.reverse_grad(loss_mmd * cfg.mmd_weight, routed_params)
        for name, g in mmd_grads.items():
            grads[name] = grads[name] + g
    metrics = {"L_cls": float(loss_cls.data), "L_MMD": loss_mmd_value}
    return grads, metrics


def _grad_norm(params: list, grads: dict) -> float:
    total = 0.0
    for p in params:
        g = grads[p.name]
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


class Trainer:
    """Owns one training run: optimizer state, schedules, rng streams, metrics.

    Deterministic by construction: batch order and Gumbel noise come from
    generators seeded by cfg.seed, parameters move only here, and save/restore
    at an epoch boundary continues the run bit-exactly.
    """

    def __init__(self, model: GatedEncoderModel, train_data: DomainDataset,
                 cfg: TrainConfig, eval_tokens=None, eval_labels=None):
        cfg.validate()
        if model.anchors is None:
            raise ConfigError("training needs class anchors on the model")
        self.model = model
        self.data = train_data
        self.cfg = cfg
        self.eval_tokens = eval_tokens
        self.eval_labels = eval_labels
        seq = np.random.SeedSequence(cfg.seed)
        batch_seed, gumbel_seed = seq.spawn(2)
        self.batch_rng = np.random.default_rng(batch_seed)
        self.gumbel_rng = np.random.default_rng(gumbel_seed)
        self.opt = AdamW(cfg.beta1, cfg.beta2, cfg.eps)
        self.epoch = 0
        self.step = 0
        self.group_steps = {"halora": 0, "gate": 0}
        self.history: list[dict] = []
        self._steps_per_epoch = len(stratified_batches(train_data, cfg.batch_size,
                                                       np.random.default_rng(0)))
        self.group_totals = {g: 0 for g in ("halora", "gate")}
        for epoch in range(cfg.epochs):
            for g in self._active_groups(epoch):
                self.group_totals[g] += self._steps_per_epoch

    def _active_groups(self, epoch: int) -> list:
        groups = strategy_groups(self.cfg.strategy, epoch, self.cfg.epochs)
        return [g for g in groups if self.model.trainable_parameters(g)]

    def _lr(self, group: str) -> float:
        base = self.cfg.lr_halora if group == "halora" else self.cfg.lr_gate
        if self.cfg.schedule == "constant":
            return base
        total = max(self.group_totals[group], 1)
        t = min(self.group_steps[group], total)
        return base * 0.5 * (1.0 + np.cos(np.pi * t / total))

    def train_step(self, tokens, labels, domains, active_groups) -> dict:
        cfg = self.cfg
        self.model.gumbel_rng = self.gumbel_rng
        if self.model.gates is not None:
            total = max(sum(self.group_totals.values()), 1)
            self.model.gumbel_temperature = self.model.gates.config.temperature_at(
                self.step, total)
        lrs = {g: self._lr(g) for g in ("halora", "gate")}
        grads, losses = routed_gradients(self.model, tokens, labels, domains, cfg)
        norms = {}
        for group in ("halora", "gate"):
            members = self.model.trainable_parameters(group)
            norms[group] = _grad_norm(members, grads) if members else None
            if members and group in active_groups:
                wd = cfg.weight_decay if group == "halora" else 0.0
                self.opt.step(members, grads, lrs[group], wd)
                self.group_steps[group] += 1
        self.step += 1
        return {
            "step": self.step, "epoch": self.epoch,
            "L_cls": losses["L_cls"], "L_MMD": losses["L_MMD"],
            "lr_halora": lrs["halora"], "lr_gate": lrs["gate"],
            "gnorm_halora": norms["halora"], "gnorm_gate": norms["gate"],
        }

    def run_epochs(self, count: int) -> None:
        for _ in range(count):
            if self.epoch >= self.cfg.epochs:
                return
            active = self._active_groups(self.epoch)
            batches = stratified_batches(self.data, self.cfg.batch_size, self.batch_rng)
            step_losses = []
            for idx in batches:
                rec = self.train_step(self.data.tokens[idx], self.data.labels[idx],
                                      self.data.domains[idx], active)
                step_losses.append(rec)
                self.history.append({"kind": "step", **rec})
            epoch_rec = {
                "kind": "epoch", "epoch": self.epoch,
                "mean_L_cls": float(np.mean([r["L_cls"] for r in step_losses])) if step_losses else None,
                "mean_L_MMD": (float(np.mean([r["L_MMD"] for r in step_losses]))
                               if step_losses and step_losses[0]["L_MMD"] is not None else None),
                "active_groups": list(active),
            }
            finishing = self.epoch == self.cfg.epochs - 1
            scheduled = self.cfg.eval_every > 0 and (self.epoch + 1) % self.cfg.eval_every == 0
            if self.eval_tokens is not None and (finishing or scheduled):
                epoch_rec["eval_accuracy"] = self.model.accuracy(self.eval_tokens, self.eval_labels)
            self.history.append(epoch_rec)
            self.epoch += 1

    def run(self) -> list[dict]:
        self.run_epochs(self.cfg.epochs - self.epoch)
        return self.history

    # -- suspend / resume -----------------------------------------------------

    def save_state(self, path) -> None:
        import json
        meta = {
            "kind": "trainer_state",
            "cfg": {**asdict(self.cfg), "kernel_multipliers": list(self.cfg.kernel_multipliers)},
            "epoch": self.epoch, "step": self.step,
            "group_steps": self.group_steps,
            "batch_rng": json.dumps(self.batch_rng.bit_generator.state),
            "gumbel_rng": json.dumps(self.gumbel_rng.bit_generator.state),
            "adam_steps": {name: st[2] for name, st in self.opt.state.items()},
            "history": self.history,
        }
        arrays = []
        for p in self.model.trainable_parameters():
            arrays.append((f"param.{p.name}", p.value.data))
        for name, (m, v, _) in sorted(self.opt.state.items()):
            arrays.append((f"adam_m.{name}", m))
            arrays.append((f"adam_v.{name}", v))
        write_blob(path, meta, arrays)

    def restore_state(self, path) -> None:
        import json
        meta, arrays = read_blob(path)
        if meta.get("kind") != "trainer_state":
            raise ConfigError(f"{path}: not a trainer state blob")
        self.epoch = int(meta["epoch"])
        self.step = int(meta["step"])
        self.group_steps = {k: int(v) for k, v in meta["group_steps"].items()}
        self.batch_rng.bit_generator.state = json.loads(meta["batch_rng"])
        self.gumbel_rng.bit_generator.state = json.loads(meta["gumbel_rng"])
        self.history = list(meta["history"])
        for p in self.model.trainable_parameters():
            p.value.data = arrays[f"param.{p.name}"]
        self.opt.state = {}
        for name, t in meta["adam_steps"].items():
            self.opt.state[name] = (arrays[f"adam_m.{name}"], arrays[f"adam_v.{name}"], int(t))


def train_run(train_data: DomainDataset, model: GatedEncoderModel, cfg: TrainConfig,
              eval_tokens=None, eval_labels=None) -> list[dict]:
    """One full training run; mutates the model, returns the metrics history."""
    trainer = Trainer(model, train_data, cfg, eval_tokens, eval_labels)
    return trainer.run()
