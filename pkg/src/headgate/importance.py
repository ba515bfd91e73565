"""Head-importance strategies: rank heads, drop the weakest, trace accuracy.

Four ranking strategies produce a total order over all (layer, head) pairs,
least-important-first, so dropping the first k heads of an ordering gives the
accuracy-vs-drop-count curve:

* random: a uniform permutation, averaged over several repeats;
* mmd_rank: heads sorted by how strongly their raw attention outputs differ
  across source domains (highest cross-domain MMD drops first);
* cv_bernoulli: per-head Bernoulli retention gates trained with the
  classification loss only (everything else frozen), cross-validated over
  held-out source domains, lowest retention probability drops first;
* adapt_and_drop: same protocol, but low-rank adapters train jointly with
  the retention gates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import DomainDataset, stratified_batches
from .encoder import GatedEncoderModel
from .errors import ConfigError
from .gating import GateConfig, GateParams
from .lora import HeadAwareLoRA, LoRAConfig
from .losses import cls_loss, median_heuristic, mmd_pair
from .trainer import AdamW

STRATEGIES = ("random", "mmd_rank", "cv_bernoulli", "adapt_and_drop")


@dataclass
class DropPlan:
    strategy: str = "random"
    drop_counts: tuple = (0, 1, 2, 4, 6, 8)
    repeats: int = 3                  # random orderings averaged per curve

    def validate(self, num_layers: int, num_heads: int) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown drop strategy {self.strategy!r}")
        total = num_layers * num_heads
        if any(c < 0 or c >= total for c in self.drop_counts):
            raise ConfigError(f"drop counts must lie in [0, {total})")
        if list(self.drop_counts) != sorted(set(self.drop_counts)):
            raise ConfigError("drop counts must be strictly increasing")


@dataclass
class HeadRankConfig:
    steps: int = 200
    lr_gates: float = 0.05
    lr_adapter: float = 2e-3
    batch_size: int = 18
    temperature: float = 1.0
    adapter_rank: int = 2
    seed: int = 0


def drop_heads(model: GatedEncoderModel, head_set) -> GatedEncoderModel:
    """A read-only view of the model with the listed (layer, head) pairs zeroed."""
    cfg = model.config
    mask = np.ones((cfg.num_layers, cfg.num_heads))
    for layer, head in head_set:
        if not (0 <= layer < cfg.num_layers and 0 <= head < cfg.num_heads):
            raise ConfigError(f"no head ({layer}, {head}) in this model")
        mask[layer, head] = 0.0
    if model.head_drop_mask is not None:
        mask = mask * model.head_drop_mask
    return model.with_head_mask(mask)


def head_output_features(model: GatedEncoderModel, tokens: np.ndarray) -> np.ndarray:
    """Raw per-head class-token outputs, shape [layers, heads, batch, head_dim]."""
    sink: list = []
    with T.no_grad():
        model.forward(tokens, train=False, head_sink=sink)
    return np.stack([layer[:, :, 0, :].transpose(1, 0, 2) for layer in sink])


def all_heads(num_layers: int, num_heads: int) -> list:
    return [(l, h) for l in range(num_layers) for h in range(num_heads)]


def rank_random(model: GatedEncoderModel, rng: np.random.Generator) -> list:
    heads = all_heads(model.config.num_layers, model.config.num_heads)
    return [heads[i] for i in rng.permutation(len(heads))]


def prefix_keeps_every_layer(ordering: list, max_count: int, num_layers: int,
                             num_heads: int) -> bool:
    """True when dropping any prefix up to max_count leaves every layer a head."""
    remaining = np.full(num_layers, num_heads)
    for layer, _ in ordering[:max_count]:
        remaining[layer] -= 1
        if remaining[layer] == 0:
            return False
    return True


def safe_random_orderings(model: GatedEncoderModel, rng: np.random.Generator,
                          repeats: int, max_count: int) -> list:
    """Uniform random orderings, redrawn when a prefix would empty a layer.

    Hard-dropping every head of a layer is rejected by the model view, so
    curve sweeps resample the permutation; this conditions the distribution
    on validity but keeps it uniform within the valid set.
    """
    cfg = model.config
    orderings = []
    while len(orderings) < repeats:
        candidate = rank_random(model, rng)
        if prefix_keeps_every_layer(candidate, max_count, cfg.num_layers, cfg.num_heads):
            orderings.append(candidate)
    return orderings


def per_head_domain_mmd(model: GatedEncoderModel, dataset: DomainDataset) -> np.ndarray:
    """Cross-domain MMD of each head's raw output features, [layers, heads]."""
    doms = dataset.domains_present()
    if len(doms) < 2:
        raise ConfigError("head MMD ranking needs multi-domain data")
    feats = head_output_features(model, dataset.tokens)
    L, H = feats.shape[:2]
    scores = np.zeros((L, H))
    for l in range(L):
        for h in range(H):
            block = feats[l, h]
            spec = median_heuristic(block)
            total, pairs = 0.0, 0
            for i in range(len(doms) - 1):
                for j in range(i + 1, len(doms)):
                    a = block[dataset.domains == doms[i]]
                    b = block[dataset.domains == doms[j]]
                    with T.no_grad():
                        total += float(mmd_pair(T.tensor(a), T.tensor(b), spec).data)
                    pairs += 1
            scores[l, h] = total / pairs
    return scores


def rank_mmd(model: GatedEncoderModel, dataset: DomainDataset) -> list:
    """Most domain-sensitive heads first (those drop first)."""
    scores = per_head_domain_mmd(model, dataset)
    heads = all_heads(*scores.shape)
    return sorted(heads, key=lambda lh: (-scores[lh[0], lh[1]], lh[0], lh[1]))


def _train_retention_gates(model: GatedEncoderModel, train_data: DomainDataset,
                           cfg: HeadRankConfig, adapt: bool, fold_seed: int) -> np.ndarray:
    """Train per-head Bernoulli retention gates with the cls loss; returns [L, H] probs."""
    enc_cfg = model.config
    gates = GateParams(GateConfig(variant="gumbel_binary", temperature=cfg.temperature),
                       enc_cfg.num_layers, enc_cfg.num_heads)
    lora = None
    if adapt:
        lora = HeadAwareLoRA(LoRAConfig(rank_per_layer=(cfg.adapter_rank,) * enc_cfg.num_layers),
                             enc_cfg.num_layers, enc_cfg.num_heads, enc_cfg.head_dim,
                             seed=fold_seed + 1)
    probe = GatedEncoderModel(model.encoder, lora, gates, model.anchors)
    seq = np.random.SeedSequence(fold_seed)
    batch_seed, gumbel_seed = seq.spawn(2)
    batch_rng = np.random.default_rng(batch_seed)
    probe.gumbel_rng = np.random.default_rng(gumbel_seed)
    opt = AdamW(0.9, 0.999, 1e-8)
    done = 0
    while done < cfg.steps:
        for idx in stratified_batches(train_data, cfg.batch_size, batch_rng):
            if done >= cfg.steps:
                break
            feature, _ = probe.forward(train_data.tokens[idx], train=True)
            loss = cls_loss(feature, train_data.labels[idx], probe.anchors)
            params = probe.trainable_parameters()
            grads = T.reverse_grad(loss, params)
            opt.step(gates.parameters(), grads, cfg.lr_gates, 0.0)
            if adapt:
                opt.step(lora.parameters(), grads, cfg.lr_adapter, 0.0)
            done += 1
    return gates.retention_probs()


def _rank_by_retention(model: GatedEncoderModel, sources: DomainDataset,
                       cfg: HeadRankConfig, adapt: bool) -> list:
    doms = sources.domains_present()
    if len(doms) < 3:
        raise ConfigError("cross-validated ranking needs at least 3 source domains")
    probs = []
    for fold, held_out in enumerate(doms):
        fold_train = sources.subset(sources.domains != held_out)
        probs.append(_train_retention_gates(model, fold_train, cfg, adapt,
                                            fold_seed=cfg.seed * 1000 + fold))
    mean_probs = np.mean(probs, axis=0)
    heads = all_heads(*mean_probs.shape)
    return sorted(heads, key=lambda lh: (mean_probs[lh[0], lh[1]], lh[0], lh[1]))


def rank_cv_bernoulli(model: GatedEncoderModel, sources: DomainDataset,
                      cfg: HeadRankConfig) -> list:
    """Frozen model; only retention gates train. Lowest keep-probability first."""
    return _rank_by_retention(model, sources, cfg, adapt=False)


def rank_adapt_and_drop(model: GatedEncoderModel, sources: DomainDataset,
                        cfg: HeadRankConfig) -> list:
    """Adapters and retention gates train together; ranking as in cv_bernoulli."""
    return _rank_by_retention(model, sources, cfg, adapt=True)


def drop_curve(model: GatedEncoderModel, ordering: list, drop_counts,
               eval_tokens: np.ndarray, eval_labels: np.ndarray) -> list:
    """Accuracy after dropping the first k heads of the ordering, per k."""
    total = model.config.num_layers * model.config.num_heads
    if sorted(ordering) != all_heads(model.config.num_layers, model.config.num_heads):
        raise ConfigError("ordering must be a permutation of all heads")
    curve = []
    for k in drop_counts:
        if not 0 <= k < total:
            raise ConfigError(f"drop count {k} out of range [0, {total})")
        view = drop_heads(model, ordering[:k])
        curve.append((int(k), view.accuracy(eval_tokens, eval_labels)))
    return curve


def averaged_drop_curve(model: GatedEncoderModel, orderings: list, drop_counts,
                        eval_tokens, eval_labels) -> list:
    curves = [drop_curve(model, o, drop_counts, eval_tokens, eval_labels) for o in orderings]
    return [(k, float(np.mean([c[i][1] for c in curves])))
            for i, k in enumerate(drop_counts)]


def gate_weight_gaps(gates: GateParams) -> np.ndarray:
    """Per layer: max minus min of the scale-compensated soft gate weights."""
    gaps = []
    for layer in range(gates.num_layers):
        with T.no_grad():
            w = gates.soft_weights(layer).data
        gaps.append(float(w.max() - w.min()))
    return np.asarray(gaps)


def write_curves_csv(path, rows) -> None:
    """rows: iterable of (strategy, seed, drop_count, accuracy)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "seed", "drop_count", "accuracy"])
        for strategy, seed, count, acc in rows:
            writer.writerow([strategy, seed, count, repr(float(acc))])


def write_ranking_csv(path, strategy: str, ordering: list, scores=None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "rank", "layer", "head", "score"])
        for rank, (layer, head) in enumerate(ordering):
            score = "" if scores is None else repr(float(scores[layer, head]))
            writer.writerow([strategy, rank, layer, head, score])
