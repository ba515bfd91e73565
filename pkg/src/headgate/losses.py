"""Classification against fixed class anchors, and multi-kernel MMD.

The classifier is purely geometric: features are compared by cosine
similarity against a frozen matrix of unit-norm class anchors and trained
with a temperature-scaled contrastive loss. Distribution discrepancy between
source domains is measured by the biased (V-statistic) maximum mean
discrepancy under a mean of Gaussian kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class ClassAnchors:
    """Frozen unit-norm class embeddings; never receive gradients."""

    anchors: np.ndarray          # [C, d], rows unit-norm
    temperature: float = 0.01

    def __post_init__(self):
        norms = np.linalg.norm(self.anchors, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-12:
            raise ConfigError("anchor rows must be unit-norm")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")

    @property
    def num_classes(self) -> int:
        return self.anchors.shape[0]

    @property
    def dim(self) -> int:
        return self.anchors.shape[1]

    @classmethod
    def make(cls, num_classes: int, dim: int, seed: int, temperature: float = 0.01) -> "ClassAnchors":
        rng = np.random.default_rng(seed)
        raw = rng.standard_normal((num_classes, dim))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        return cls(anchors=raw, temperature=temperature)


def _normalize_rows(features: Tensor) -> Tensor:
    sq = T.sum_(features * features, axis=-1, keepdims=True)
    if np.any(sq.data <= 0.0):
        raise ShapeError("zero-norm feature: cosine similarity undefined")
    return features / T.sqrt(sq)


def cosine_logits(features: Tensor, anchors: ClassAnchors) -> Tensor:
    """Cosine similarities divided by temperature, shape [N, C]."""
    if features.shape[-1] != anchors.dim:
        raise ShapeError(f"feature dim {features.shape[-1]} != anchor dim {anchors.dim}")
    unit = _normalize_rows(features)
    return T.matmul(unit, T.tensor(anchors.anchors.T)) * (1.0 / anchors.temperature)


def zero_shot_predict(feature, anchors: ClassAnchors) -> int:
    """Most-similar anchor by cosine; ties resolve to the lowest class index."""
    feat = feature.data if isinstance(feature, Tensor) else np.asarray(feature, dtype=np.float64)
    if feat.ndim != 1:
        raise ShapeError("zero_shot_predict takes a single feature vector")
    norm = np.linalg.norm(feat)
    if norm == 0.0:
        raise ShapeError("zero-norm feature: cosine similarity undefined")
    sims = anchors.anchors @ (feat / norm)
    return int(np.argmax(sims))


def predict_batch(features: np.ndarray, anchors: ClassAnchors) -> np.ndarray:
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ShapeError("zero-norm feature: cosine similarity undefined")
    sims = (features / norms) @ anchors.anchors.T
    return np.argmax(sims, axis=1).astype(np.int64)


def cls_loss(features: Tensor, labels: np.ndarray, anchors: ClassAnchors) -> Tensor:
    """Mean negative log-probability of the true class under the cosine softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= anchors.num_classes:
        raise ConfigError(f"labels out of range [0, {anchors.num_classes})")
    logits = cosine_logits(features, anchors)
    true_logit = T.take_lastdim_index(logits, labels)
    log_norm = T.logsumexp_lastdim(logits)
    return T.mean(log_norm - true_logit)


@dataclass
class KernelSpec:
    """Mean of Gaussian kernels exp(-||x - y||^2 / (2 sigma^2)) over bandwidths."""

    bandwidths: tuple = (1.0,)

    def __post_init__(self):
        self.bandwidths = tuple(float(b) for b in self.bandwidths)
        if not self.bandwidths or any(b <= 0 for b in self.bandwidths):
            raise ConfigError("need at least one positive bandwidth")


def median_heuristic(features: np.ndarray, multipliers=(0.25, 0.5, 1.0, 2.0, 4.0)) -> KernelSpec:
    """Bandwidths from the median pairwise distance of a feature batch.

    The base sigma is the median Euclidean distance over all unordered pairs;
    the returned spec carries that sigma scaled by each multiplier. Bandwidths
    are constants: no gradient flows through this choice.
    """
    n = features.shape[0]
    if n < 2:
        raise ConfigError("median heuristic needs at least 2 samples")
    sq = np.sum(features**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (features @ features.T)
    iu = np.triu_indices(n, k=1)
    med = float(np.median(np.sqrt(np.maximum(d2[iu], 0.0))))
    if med <= 0.0:
        med = 1.0
    return KernelSpec(bandwidths=tuple(m * med for m in multipliers))


def _pairwise_sq_dists(x: Tensor, y: Tensor) -> Tensor:
    xx = T.sum_(x * x, axis=-1, keepdims=True)            # [N, 1]
    yy = T.reshape(T.sum_(y * y, axis=-1, keepdims=True), (1, -1))  # [1, M]
    cross = T.matmul(x, T.swap_last2(y))                  # [N, M]
    return xx + yy - 2.0 * cross


def gaussian_kernel_matrix(x: Tensor, y: Tensor, spec: KernelSpec) -> Tensor:
    if x.shape[-1] != y.shape[-1]:
        raise ShapeError(f"kernel inputs disagree on dim: {x.shape} vs {y.shape}")
    d2 = _pairwise_sq_dists(x, y)
    total = None
    for sigma in spec.bandwidths:
        term = T.exp(d2 * (-1.0 / (2.0 * sigma * sigma)))
        total = term if total is None else total + term
    return total * (1.0 / len(spec.bandwidths))


def _sq_dists_np(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xx = np.sum(x * x, axis=1)[:, None]
    yy = np.sum(y * y, axis=1)[None, :]
    return np.maximum(xx + yy - 2.0 * (x @ y.T), 0.0)


def mmd_pair(sp: Tensor, sq: Tensor, spec: KernelSpec) -> Tensor:
    """Biased V-statistic MMD^2 between two feature sets (diagonals included).

    Fused into one tape node: the value is the usual three kernel-matrix
    means, and the backward rule uses the closed form
    d/dp_i = (4/N^2) sum_j k'(D_pp[i,j]) (p_i - p_j)
           - (4/NM)  sum_j k'(D_pq[i,j]) (p_i - q_j)
    (symmetrically for q), where k' is the mean over bandwidths of the
    Gaussian kernel's derivative in the squared distance.
    """
    if sp.ndim != 2 or sq.ndim != 2:
        raise ShapeError("mmd_pair expects [N, d] feature matrices")
    if sp.shape[0] < 1 or sq.shape[0] < 1:
        raise ShapeError("mmd_pair needs non-empty feature sets")
    if sp.shape[1] != sq.shape[1]:
        raise ShapeError(f"feature dims differ: {sp.shape} vs {sq.shape}")
    p, q = sp.data, sq.data
    n, m = p.shape[0], q.shape[0]
    d_pp, d_qq, d_pq = _sq_dists_np(p, p), _sq_dists_np(q, q), _sq_dists_np(p, q)

    k_pp = np.zeros_like(d_pp)
    k_qq = np.zeros_like(d_qq)
    k_pq = np.zeros_like(d_pq)
    w_pp = np.zeros_like(d_pp)
    w_qq = np.zeros_like(d_qq)
    w_pq = np.zeros_like(d_pq)
    for sigma in spec.bandwidths:
        c = -1.0 / (2.0 * sigma * sigma)
        e_pp, e_qq, e_pq = np.exp(c * d_pp), np.exp(c * d_qq), np.exp(c * d_pq)
        k_pp += e_pp
        k_qq += e_qq
        k_pq += e_pq
        w_pp += c * e_pp
        w_qq += c * e_qq
        w_pq += c * e_pq
    nk = float(len(spec.bandwidths))
    value = k_pp.mean() / nk + k_qq.mean() / nk - 2.0 * k_pq.mean() / nk
    w_pp /= nk
    w_qq /= nk
    w_pq /= nk

    def vjp(g):
        gs = float(g)
        gp = (4.0 / (n * n)) * (w_pp.sum(axis=1)[:, None] * p - w_pp @ p)
        gp -= (4.0 / (n * m)) * (w_pq.sum(axis=1)[:, None] * p - w_pq @ q)
        gq = (4.0 / (m * m)) * (w_qq.sum(axis=1)[:, None] * q - w_qq @ q)
        gq -= (4.0 / (n * m)) * (w_pq.sum(axis=0)[:, None] * q - w_pq.T @ p)
        return gs * gp, gs * gq

    return T.custom_op(np.float64(value), (sp, sq), vjp)


def mmd_pair_composed(sp: Tensor, sq: Tensor, spec: KernelSpec) -> Tensor:
    """Reference composition from kernel matrices; same value, slower graph."""
    if sp.shape[0] < 1 or sq.shape[0] < 1:
        raise ShapeError("mmd_pair needs non-empty feature sets")
    kpp = T.mean(gaussian_kernel_matrix(sp, sp, spec))
    kqq = T.mean(gaussian_kernel_matrix(sq, sq, spec))
    kpq = T.mean(gaussian_kernel_matrix(sp, sq, spec))
    return kpp + kqq - 2.0 * kpq


def mmd_multi_domain(domain_features: list[Tensor], spec: KernelSpec) -> Tensor:
    """Average MMD over all unordered domain pairs: 2 / (D (D-1)) * sum_{p<q}."""
    d = len(domain_features)
    if d < 2:
        raise ConfigError("multi-domain MMD needs at least 2 domains in the batch")
    total = None
    for p in range(d - 1):
        for q in range(p + 1, d):
            term = mmd_pair(domain_features[p], domain_features[q], spec)
            total = term if total is None else total + term
    return total * (2.0 / (d * (d - 1)))


def mmd_layered(taps_by_layer: list[list[Tensor]], specs) -> Tensor:
    """Mean over layers of the pairwise-averaged multi-domain MMD.

    taps_by_layer[l] holds one feature matrix per source domain for layer l.
    specs is one KernelSpec shared by all layers or a per-layer list.
    """
    if not taps_by_layer:
        raise ConfigError("no layer taps given")
    if isinstance(specs, KernelSpec):
        specs = [specs] * len(taps_by_layer)
    total = None
    for layer_feats, spec in zip(taps_by_layer, specs):
        term = mmd_multi_domain(layer_feats, spec)
        total = term if total is None else total + term
    return total * (1.0 / len(taps_by_layer))
