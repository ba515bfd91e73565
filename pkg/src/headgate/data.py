"""Synthetic multi-domain token datasets with planted class and style signal.

Each sample is a small token matrix. Two designated tokens carry the class
prototype, two carry the domain's style vector scaled by confound_strength,
the rest are pure noise; everything gets i.i.d. Gaussian noise on top. Class
prototypes and style vectors live in orthogonal subspaces, so the style is a
genuine confounder: it correlates with the label through skewed per-domain
class priors on the training domains, and the held-out domain's style
direction is never seen during training.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .errors import ConfigError
from .io import read_blob, write_blob


@dataclass
class DomainSpec:
    num_domains: int = 4
    num_classes: int = 5
    model_dim: int = 32
    num_tokens: int = 9          # token 0 is the class-token slot (left zero)
    task_tokens: int = 1
    confounder_tokens: int = 4
    confound_strength: float = 2.0
    noise_std: float = 0.3
    label_noise: float = 0.0
    samples_per_domain_class: int = 40
    label_domain_correlation: float = 0.6
    style_subspace_dim: Optional[int] = None   # None: num_domains (orthogonal styles)

    def resolved_style_dim(self) -> int:
        """Dimension of the confounder subspace holding the style vectors.

        The default gives every domain its own orthogonal style direction.
        Setting it below num_domains packs the styles into a shared smaller
        subspace (still orthogonal to the task subspace, still one unseen
        direction per held-out domain).
        """
        if self.style_subspace_dim is not None:
            return self.style_subspace_dim
        return self.num_domains

    def validate(self) -> None:
        if self.num_domains < 2:
            raise ConfigError("need at least 2 domains")
        if self.num_classes < 1 or self.samples_per_domain_class < 1:
            raise ConfigError("num_classes and samples_per_domain_class must be positive")
        style_dim = self.resolved_style_dim()
        if not 2 <= style_dim:
            raise ConfigError("style subspace needs at least 2 dimensions")
        if self.num_classes + style_dim > self.model_dim:
            raise ConfigError(
                f"subspace capacity exceeded: {self.num_classes} class dims + "
                f"{style_dim} style dims need more than model_dim={self.model_dim}"
            )
        if 1 + self.task_tokens + self.confounder_tokens > self.num_tokens:
            raise ConfigError("task + confounder tokens do not fit in num_tokens")
        if not 0.0 <= self.label_domain_correlation < 1.0:
            raise ConfigError("label_domain_correlation must be in [0, 1)")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ConfigError("label_noise must be a probability")
        if self.confound_strength < 0 or self.noise_std < 0:
            raise ConfigError("strengths must be nonnegative")
        counts = self.count_matrix()
        if (counts < 1).any():
            raise ConfigError("correlation too strong: an empty (domain, class) cell")

    def preferred_class(self, domain: int) -> int:
        """Domains alternate between two popular classes.

        Sharing preferences across domains keeps the style-label shortcut
        alive inside each domain (the style still tells you which class is
        boosted) while guaranteeing that a held-out domain's boosted class is
        also boosted in some training domain, so leave-one-out evaluation is
        not dominated by raw label shift.
        """
        return domain % max(1, min(2, self.num_classes))

    def count_matrix(self) -> np.ndarray:
        """Per-(domain, class) sample counts implied by the correlation knob.

        Each domain keeps a total of num_classes * samples_per_domain_class
        samples; correlation rho moves mass onto the domain's preferred
        class. rho = 0 is the uniform grid.
        """
        d, c, n = self.num_domains, self.num_classes, self.samples_per_domain_class
        rho = self.label_domain_correlation
        counts = np.full((d, c), n * (1.0 - rho))
        for dom in range(d):
            counts[dom, self.preferred_class(dom)] += n * rho * c
        counts = np.floor(counts + 0.5).astype(np.int64)
        # rounding may drift; settle the difference on the preferred class
        for dom in range(d):
            counts[dom, self.preferred_class(dom)] += n * c - counts[dom].sum()
        return counts


@dataclass
class DomainDataset:
    spec: DomainSpec
    seed: int
    tokens: np.ndarray          # [N, num_tokens, model_dim]
    labels: np.ndarray          # [N] int64
    domains: np.ndarray         # [N] int64
    class_prototypes: np.ndarray   # [C, model_dim], unit rows, task subspace
    domain_styles: np.ndarray      # [D, model_dim], unit rows, confounder subspace
    clean_task_content: np.ndarray  # [N, model_dim]: the planted prototype per sample

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def domains_present(self) -> np.ndarray:
        return np.unique(self.domains)

    def subset(self, mask: np.ndarray) -> "DomainDataset":
        return DomainDataset(
            spec=self.spec, seed=self.seed,
            tokens=self.tokens[mask], labels=self.labels[mask], domains=self.domains[mask],
            class_prototypes=self.class_prototypes, domain_styles=self.domain_styles,
            clean_task_content=self.clean_task_content[mask],
        )


def make_dataset(spec: DomainSpec, seed: int) -> DomainDataset:
    """Deterministic generation: same (spec, seed) gives bit-identical data."""
    spec.validate()
    rng = np.random.default_rng(seed)

    # orthonormal basis: first C columns span the task subspace, the next
    # resolved_style_dim() columns span the (orthogonal) confounder subspace
    basis, _ = np.linalg.qr(rng.standard_normal((spec.model_dim, spec.model_dim)))
    prototypes = basis[:, : spec.num_classes].T.copy()
    style_dim = spec.resolved_style_dim()
    style_basis = basis[:, spec.num_classes : spec.num_classes + style_dim]
    if style_dim >= spec.num_domains:
        # room for mutually orthogonal styles: use basis columns directly
        styles = style_basis[:, : spec.num_domains].T.copy()
    else:
        # one unit style vector per domain inside the shared subspace;
        # directions are distinct with probability one, the held-out one unseen
        coeffs = rng.standard_normal((spec.num_domains, style_dim))
        coeffs /= np.linalg.norm(coeffs, axis=1, keepdims=True)
        styles = coeffs @ style_basis.T

    counts = spec.count_matrix()
    total = int(counts.sum())
    tokens = np.zeros((total, spec.num_tokens, spec.model_dim))
    labels = np.zeros(total, dtype=np.int64)
    domains = np.zeros(total, dtype=np.int64)
    clean = np.zeros((total, spec.model_dim))

    task_slots = range(1, 1 + spec.task_tokens)
    conf_slots = range(1 + spec.task_tokens, 1 + spec.task_tokens + spec.confounder_tokens)

    row = 0
    for dom in range(spec.num_domains):
        for cls in range(spec.num_classes):
            for _ in range(counts[dom, cls]):
                sample = rng.normal(0.0, spec.noise_std, (spec.num_tokens, spec.model_dim))
                sample[0] = 0.0  # class-token slot, filled by the encoder
                for t in task_slots:
                    sample[t] += prototypes[cls]
                for t in conf_slots:
                    sample[t] += spec.confound_strength * styles[dom]
                y = cls
                if spec.label_noise > 0.0 and rng.random() < spec.label_noise:
                    y = int(rng.integers(spec.num_classes))
                tokens[row] = sample
                labels[row] = y
                domains[row] = dom
                clean[row] = prototypes[cls]
                row += 1

    return DomainDataset(spec, seed, tokens, labels, domains, prototypes, styles, clean)


def lodo_split(dataset: DomainDataset, target_domain: int) -> tuple[DomainDataset, DomainDataset]:
    """Leave-one-domain-out partition: (train on the rest, test on the target)."""
    if target_domain not in dataset.domains_present():
        raise ConfigError(f"target_domain {target_domain} not present in dataset")
    if dataset.spec.num_domains < 3:
        raise ConfigError(
            "leave-one-domain-out with a pairwise feature-alignment loss needs at least "
            "3 domains so 2 or more remain for training"
        )
    test_mask = dataset.domains == target_domain
    return dataset.subset(~test_mask), dataset.subset(test_mask)


def stratified_batches(dataset: DomainDataset, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch of index batches with every source domain in every batch.

    Per-domain quotas split batch_size as evenly as possible (first domains
    absorb the remainder), so each domain contributes at least
    batch_size / (2 * num_domains) samples. Trailing samples that do not fill
    a full quota are dropped for this epoch; the shuffle is re-drawn per epoch.
    """
    present = dataset.domains_present()
    base, rem = divmod(batch_size, len(present))
    if base == 0:
        raise ConfigError(f"batch_size {batch_size} smaller than domain count {len(present)}")
    quotas = {dom: base + (1 if i < rem else 0) for i, dom in enumerate(present)}
    pools = {}
    n_batches = None
    for dom in present:
        idx = np.flatnonzero(dataset.domains == dom)
        pools[dom] = rng.permutation(idx)
        fit = len(idx) // quotas[dom]
        n_batches = fit if n_batches is None else min(n_batches, fit)
    if not n_batches:
        raise ConfigError("not enough samples per domain for one stratified batch")
    batches = []
    for b in range(n_batches):
        parts = [pools[dom][b * quotas[dom] : (b + 1) * quotas[dom]] for dom in present]
        batches.append(np.concatenate(parts))
    return batches


def save_dataset(dataset: DomainDataset, path) -> None:
    meta = {"kind": "dataset", "spec": asdict(dataset.spec), "seed": dataset.seed}
    arrays = [
        ("tokens", dataset.tokens),
        ("labels", dataset.labels.astype(np.float64)),
        ("domains", dataset.domains.astype(np.float64)),
        ("class_prototypes", dataset.class_prototypes),
        ("domain_styles", dataset.domain_styles),
        ("clean_task_content", dataset.clean_task_content),
    ]
    write_blob(path, meta, arrays)


def load_dataset(path) -> DomainDataset:
    meta, arrays = read_blob(path)
    if meta.get("kind") != "dataset":
        raise ConfigError(f"{path}: not a dataset blob")
    spec = DomainSpec(**meta["spec"])
    return DomainDataset(
        spec=spec, seed=int(meta["seed"]),
        tokens=arrays["tokens"],
        labels=arrays["labels"].astype(np.int64),
        domains=arrays["domains"].astype(np.int64),
        class_prototypes=arrays["class_prototypes"],
        domain_styles=arrays["domain_styles"],
        clean_task_content=arrays["clean_task_content"],
    )


def write_manifest_csv(dataset: DomainDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "domain", "label"])
        for i in range(len(dataset)):
            writer.writerow([i, int(dataset.domains[i]), int(dataset.labels[i])])
