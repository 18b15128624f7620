"""Training objective: cross entropy plus weighted interpretability terms.

Cluster and separation both work in similarity space (higher = closer): the
cluster term is the batch mean of each image's best same-class pooled
similarity, separation the same over off-class prototypes.  The sweep samples
the cluster coefficient around -0.8 and the separation coefficient around
+0.08, so minimizing the total pulls same-class similarity up and pushes
off-class similarity down.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .head import LinearHead, off_class_l1
from .prototypes import Metric, PrototypeBank
from .tensor import (Tensor, concat, log_softmax, matmul, max_, mean_, renormalize, reshape,
                     sum_, transpose)

_MASK_FILL = -1e9


@dataclass
class LossWeights:
    cluster_coef: float = -0.8
    separation_coef: float = 0.08
    l1_coef: float = 1e-4
    ortho_coef: float = 0.0

    def __post_init__(self):
        if self.l1_coef < 0 or self.ortho_coef < 0:
            raise ContractError(
                f"l1_coef and ortho_coef must be nonnegative, got {self.l1_coef}, {self.ortho_coef}")


@dataclass
class LossBreakdown:
    ce: float
    cluster: float
    separation: float
    l1: float
    ortho: float
    total: float

    def to_json(self) -> dict:
        return {"ce": self.ce, "cluster": self.cluster, "separation": self.separation,
                "l1": self.l1, "ortho": self.ortho, "total": self.total}


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax at the true class (log-sum-exp stable)."""
    labels = np.asarray(labels)
    b, k = logits.data.shape
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    return -mean_(sum_(log_softmax(logits, axis=-1) * onehot, axis=-1))


def _masked_best(pooled: Tensor, mask: np.ndarray) -> Tensor:
    picked = pooled * mask + Tensor(_MASK_FILL * (1.0 - mask))
    best, _ = max_(picked, axis=1)
    return mean_(best)


def cluster_term(pooled: Tensor, labels, bank: PrototypeBank) -> Tensor:
    """Batch mean of max same-class pooled similarity."""
    labels = np.asarray(labels)
    mask = (bank.class_of[None, :] == labels[:, None]).astype(np.float64)
    if np.any(mask.sum(axis=1) == 0):
        missing = labels[mask.sum(axis=1) == 0]
        raise ContractError(f"no prototypes exist for class(es) {sorted(set(missing.tolist()))}")
    return _masked_best(pooled, mask)


def separation_term(pooled: Tensor, labels, bank: PrototypeBank) -> Tensor:
    """Batch mean of max off-class pooled similarity."""
    labels = np.asarray(labels)
    if len(np.unique(bank.class_of)) < 2:
        raise ContractError("separation needs prototypes from at least two classes")
    mask = (bank.class_of[None, :] != labels[:, None]).astype(np.float64)
    return _masked_best(pooled, mask)


def orthogonality_term(bank: PrototypeBank) -> Tensor:
    """Per class, squared Frobenius distance of the unit-prototype Gram matrix
    from the identity, summed over classes and divided by P."""
    if bank.metric is Metric.L2:
        raise ContractError("orthogonality term is defined for cosine-variant banks")
    p, d, hp, wp = bank.protos.data.shape
    flat = reshape(bank.protos, (p, d * hp * wp))
    total = Tensor(0.0)
    for c in np.unique(bank.class_of):
        idx = np.flatnonzero(bank.class_of == c)
        if np.array_equal(idx, np.arange(idx[0], idx[-1] + 1)):
            sub = flat[int(idx[0]):int(idx[-1]) + 1]
        else:
            sub = concat([flat[int(i):int(i) + 1] for i in idx], axis=0)
        rows, _ = renormalize(sub, 1.0)
        gram = matmul(rows, transpose(rows, (1, 0)))
        dev = gram - Tensor(np.eye(len(idx)))
        total = total + sum_(dev * dev)
    return total * (1.0 / p)


def overall_loss(logits: Tensor, pooled: Tensor, labels, bank: PrototypeBank,
                 head: LinearHead, weights: LossWeights):
    """Assemble the training scalar and its reporting breakdown.

    Returns (total tensor, LossBreakdown); the breakdown satisfies
    total == ce + w_cl*cluster + w_sep*separation + w_l1*l1 + w_o*ortho exactly,
    because it is read off the same arithmetic.
    """
    ce = cross_entropy(logits, labels)
    cluster = cluster_term(pooled, labels, bank)
    separation = separation_term(pooled, labels, bank)
    l1 = off_class_l1(head)
    use_ortho = weights.ortho_coef > 0 and bank.metric is Metric.DEFORMABLE_COSINE
    ortho = orthogonality_term(bank) if use_ortho else Tensor(0.0)

    total = (ce + cluster * weights.cluster_coef + separation * weights.separation_coef
             + l1 * weights.l1_coef + ortho * weights.ortho_coef)
    breakdown = LossBreakdown(
        ce=ce.item(), cluster=cluster.item(), separation=separation.item(),
        l1=l1.item(), ortho=ortho.item(), total=total.item(),
    )
    return total, breakdown
