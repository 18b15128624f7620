"""Class prediction head: pooled prototype similarities -> class logits.

Only the bias-free linear head is implemented; its init wires each prototype
positively to its own class and negatively to the rest, so a fresh head is a
class-vote machine and every logit stays auditable as a weighted sum of
prototype evidence.  Alternative heads can slot in behind the same
``predict``/``parameter group`` surface.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, absolute, matmul, sum_, transpose

W_POS = 1.0
W_NEG = -0.5


class LinearHead:
    def __init__(self, class_of: np.ndarray, num_classes: int,
                 w_pos: float = W_POS, w_neg: float = W_NEG):
        class_of = np.asarray(class_of)
        weight = np.where(np.arange(num_classes)[:, None] == class_of[None, :], w_pos, w_neg)
        self.weight = Tensor(weight, requires_grad=True)
        self.class_of = class_of.copy()
        self.num_classes = num_classes


def predict(head: LinearHead, pooled: Tensor) -> Tensor:
    """logits = pooled . weight^T, shape [B, K]."""
    if pooled.data.ndim != 2 or pooled.data.shape[1] != head.weight.data.shape[1]:
        raise DimensionError(
            f"pooled similarities {pooled.data.shape} do not match head weight {head.weight.data.shape}")
    return matmul(pooled, transpose(head.weight, (1, 0)))


def off_class_l1(head: LinearHead) -> Tensor:
    """Sum of |weight| over (class, prototype) pairs the prototype does not belong to."""
    mask = (np.arange(head.num_classes)[:, None] != head.class_of[None, :]).astype(np.float64)
    return sum_(absolute(head.weight) * mask)


def head_parameter_group(head: LinearHead) -> list:
    return [head.weight]
