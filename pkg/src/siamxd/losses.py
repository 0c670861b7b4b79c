"""Classification, cross-domain pairing and cross-domain detaching losses.

All functions take and return :class:`~siamxd.autodiff.Tensor` objects and
are differentiable end to end. The set distance between two groups of
embeddings is the mean of all pairwise Euclidean distances between them.
"""
from dataclasses import dataclass

import numpy as np

from siamxd import autodiff as ad
from siamxd.autodiff import ContractError, Tensor
from siamxd.model import ConfigError

PROB_CLAMP = 1e-12
DEFAULT_ALPHA = 0.25


@dataclass(frozen=True)
class LossBreakdown:
    l_c: float
    l_cp: float
    l_cd: float
    l_overall: float
    alpha: float

    @classmethod
    def from_parts(cls, l_c, l_cp, l_cd, alpha):
        return cls(l_c, l_cp, l_cd, l_c + alpha * (l_cp - l_cd), alpha)


@dataclass
class BatchSplit:
    """Embeddings grouped by domain and label, plus source predictions."""

    fs_pos: Tensor
    fs_neg: Tensor
    ft_pos: Tensor
    ft_neg: Tensor
    source_probs: Tensor = None
    source_labels: np.ndarray = None

    @classmethod
    def from_embeddings(cls, fs, ft, ys, yt, source_probs=None):
        """Split source/target embedding batches by their 0/1 labels."""
        ys = _binary_labels(ys)
        yt = _binary_labels(yt)
        return cls(
            fs_pos=ad.take_rows(fs, np.flatnonzero(ys == 1)),
            fs_neg=ad.take_rows(fs, np.flatnonzero(ys == 0)),
            ft_pos=ad.take_rows(ft, np.flatnonzero(yt == 1)),
            ft_neg=ad.take_rows(ft, np.flatnonzero(yt == 0)),
            source_probs=source_probs,
            source_labels=ys,
        )

    def flipped_target(self):
        """Same split with the target labels swapped."""
        return BatchSplit(self.fs_pos, self.fs_neg, self.ft_neg, self.ft_pos,
                          self.source_probs, self.source_labels)

    def check(self):
        for name in ("fs_pos", "fs_neg", "ft_pos", "ft_neg"):
            t = getattr(self, name)
            if t is None or t.shape[0] == 0:
                raise ContractError(f"cross-domain loss needs a nonempty {name} group")


def _binary_labels(y):
    y = np.asarray(y.data if isinstance(y, Tensor) else y).reshape(-1)
    if y.size and not np.all((y == 0) | (y == 1)):
        raise ContractError(f"labels must be 0 or 1, got {np.unique(y)}")
    return y.astype(np.int64)


def classification_loss(probs, labels):
    """Mean binary cross-entropy of predicted probabilities against 0/1 labels."""
    probs = ad.as_tensor(probs)
    y = _binary_labels(labels)
    if y.size == 0:
        raise ContractError("classification loss on an empty batch")
    p = ad.reshape(probs, (-1,))
    if p.shape[0] != y.size:
        raise ContractError(f"{p.shape[0]} predictions for {y.size} labels")
    yt = Tensor(y.astype(np.float64))
    hi = 1.0 - PROB_CLAMP
    ll = yt * ad.log(p, PROB_CLAMP, hi) + (1.0 - yt) * ad.log(1.0 - p, PROB_CLAMP, hi)
    return -ad.mean(ll)


def set_distance(A, B, squared=False):
    """Average pairwise (optionally squared) Euclidean distance between row sets."""
    A, B = ad.as_tensor(A), ad.as_tensor(B)
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ContractError(f"set distance between empty groups {A.shape} and {B.shape}")
    d = ad.pairwise_euclidean(A, B)
    if squared:
        d = ad.square(d)
    return ad.mean(d)


def pairing_loss(split, squared=False):
    """Distance between same-label groups across domains (to be minimised)."""
    split.check()
    return (set_distance(split.fs_pos, split.ft_pos, squared)
            + set_distance(split.fs_neg, split.ft_neg, squared))


def detaching_loss(split, squared=False, margin=None):
    """Distance between different-label groups across domains (to be maximised).

    With ``margin`` set, each term is capped at ``min(D, margin)``: pushing
    groups further apart than the margin earns nothing, which is the hinge
    ``max(0, margin - D)`` up to a constant.
    """
    split.check()
    a = set_distance(split.fs_pos, split.ft_neg, squared)
    b = set_distance(split.fs_neg, split.ft_pos, squared)
    if margin is not None:
        a, b = ad.minimum(a, margin), ad.minimum(b, margin)
    return a + b


def overall_loss(l_c, l_cp, l_cd, alpha=DEFAULT_ALPHA):
    """``l_c + alpha * (l_cp - l_cd)``; works on tensors or plain floats."""
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    return l_c + alpha * (l_cp - l_cd)
