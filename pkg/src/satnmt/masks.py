"""Group partitioning, causal masks and the long-distance target shift.

All indices are 0-based.  A target of length ``n`` is cut into consecutive
groups of ``K`` positions (the last group may be shorter).  Position ``i``
may attend to position ``j`` iff ``j`` lies in the same group as ``i`` or in
an earlier one, which gives the row rule ``j < (i // K + 1) * K``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, TypeVar

import torch

from satnmt.errors import InvalidArgument

T = TypeVar("T")


@dataclass(frozen=True)
class GroupPartition:
    n: int
    K: int
    groups: tuple[range, ...]

    def __len__(self) -> int:
        return len(self.groups)

    def group_of(self, t: int) -> int:
        return t // self.K


def _check_positive(**kwargs: int) -> None:
    for name, value in kwargs.items():
        if value < 1:
            raise InvalidArgument(f"{name} must be >= 1, got {value}")


def num_groups(n: int, K: int) -> int:
    _check_positive(n=n, K=K)
    return (n - 1) // K + 1


def partition_groups(n: int, K: int) -> GroupPartition:
    """Split positions ``0..n`` into half-open ranges of length ``K``."""
    _check_positive(n=n, K=K)
    groups = tuple(range(s, min(s + K, n)) for s in range(0, n, K))
    return GroupPartition(n=n, K=K, groups=groups)


def strict_causal_mask(n: int) -> torch.Tensor:
    """Lower-triangular boolean ``n x n`` mask (True = may attend)."""
    _check_positive(n=n)
    return torch.ones(n, n, dtype=torch.bool).tril()


def relaxed_causal_mask(n: int, K: int) -> torch.Tensor:
    """Coarse-grained lower-triangular mask: each row sees its whole group."""
    _check_positive(n=n, K=K)
    rows = torch.arange(n).unsqueeze(1)
    cols = torch.arange(n).unsqueeze(0)
    return cols < (rows // K + 1) * K


def shift_targets(y: Sequence[T], K: int, bos: T) -> list[T]:
    """Decoder inputs for long-distance prediction: ``y[t-K]`` feeds position ``t``."""
    _check_positive(K=K)
    y = list(y)
    n = len(y)
    return [bos] * min(K, n) + y[: max(n - K, 0)]


def shift_targets_batch(y: torch.Tensor, K: int, bos: int) -> torch.Tensor:
    """Tensor version of :func:`shift_targets` over the last dimension."""
    _check_positive(K=K)
    n = y.shape[-1]
    lead = torch.full((*y.shape[:-1], min(K, n)), bos, dtype=y.dtype)
    return torch.cat([lead, y[..., : max(n - K, 0)]], dim=-1)


def additive_mask(mask: torch.Tensor, dtype: torch.dtype = torch.float32,
                  neg: float = -1e9) -> torch.Tensor:
    """Turn a boolean visibility mask into the additive form used before softmax."""
    out = torch.zeros(mask.shape, dtype=dtype)
    return out.masked_fill(~mask, neg)
