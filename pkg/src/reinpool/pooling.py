"""Mean/max aggregation of a filtered vector set into one vector."""

from __future__ import annotations

import enum

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError


class PoolKind(enum.Enum):
    MEAN = "mean"
    MAX = "max"

    @classmethod
    def parse(cls, value) -> "PoolKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown pooling kind {value!r} (expected mean or max)") from None


def pool(vectors, mask, kind=PoolKind.MEAN) -> np.ndarray:
    """Pool the rows of ``vectors`` selected by ``mask``.

    An all-zero mask falls back to pooling every row, which is the static
    baseline. Accumulates and returns float64.
    """
    kind = PoolKind.parse(kind)
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"expected an N x d matrix, got shape {x.shape}")
    keep = np.asarray(mask).astype(bool).reshape(-1)
    if keep.shape[0] != x.shape[0]:
        raise ShapeError(f"mask length {keep.shape[0]} != number of rows {x.shape[0]}")
    if not np.isfinite(x).all():
        raise ValidationError("non-finite value in pooled vectors")
    rows = x[keep] if keep.any() else x
    if kind is PoolKind.MEAN:
        return rows.mean(axis=0)
    return rows.max(axis=0)


def pool_all(vectors, kind=PoolKind.MEAN) -> np.ndarray:
    x = np.asarray(vectors)
    return pool(x, np.ones(x.shape[0], dtype=bool), kind)


def pool_query(query, kind=PoolKind.MEAN) -> np.ndarray:
    """Pool every row of a (possibly multi-vector) query."""
    return pool_all(getattr(query, "vectors", query), kind)
