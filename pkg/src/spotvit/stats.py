"""Compact per-token descriptors from attention maps and cross-layer running stats.

Each (N+1)x(N+1) map splits into the class-token row/column (self-interaction
excluded) and the patch-patch submatrix, which is summarized by row-wise and
column-wise population mean and variance. The same summarization is applied
to elementwise running mean/variance matrices maintained across layers with
a Welford update, yielding three N x 6 descriptors per head.

All of it runs on tape tensors, so gradients reach the attention maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor

DESCRIPTOR_COLUMNS = ("cls_out", "cls_in", "mu_row", "mu_col", "var_row", "var_col")


@dataclass
class MapPartition:
    cls_out: Tensor  # (N,) attention from the class token to each patch
    cls_in: Tensor  # (N,) attention from each patch to the class token
    non_cls: Tensor  # (N, N) patch-patch interactions


@dataclass
class StatsDescriptor:
    """N x 6 per-token summary; columns ordered as DESCRIPTOR_COLUMNS."""

    values: Tensor

    @property
    def n_tokens(self) -> int:
        return self.values.shape[0]


def partition(map_values: Tensor) -> MapPartition:
    """Split a map into class-out row, class-in column, and patch submatrix."""
    size = map_values.shape[0]
    if map_values.data.ndim != 2 or map_values.shape[1] != size:
        raise ContractError(f"attention map must be square, got {map_values.shape}")
    if size < 2:
        raise ContractError("attention map needs at least one patch token")
    n = size - 1
    cls_out = T.reshape(T.col_slice(T.take_rows(map_values, [0]), 1, size), (n,))
    cls_in = T.reshape(
        T.col_slice(T.take_rows(map_values, range(1, size)), 0, 1), (n,)
    )
    non_cls = T.col_slice(T.take_rows(map_values, range(1, size)), 1, size)
    return MapPartition(cls_out, cls_in, non_cls)


def row_col_variances(
    non_cls: Tensor, weights: np.ndarray | None = None
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Population mean/variance per row and per column of the patch submatrix.

    With a 0/1 weight vector only the weighted positions contribute and the
    divisor is the weight sum; this keeps masked-mode statistics aligned with
    the physically pruned case, where those positions do not exist at all.
    """
    n = non_cls.shape[0]
    if weights is None:
        w = np.ones(n)
        count = float(n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        count = float(w.sum())
        if count <= 0:
            raise ContractError("row_col_variances: no retained tokens")
    w_row = Tensor(w[None, :])  # weights over columns j
    w_col = Tensor(w[:, None])  # weights over rows i

    inv = 1.0 / count
    mu_row = T.mul(T.sum_(T.mul(non_cls, w_row), axis=1), inv)
    mu_col = T.mul(T.sum_(T.mul(non_cls, w_col), axis=0), inv)
    dev_row = T.sub(non_cls, T.reshape(mu_row, (n, 1)))
    dev_col = T.sub(non_cls, T.reshape(mu_col, (1, n)))
    var_row = T.mul(T.sum_(T.mul(T.mul(dev_row, dev_row), w_row), axis=1), inv)
    var_col = T.mul(T.sum_(T.mul(T.mul(dev_col, dev_col), w_col), axis=0), inv)
    return mu_row, mu_col, var_row, var_col


def row_col_moments(non_cls: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Means and standard deviations per row/column (divide by N, not N-1)."""
    mu_row, mu_col, var_row, var_col = row_col_variances(non_cls)
    return mu_row, mu_col, T.sqrt(var_row), T.sqrt(var_col)


def build_descriptor(
    p: MapPartition, moments: tuple[Tensor, Tensor, Tensor, Tensor]
) -> StatsDescriptor:
    """Concatenate [cls_out, cls_in, mu_row, mu_col, var_row, var_col] columns."""
    n = p.cls_out.shape[0]
    cols = [p.cls_out, p.cls_in, *moments]
    for c in cols:
        if c.shape != (n,):
            raise ContractError(f"descriptor column shape {c.shape}, expected ({n},)")
    return StatsDescriptor(T.concat([T.reshape(c, (n, 1)) for c in cols], axis=1))


def descriptor_from_matrix(
    matrix: Tensor, weights: np.ndarray | None = None, use_std: bool = False
) -> StatsDescriptor:
    """Partition + moments + assembly for one map-shaped matrix."""
    part = partition(matrix)
    mu_row, mu_col, var_row, var_col = row_col_variances(part.non_cls, weights)
    if use_std:
        var_row, var_col = T.sqrt(var_row), T.sqrt(var_col)
    return build_descriptor(part, (mu_row, mu_col, var_row, var_col))


def fused_descriptor(
    matrix: Tensor, weights: np.ndarray | None = None, use_std: bool = False
) -> StatsDescriptor:
    """Single-node equivalent of descriptor_from_matrix (hot path).

    Emits one tape node with a hand-derived adjoint instead of ~25 small ops;
    the compositional route stays as the reference implementation and both are
    tested against the literal formulas.
    """
    matrix = T.as_tensor(matrix)
    size = matrix.shape[0]
    if matrix.data.ndim != 2 or matrix.shape[1] != size or size < 2:
        raise ContractError(f"attention map must be square with N >= 1, got {matrix.shape}")
    n = size - 1
    a = matrix.data
    x = a[1:, 1:]
    if weights is None:
        w = np.ones(n)
        count = float(n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        count = float(w.sum())
        if count <= 0:
            raise ContractError("fused_descriptor: no retained tokens")

    mu_row = (x * w[None, :]).sum(axis=1) / count
    mu_col = (x * w[:, None]).sum(axis=0) / count
    dev_row = x - mu_row[:, None]
    dev_col = x - mu_col[None, :]
    var_row = (dev_row * dev_row * w[None, :]).sum(axis=1) / count
    var_col = (dev_col * dev_col * w[:, None]).sum(axis=0) / count
    if use_std:
        spread_row, spread_col = np.sqrt(var_row), np.sqrt(var_col)
    else:
        spread_row, spread_col = var_row, var_col
    out = np.stack([a[0, 1:], a[1:, 0], mu_row, mu_col, spread_row, spread_col], axis=1)

    def vjp(g):
        da = np.zeros_like(a)
        da[0, 1:] += g[:, 0]
        da[1:, 0] += g[:, 1]
        g_vr, g_vc = g[:, 4], g[:, 5]
        if use_std:
            g_vr = g_vr / (2.0 * spread_row)
            g_vc = g_vc / (2.0 * spread_col)
        dx = np.outer(g[:, 2], w) / count
        dx += np.outer(w, g[:, 3]) / count
        # the weighted mean's own derivative cancels: sum_j w_j * dev = 0
        dx += 2.0 * g_vr[:, None] * dev_row * w[None, :] / count
        dx += 2.0 * g_vc[None, :] * dev_col * w[:, None] / count
        da[1:, 1:] += dx
        return (da,)

    return StatsDescriptor(T._node(out, "fused_descriptor", (matrix,), vjp))


def head_average(descriptors: list[StatsDescriptor]) -> StatsDescriptor:
    """Elementwise mean over heads."""
    if not descriptors:
        raise ContractError("head_average needs at least one descriptor")
    total = descriptors[0].values
    for d in descriptors[1:]:
        total = T.add(total, d.values)
    return StatsDescriptor(T.mul(total, 1.0 / len(descriptors)))


class CrossLayerAccumulator:
    """Welford running elementwise mean/variance of one head's maps across layers.

    Rows/columns of pruned tokens are dropped (or zeroed in masked mode) at
    each prune event; the layer count is preserved across shrinking.
    """

    def __init__(self, n_tokens: int):
        self.mean = Tensor(np.zeros((n_tokens, n_tokens)))
        self._m2 = Tensor(np.zeros((n_tokens, n_tokens)))
        self.layer_count = 0

    @property
    def size(self) -> int:
        return self.mean.shape[0]

    def update(self, map_values: Tensor) -> None:
        if map_values.shape != self.mean.shape:
            raise ContractError(
                f"accumulator shape {self.mean.shape} but map {map_values.shape}: "
                "shape drift without a recorded prune event"
            )
        self.layer_count += 1
        delta = T.sub(map_values, self.mean)
        self.mean = T.add(self.mean, T.mul(delta, 1.0 / self.layer_count))
        delta2 = T.sub(map_values, self.mean)
        self._m2 = T.add(self._m2, T.mul(delta, delta2))

    def variance(self) -> Tensor:
        if self.layer_count == 0:
            raise ContractError("accumulator holds no layers yet")
        return T.mul(self._m2, 1.0 / self.layer_count)

    def shrink(self, keep_indices) -> None:
        """Restrict rows and columns to keep_indices (class index 0 required)."""
        idx = np.asarray(keep_indices, dtype=np.intp)
        if idx.size == 0 or idx[0] != 0:
            raise ContractError("shrink must keep the class token at index 0")
        self.mean = _take_rows_cols(self.mean, idx)
        self._m2 = _take_rows_cols(self._m2, idx)

    def mask_out(self, mask: np.ndarray) -> None:
        """Masked-mode analog of shrink: zero pruned rows/columns in place."""
        m = np.asarray(mask, dtype=np.float64)
        weight = Tensor(np.outer(m, m))
        self.mean = T.mul(self.mean, weight)
        self._m2 = T.mul(self._m2, weight)


def _take_rows_cols(t: Tensor, idx: np.ndarray) -> Tensor:
    rows = T.take_rows(t, idx)
    return T.transpose(T.take_rows(T.transpose(rows), idx))


def assemble_features(
    z_global: Tensor,
    z_local: Tensor,
    current: list[StatsDescriptor] | None,
    cross_mean: list[StatsDescriptor] | None,
    cross_var: list[StatsDescriptor] | None,
    *,
    per_head: bool = True,
    with_mean_cols: bool = True,
    with_var_cols: bool = True,
) -> Tensor:
    """Concatenate predictor inputs: [z_global, z_local, sources in head order].

    Sources appear in the fixed order current / cross-layer mean / cross-layer
    variance; a None source is skipped (ablation). Column subsets drop the
    mean or variance statistics while always keeping the class interactions.
    """
    n = z_global.shape[0]
    parts: list[Tensor] = [z_global, z_local]
    for group in (current, cross_mean, cross_var):
        if group is None:
            continue
        descs = group if per_head else [head_average(group)]
        for d in descs:
            if d.n_tokens != n:
                raise ContractError(
                    f"descriptor token count {d.n_tokens} != feature rows {n}"
                )
            parts.append(T.col_slice(d.values, 0, 2))
            if with_mean_cols:
                parts.append(T.col_slice(d.values, 2, 4))
            if with_var_cols:
                parts.append(T.col_slice(d.values, 4, 6))
    return T.concat(parts, axis=1)
