"""Shared self-attention across an image batch with log-similarity and log-mask biases.

For query image i the keys and values of all N images are concatenated
along the position axis and the logits receive an additive bias
``log S_i^+ + log M_i^+`` before the softmax. A zero in either inflated
vector removes that key column exactly.
"""
import math
from typing import Sequence

import numpy as np
import torch

from src.models.generation import AttentionSchedule, FeatureBlock
from src.models.plan import SimilarityMatrix


class ShapeMismatch(ValueError):
    """Raised when per-image features, masks or biases disagree in shape."""


class IndexOutOfRange(IndexError):
    """Raised when an image index falls outside the batch."""


def _compute_dtype(tensor: torch.Tensor) -> torch.dtype:
    # Never below float32, so exp(-inf) underflows to an exact zero weight.
    return torch.promote_types(tensor.dtype, torch.float32)


def biased_attention(
    query: torch.Tensor,
    key: torch.Tensor,
    value: torch.Tensor,
    bias: torch.Tensor | None = None,
    *,
    return_weights: bool = False,
):
    """softmax(Q K^T / sqrt(d_k) + bias) V.

    ``bias`` broadcasts against the key axis. This is also the plain
    single-image attention when ``bias`` is None and K, V belong to the
    query's own image.
    """
    dtype = _compute_dtype(query)
    q = query.to(dtype)
    k = key.to(dtype)
    v = value.to(dtype)
    scores = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    if bias is not None:
        scores = scores + bias.to(dtype)
    weights = torch.softmax(scores, dim=-1)
    out = torch.matmul(weights, v).to(torch.promote_types(value.dtype, query.dtype))
    if return_weights:
        return out, weights
    return out


def _check_block(blocks: FeatureBlock) -> tuple[int, int]:
    q, k, v = blocks.queries, blocks.keys, blocks.values
    if not (q.shape[0] == k.shape[0] == v.shape[0]):
        raise ShapeMismatch(
            f"image counts differ: queries {q.shape[0]}, keys {k.shape[0]}, values {v.shape[0]}"
        )
    if q.shape[:-1] != k.shape[:-1] or k.shape[:-1] != v.shape[:-1]:
        raise ShapeMismatch(
            f"position/head axes differ: queries {tuple(q.shape)}, keys {tuple(k.shape)}, "
            f"values {tuple(v.shape)}"
        )
    if q.shape[-1] != k.shape[-1]:
        raise ShapeMismatch(f"d_k differs: queries {q.shape[-1]}, keys {k.shape[-1]}")
    return k.shape[0], k.shape[-2]


def _check_index(i: int, n: int) -> None:
    if not 0 <= i < n:
        raise IndexOutOfRange(f"image index {i} outside [0, {n})")


def concat_kv(blocks: FeatureBlock) -> tuple[torch.Tensor, torch.Tensor]:
    """Concatenate keys and values of all images along the position axis.

    Rows of image 0 come first, then image 1, and so on.
    """
    _check_block(blocks)
    k_plus = torch.cat(list(blocks.keys.unbind(0)), dim=-2)
    v_plus = torch.cat(list(blocks.values.unbind(0)), dim=-2)
    return k_plus, v_plus


def _as_matrix(similarity) -> torch.Tensor:
    if isinstance(similarity, SimilarityMatrix):
        similarity = similarity.to_numpy()
    matrix = torch.as_tensor(np.asarray(similarity, dtype=np.float64))
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ShapeMismatch(f"similarity matrix must be square, got shape {tuple(matrix.shape)}")
    if torch.isnan(matrix).any() or (matrix < 0).any() or (matrix > 1).any():
        raise ValueError("similarity values must lie in [0, 1]")
    return matrix


def inflate_similarity(similarity, i: int, positions: int) -> torch.Tensor:
    """Expand row i of W to the concatenated key axis (length N*P).

    Segment j holds W[i, j]; the query image's own segment holds 1.
    """
    matrix = _as_matrix(similarity)
    n = matrix.shape[0]
    _check_index(i, n)
    row = matrix[i].clone()
    row[i] = 1.0
    return row.repeat_interleave(positions)


def inflate_masks(masks: Sequence, i: int) -> torch.Tensor:
    """Concatenate per-image P-length {0,1} masks, forcing image i's segment open."""
    if len(masks) == 0:
        raise ShapeMismatch("at least one mask is required")
    rows = [torch.as_tensor(np.asarray(m, dtype=np.float64)).reshape(-1) for m in masks]
    positions = rows[0].shape[0]
    for j, row in enumerate(rows):
        if row.shape[0] != positions:
            raise ShapeMismatch(f"mask {j} has {row.shape[0]} positions, expected {positions}")
    _check_index(i, len(rows))
    stacked = torch.stack(rows)
    stacked[i] = 1.0
    return stacked.reshape(-1)


def shared_attention(
    blocks: FeatureBlock,
    s_plus: torch.Tensor,
    m_plus: torch.Tensor,
    i: int,
    *,
    return_weights: bool = False,
):
    """Output of image i attending to every image under the S and M biases.

    Key segments excluded entirely by the biases are dropped before the
    product, so fully isolated images reproduce plain attention exactly.
    With ``return_weights`` the full ``(..., P, N*P)`` attention matrix is
    returned as well, zeros in excluded columns.
    """
    n, positions = _check_block(blocks)
    _check_index(i, n)
    width = n * positions
    s_plus = torch.as_tensor(s_plus).reshape(-1)
    m_plus = torch.as_tensor(m_plus).reshape(-1)
    if s_plus.shape[0] != width or m_plus.shape[0] != width:
        raise ShapeMismatch(
            f"inflated biases must have {width} entries, got S {s_plus.shape[0]}, M {m_plus.shape[0]}"
        )

    bias = torch.log(s_plus.to(torch.float64)) + torch.log(m_plus.to(torch.float64))
    segments = bias.reshape(n, positions)
    if not torch.isfinite(segments[i]).all():
        raise ValueError(f"self segment of image {i} must be fully open")

    kept = [j for j in range(n) if torch.isfinite(segments[j]).any()]
    keys = torch.cat([blocks.keys[j] for j in kept], dim=-2)
    values = torch.cat([blocks.values[j] for j in kept], dim=-2)
    kept_bias = torch.cat([segments[j] for j in kept])

    result = biased_attention(
        blocks.queries[i], keys, values, kept_bias, return_weights=return_weights
    )
    if not return_weights:
        return result

    out, weights = result
    full = weights.new_zeros(weights.shape[:-1] + (width,))
    for slot, j in enumerate(kept):
        full[..., j * positions:(j + 1) * positions] = weights[..., slot * positions:(slot + 1) * positions]
    return out, full


def attention_router(schedule: AttentionSchedule, step: int, layer_id) -> bool:
    """True iff this (step, layer) computes shared attention."""
    if not 0 <= step < schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps})")
    return step < schedule.shared_steps and schedule.layer_filter(layer_id)
