"""Fine-tuning objective: task loss, retention-rate deviation, and two
teacher-similarity terms (prediction KL and retained-token cosine), combined
as a weighted sum. Teacher quantities enter as plain arrays so no gradient
can reach the frozen model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor

LOG_FLOOR = 1e-12


@dataclass
class LossWeights:
    rate: float = 2.0  # lambda_1
    pred: float = 0.5  # lambda_2
    token: float = 0.0  # lambda_3; 10.0 for token-similarity-supervised runs


def softmax_probs(logits: Tensor) -> Tensor:
    """Class distribution from 1-D logits."""
    return T.softmax_lastdim(logits)


def task_loss(logits: Tensor, label) -> Tensor:
    """Cross-entropy: -log softmax(logits)[label]; batched input is averaged."""
    if logits.data.ndim == 2:
        labels = np.asarray(label, dtype=int)
        if labels.shape != (logits.shape[0],):
            raise ContractError(
                f"{logits.shape[0]} logit rows but {labels.shape} labels"
            )
        per = [task_loss(T.reshape(T.take_rows(logits, [i]), (logits.shape[1],)), l)
               for i, l in enumerate(labels)]
        total = per[0]
        for p in per[1:]:
            total = T.add(total, p)
        return T.mul(total, 1.0 / len(per))
    n_classes = logits.shape[0]
    label = int(label)
    if not 0 <= label < n_classes:
        raise ContractError(f"label {label} outside [0, {n_classes})")
    shift = logits.data.max()  # constant shift keeps exp in range
    z = T.sub(logits, shift)
    log_norm = T.log(T.sum_(T.exp(z)))
    picked = T.reshape(T.take_rows(T.reshape(z, (n_classes, 1)), [label]), ())
    return T.sub(log_norm, picked)


def rate_loss(empirical: Sequence[Sequence[Tensor]], targets: Sequence[float]) -> Tensor:
    """Mean squared deviation between empirical and target retention rates,
    over samples and stages."""
    if not empirical:
        raise ContractError("rate_loss needs at least one sample")
    n_stages = len(targets)
    total: Tensor | None = None
    count = 0
    for sample in empirical:
        if len(sample) != n_stages:
            raise ContractError(
                f"sample has {len(sample)} stage rates, expected {n_stages}"
            )
        for rho_hat, rho_k in zip(sample, targets):
            diff = T.sub(rho_k, rho_hat)
            sq = T.mul(diff, diff)
            total = sq if total is None else T.add(total, sq)
            count += 1
    if count == 0:
        return Tensor(np.zeros(()))
    return T.mul(total, 1.0 / count)


def pred_similarity(teacher_probs: np.ndarray, student_probs: Tensor) -> Tensor:
    """KL(teacher || student) with an epsilon floor inside both logs."""
    yt = np.asarray(teacher_probs, dtype=np.float64)
    if yt.shape != student_probs.shape:
        raise ContractError(
            f"distribution shapes differ: {yt.shape} vs {student_probs.shape}"
        )
    log_t = np.log(np.maximum(yt, LOG_FLOOR))
    log_s = T.log(T.maximum(student_probs, LOG_FLOOR))
    return T.sum_(T.mul(Tensor(yt), T.sub(Tensor(log_t), log_s)))


def token_similarity(
    teacher_tokens: np.ndarray, student_tokens: Tensor, retained: np.ndarray
) -> Tensor:
    """1 - cosine between flattened retained-token embeddings of one sample."""
    keep = np.flatnonzero(np.asarray(retained, dtype=bool))
    if keep.size == 0:
        raise ContractError("token_similarity needs at least one retained token")
    t_ref = np.asarray(teacher_tokens, dtype=np.float64)[keep].reshape(-1)
    rows = T.take_rows(student_tokens, keep)
    flat = T.reshape(rows, (t_ref.size,))
    ref_norm = float(np.linalg.norm(t_ref))
    if ref_norm == 0.0:
        raise ContractError("teacher token vector has zero norm")
    dot = T.sum_(T.mul(flat, Tensor(t_ref)))
    norm = T.sqrt(T.sum_(T.mul(flat, flat)))
    if float(norm.data) == 0.0:
        raise ContractError("student token vector has zero norm")
    cos = T.div(dot, T.mul(norm, ref_norm))
    return T.sub(1.0, cos)


def total(
    cls: Tensor, rate: Tensor, pred: Tensor, token: Tensor, weights: LossWeights
) -> Tensor:
    """cls + lambda1 * rate + lambda2 * pred + lambda3 * token."""
    out = T.add(cls, T.mul(rate, weights.rate))
    out = T.add(out, T.mul(pred, weights.pred))
    return T.add(out, T.mul(token, weights.token))
