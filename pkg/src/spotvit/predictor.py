"""Token relevance prediction and keep/drop mask construction.

A small MLP scores each patch token from remapped embeddings plus the
attention-derived descriptors; training samples differentiable keep/drop
decisions with Gumbel-Softmax (optionally straight-through), inference picks
an exact top-k with index-order tie-breaking. Stage masks are hierarchical:
once dropped, always dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, ContractError, HierarchyError
from .tensor import Tensor
from .vit import trunc_normal

GUMBEL_EPS = 1e-12


@dataclass
class PredictorConfig:
    d_remap: int = 0
    per_head: bool = True
    include_current: bool = True  # descriptors of the newest attention map
    include_layer_mean: bool = True  # descriptors of the cross-layer mean
    include_layer_var: bool = True  # descriptors of the cross-layer variance
    include_mean_stats: bool = True  # mu_row / mu_col columns
    include_var_stats: bool = True  # var_row / var_col columns
    shared_across_stages: bool = False
    use_std: bool = False  # store sigma instead of sigma^2 in the descriptors

    def __post_init__(self):
        if self.d_remap < 0 or (self.d_remap > 0 and self.d_remap % 2 != 0):
            raise ConfigError(f"d_remap must be 0 or a positive even number, got {self.d_remap}")
        if not (
            self.include_current
            or self.include_layer_mean
            or self.include_layer_var
            or self.d_remap > 0
        ):
            raise ConfigError("predictor needs at least one information source")

    @property
    def stat_cols(self) -> int:
        return 2 + 2 * self.include_mean_stats + 2 * self.include_var_stats

    @property
    def n_sources(self) -> int:
        return int(self.include_current) + int(self.include_layer_mean) + int(
            self.include_layer_var
        )

    def feature_dim(self, heads: int) -> int:
        groups = heads if self.per_head else 1
        return self.d_remap + self.stat_cols * self.n_sources * groups


@dataclass
class RetentionState:
    """Validated hierarchical stage masks plus per-stage bookkeeping."""

    masks: list[np.ndarray] = field(default_factory=list)  # bool, original index space
    target_rates: list[float] = field(default_factory=list)
    empirical_rates: list[float] = field(default_factory=list)
    kept_indices: list[np.ndarray] = field(default_factory=list)

    @property
    def stages(self) -> int:
        return len(self.masks)

    def kept_counts(self) -> list[int]:
        return [len(ix) - 1 for ix in self.kept_indices]  # patch tokens only


class RelevancePredictor:
    """One stage's scoring module: remap head plus the relevance MLP."""

    def __init__(self, embed_dim: int, heads: int, cfg: PredictorConfig, seed: int = 0):
        self.embed_dim = embed_dim
        self.heads = heads
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        e = cfg.feature_dim(heads)
        self.feature_dim = e
        h1, h2 = max(e // 2, 1), max(e // 4, 1)
        p: dict[str, Tensor] = {}
        if cfg.d_remap > 0:
            p["remap.ln.gain"] = Tensor(np.ones(embed_dim), requires_grad=True)
            p["remap.ln.bias"] = Tensor(np.zeros(embed_dim), requires_grad=True)
            p["remap.weight"] = Tensor(
                trunc_normal(rng, (embed_dim, cfg.d_remap)), requires_grad=True
            )
            p["remap.bias"] = Tensor(np.zeros(cfg.d_remap), requires_grad=True)
        p["score.w1"] = Tensor(trunc_normal(rng, (e, h1)), requires_grad=True)
        p["score.b1"] = Tensor(np.zeros(h1), requires_grad=True)
        p["score.w2"] = Tensor(trunc_normal(rng, (h1, h2)), requires_grad=True)
        p["score.b2"] = Tensor(np.zeros(h2), requires_grad=True)
        p["score.w3"] = Tensor(trunc_normal(rng, (h2, 2)), requires_grad=True)
        p["score.b3"] = Tensor(np.zeros(2), requires_grad=True)
        self.params = p

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, tensor in self.params.items():
            key = prefix + name
            if key not in arrays:
                raise CheckpointError(f"checkpoint missing parameter '{key}'")
            if arrays[key].shape != tensor.data.shape:
                raise CheckpointError(
                    f"'{key}': checkpoint shape {arrays[key].shape} != {tensor.data.shape}"
                )
            tensor.data = arrays[key].astype(np.float64).copy()

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False

    # -- feature construction -------------------------------------------------

    def remap_tokens(
        self, patch_tokens: Tensor, retained: np.ndarray
    ) -> tuple[Tensor, Tensor]:
        """Project patch tokens and split into local / pooled-global halves.

        The global half is the mean over currently retained tokens, broadcast
        to every row. d_remap == 0 yields empty features (token-free mode).
        """
        n = patch_tokens.shape[0]
        if self.cfg.d_remap == 0:
            empty = Tensor(np.zeros((n, 0)))
            return empty, empty
        p = self.params
        h = T.gelu(
            T.linear(
                T.layer_norm(patch_tokens, p["remap.ln.gain"], p["remap.ln.bias"]),
                p["remap.weight"],
                p["remap.bias"],
            )
        )
        half = self.cfg.d_remap // 2
        z_local = T.col_slice(h, 0, half)
        second = T.col_slice(h, half, self.cfg.d_remap)
        w = np.asarray(retained, dtype=np.float64)
        if w.shape != (n,):
            raise ContractError(f"retained mask length {w.shape} != patch count {n}")
        count = w.sum()
        if count <= 0:
            raise ContractError("no retained tokens to pool the global feature over")
        pooled = T.mul(T.matmul(Tensor(w[None, :]), second), 1.0 / count)
        z_global = T.matmul(Tensor(np.ones((n, 1))), pooled)
        return z_local, z_global

    def score_logits(self, features: Tensor) -> Tensor:
        """Pre-softmax two-way relevance logits, one row per patch token."""
        if features.shape[1] != self.feature_dim:
            raise ContractError(
                f"feature width {features.shape[1]} != expected {self.feature_dim}"
            )
        p = self.params
        h = T.gelu(T.linear(features, p["score.w1"], p["score.b1"]))
        h = T.gelu(T.linear(h, p["score.w2"], p["score.b2"]))
        return T.linear(h, p["score.w3"], p["score.b3"])

    def score(self, features: Tensor) -> Tensor:
        """Keep probability per token: column 0 of the two-way softmax."""
        probs = T.softmax_lastdim(self.score_logits(features))
        return T.reshape(T.col_slice(probs, 0, 1), (features.shape[0],))


# -- mask sampling and selection ------------------------------------------------


def gumbel_sample(
    keep_logits: Tensor, tau: float, hard: bool, rng: np.random.Generator
) -> Tensor:
    """Gumbel-Softmax sample per token; straight-through one-hot when hard."""
    if tau <= 0:
        raise ContractError(f"gumbel temperature must be positive, got {tau}")
    n = keep_logits.shape[0]
    u = rng.random((n, 2))
    g = -np.log(-np.log(np.clip(u, GUMBEL_EPS, 1.0 - GUMBEL_EPS)))
    soft = T.softmax_lastdim(T.mul(T.add(keep_logits, Tensor(g)), 1.0 / tau))
    if not hard:
        return soft
    one_hot = np.zeros((n, 2))
    one_hot[np.arange(n), soft.data.argmax(axis=1)] = 1.0
    # forward: exact one-hot; backward: gradient of the soft sample
    return T.add(Tensor(one_hot), T.sub(soft, soft.detach()))


def gumbel_mask(
    keep_logits: Tensor, tau: float, hard: bool, rng: np.random.Generator
) -> Tensor:
    """Length-N keep mask (column 0 of the sampled keep/drop pair)."""
    sample = gumbel_sample(keep_logits, tau, hard, rng)
    return T.reshape(T.col_slice(sample, 0, 1), (keep_logits.shape[0],))


def topk_select(
    keep_prob: np.ndarray, target_count: int, prev_mask: np.ndarray
) -> np.ndarray:
    """Deterministically retain the target_count most likely patch tokens.

    Only tokens alive in prev_mask are eligible; ties break toward the lower
    token index; the class token (position 0) is always retained on top.
    """
    keep_prob = np.asarray(keep_prob, dtype=np.float64)
    prev_mask = np.asarray(prev_mask, dtype=bool)
    n = keep_prob.shape[0]
    if prev_mask.shape != (n + 1,):
        raise ContractError(
            f"prev_mask length {prev_mask.shape[0]} != patch count {n} + class token"
        )
    if not prev_mask[0]:
        raise ContractError("prev_mask must retain the class token")
    if target_count < 1:
        raise ContractError(f"target_count must be >= 1, got {target_count}")
    candidates = np.flatnonzero(prev_mask[1:])
    if target_count > candidates.size:
        raise ContractError(
            f"target_count {target_count} exceeds {candidates.size} eligible tokens"
        )
    order = candidates[np.argsort(-keep_prob[candidates], kind="stable")]
    mask = np.zeros(n + 1, dtype=bool)
    mask[0] = True
    mask[1 + order[:target_count]] = True
    return mask


def compose_hierarchy(masks: list[np.ndarray]) -> RetentionState:
    """Validate stage masks: monotone shrinkage, class token always kept."""
    if len(masks) < 1:
        raise ContractError("hierarchy needs at least one stage mask")
    masks = [np.asarray(m, dtype=bool) for m in masks]
    length = masks[0].shape[0]
    n_patches = length - 1
    for k, m in enumerate(masks, start=1):
        if m.shape != (length,):
            raise ContractError(f"stage {k} mask length {m.shape[0]} != {length}")
        if not m[0]:
            raise HierarchyError(f"stage {k} drops the class token")
    for k in range(1, len(masks)):
        revived = np.flatnonzero(masks[k] & ~masks[k - 1])
        if revived.size:
            raise HierarchyError(
                f"stage {k + 1} retains token {int(revived[0])} "
                f"already pruned at stage {k}"
            )
    return RetentionState(
        masks=masks,
        target_rates=[],
        empirical_rates=[float(m[1:].sum()) / n_patches for m in masks],
        kept_indices=[np.flatnonzero(m) for m in masks],
    )


@dataclass
class GumbelSettings:
    """Sampling temperature, straight-through flag, and the anneal schedule."""

    tau_initial: float = 5.0
    tau_final: float = 0.1
    epochs: int = 1
    hard: bool = True

    def __post_init__(self):
        if self.tau_initial <= 0 or self.tau_final <= 0:
            raise ConfigError("gumbel temperatures must stay positive")

    def tau_at(self, epoch: int) -> float:
        """Exponential decay from tau_initial to tau_final across epochs."""
        if self.epochs <= 1:
            return self.tau_final
        frac = min(max(epoch / (self.epochs - 1), 0.0), 1.0)
        return self.tau_initial * (self.tau_final / self.tau_initial) ** frac
