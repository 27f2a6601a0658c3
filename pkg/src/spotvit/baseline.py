"""Non-learnable pruning baseline and the layer-averaging variance check.

The heuristic scores each patch token by the class-token attention it has
received, averaged over every head and every layer seen so far, and keeps
the top scorers through exactly the same selection routine the learned
predictor uses. A Monte-Carlo helper measures how averaging across L layers
shrinks the variance of a noisy per-token relevance estimate.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .engine import SparsifyConfig, target_counts
from .errors import ContractError
from .predictor import RetentionState, compose_hierarchy, topk_select
from .vit import VisionTransformer, physical_prune


class HeuristicState:
    """Running sum of class-out attention per retained patch token."""

    def __init__(self, n_patches: int):
        self.score_sum = np.zeros(n_patches)
        self.contributions = 0

    def update(self, head_maps) -> None:
        """Add one layer: cls-out row of every head."""
        for m in head_maps:
            values = m.values.data if hasattr(m, "values") else np.asarray(m)
            cls_out = values[0, 1:]
            if cls_out.shape != self.score_sum.shape:
                raise ContractError(
                    f"cls_out length {cls_out.shape} != state {self.score_sum.shape}"
                )
            self.score_sum = self.score_sum + cls_out
            self.contributions += 1

    def scores(self) -> np.ndarray:
        if self.contributions == 0:
            raise ContractError("heuristic state holds no layers yet")
        return self.score_sum / self.contributions

    def shrink(self, kept_patch_positions) -> None:
        self.score_sum = self.score_sum[np.asarray(kept_patch_positions, dtype=np.intp)]


def heuristic_score(layer_head_maps) -> np.ndarray:
    """Mean cls-out attention over all heads and layers of a map stack."""
    if not layer_head_maps:
        raise ContractError("heuristic_score needs at least one layer of maps")
    first = layer_head_maps[0][0]
    size = (first.values.data if hasattr(first, "values") else np.asarray(first)).shape[0]
    state = HeuristicState(size - 1)
    for head_maps in layer_head_maps:
        state.update(head_maps)
    return state.scores()


def heuristic_prune(
    scores: np.ndarray, target_count: int, prev_mask: np.ndarray
) -> np.ndarray:
    """Identical selection semantics to the learned path (shared top-k)."""
    return topk_select(scores, target_count, prev_mask)


def run_heuristic(
    backbone: VisionTransformer, scfg: SparsifyConfig, image: np.ndarray
) -> tuple[np.ndarray, RetentionState]:
    """Inference pass pruning by averaged class attention at each stage."""
    cfg = backbone.cfg
    n0 = cfg.n_patches
    counts = target_counts(n0, scfg.rho, scfg.stages)
    with T.no_grad():
        seq = backbone.patchify_embed(image)
        state = HeuristicState(n0)
        stage_idx = 0
        masks = []
        for layer in range(1, cfg.depth + 1):
            if stage_idx < scfg.stages and layer == scfg.stage_layers[stage_idx]:
                local_mask = heuristic_prune(
                    state.scores(),
                    counts[stage_idx],
                    np.ones(seq.length, dtype=bool),
                )
                original = np.zeros(n0 + 1, dtype=bool)
                original[seq.source_index[local_mask]] = True
                masks.append(original)
                seq = physical_prune(seq, local_mask)
                state.shrink(np.flatnonzero(local_mask[1:]))
                stage_idx += 1
            seq, head_maps = backbone.attention_block(seq, None, layer - 1)
            state.update(head_maps)
        logits = backbone.classify(seq)
    retention = compose_hierarchy(masks) if masks else RetentionState()
    retention.target_rates = [scfg.rho**k for k in range(1, scfg.stages + 1)]
    return logits.data, retention


def jaccard_overlap(a: RetentionState, b: RetentionState) -> list[float]:
    """Per-stage overlap of kept patch-token sets."""
    if a.stages != b.stages:
        raise ContractError(f"stage counts differ: {a.stages} vs {b.stages}")
    out = []
    for ma, mb in zip(a.masks, b.masks):
        sa = set(np.flatnonzero(ma[1:]).tolist())
        sb = set(np.flatnonzero(mb[1:]).tolist())
        union = sa | sb
        out.append(len(sa & sb) / len(union) if union else 1.0)
    return out


def variance_reduction_trial(
    sigma_eps: float, layers: int, trials: int, rng: np.random.Generator
) -> float:
    """Sample variance of an L-layer-averaged noisy relevance estimate.

    Per trial, each layer observes the true relevance plus independent
    Gaussian noise; the estimator averages across layers.
    """
    if layers < 1:
        raise ContractError(f"need at least one layer, got {layers}")
    if trials < 1000:
        raise ContractError(f"need at least 1000 trials for a stable estimate, got {trials}")
    true_relevance = rng.normal()
    observed = true_relevance + rng.normal(0.0, sigma_eps, size=(trials, layers))
    estimates = observed.mean(axis=1)
    return float(estimates.var(ddof=1))
