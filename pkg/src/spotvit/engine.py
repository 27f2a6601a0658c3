"""Stage placement and the sparsified forward pass.

At the entry of each stage layer the engine summarizes every attention map
computed so far (newest map, cross-layer mean, cross-layer variance, one
accumulator per head), scores patch tokens, and derives a keep mask:
Gumbel-sampled and applied additively in training so batch shapes stay
rectangular, exact top-k with physical token removal in inference. Pruning
takes effect at the stage layer itself; its cheaper attention is where the
compute savings come from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .predictor import (
    PredictorConfig,
    RelevancePredictor,
    RetentionState,
    compose_hierarchy,
    gumbel_mask,
    topk_select,
)
from .stats import CrossLayerAccumulator, StatsDescriptor, assemble_features, fused_descriptor
from .tensor import Tensor
from .vit import TokenSequence, VisionTransformer, physical_prune

MODES = ("training", "inference")


@dataclass
class SparsifyConfig:
    rho: float
    stage_layers: list[int] = field(default_factory=list)
    mode: str = "inference"

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError(f"rho must lie in (0, 1], got {self.rho}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got '{self.mode}'")
        layers = list(self.stage_layers)
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise ConfigError(f"stage_layers must be strictly increasing: {layers}")
        if layers and layers[0] < 2:
            raise ConfigError(
                "stage decisions need at least one computed attention map; "
                f"earliest allowed layer is 2, got {layers[0]}"
            )
        self.stage_layers = layers

    @property
    def stages(self) -> int:
        return len(self.stage_layers)


def quarter_mark_layers(depth: int, stages: int) -> list[int]:
    """Stage layer after each quarter mark: floor(k * depth / 4) + 1."""
    if depth < 4 or stages > 3:
        raise ConfigError(
            f"quarter-mark placement needs depth >= 4 and at most 3 stages "
            f"(got depth {depth}, stages {stages})"
        )
    return [(k * depth) // 4 + 1 for k in range(1, stages + 1)]


def target_counts(n_patches: int, rho: float, stages: int) -> list[int]:
    """Kept patch tokens after each stage: ceil(rho^k * N0), nonincreasing."""
    if n_patches < 1:
        raise ConfigError(f"need at least one patch token, got {n_patches}")
    if not 0.0 < rho <= 1.0:
        raise ConfigError(f"rho must lie in (0, 1], got {rho}")
    return [math.ceil(rho**k * n_patches) for k in range(1, stages + 1)]


@dataclass
class EngineResult:
    logits: Tensor
    retention: RetentionState
    layer_token_counts: list[int]  # live tokens (incl class) at each layer
    stage_token_counts: list[int]  # live patch tokens seen by each stage
    final_tokens: TokenSequence
    final_normed: Tensor
    rate_tensors: list[Tensor]  # differentiable empirical rates (training)
    mask_tensors: list[Tensor]  # per-stage keep values over all N0 patches


def make_predictors(
    embed_dim: int, heads: int, pcfg: PredictorConfig, stages: int, seed: int = 0
) -> list[RelevancePredictor]:
    """One predictor per stage, or a single shared one."""
    count = 1 if (pcfg.shared_across_stages and stages > 0) else stages
    return [
        RelevancePredictor(embed_dim, heads, pcfg, seed=seed + k) for k in range(count)
    ]


class SparsifyEngine:
    """Drives a backbone layer by layer, invoking predictors at stage layers."""

    def __init__(
        self,
        backbone: VisionTransformer,
        predictors: list[RelevancePredictor],
        scfg: SparsifyConfig,
        pcfg: PredictorConfig,
    ):
        depth = backbone.cfg.depth
        for layer in scfg.stage_layers:
            if not 1 <= layer <= depth:
                raise ConfigError(f"stage layer {layer} outside model depth {depth}")
        expected = 1 if (pcfg.shared_across_stages and scfg.stages > 0) else scfg.stages
        if len(predictors) != expected:
            raise ConfigError(
                f"engine needs {expected} predictor(s) for this configuration, "
                f"got {len(predictors)}"
            )
        self.backbone = backbone
        self.predictors = predictors
        self.scfg = scfg
        self.pcfg = pcfg

    def predictor_for_stage(self, k: int) -> RelevancePredictor:
        return self.predictors[0] if self.pcfg.shared_across_stages else self.predictors[k]

    # -- descriptor construction ----------------------------------------------

    def _stage_features(
        self,
        seq: TokenSequence,
        last_maps: list[Tensor],
        accs: list[CrossLayerAccumulator],
        weights: np.ndarray | None,
        retained_patches: np.ndarray,
        pred: RelevancePredictor,
    ) -> Tensor:
        pcfg = self.pcfg

        def descs(matrices: list[Tensor]) -> list[StatsDescriptor]:
            return [
                fused_descriptor(m, weights, use_std=pcfg.use_std) for m in matrices
            ]

        current = descs(last_maps) if pcfg.include_current else None
        cross_mean = descs([a.mean for a in accs]) if pcfg.include_layer_mean else None
        cross_var = (
            descs([a.variance() for a in accs]) if pcfg.include_layer_var else None
        )
        patch_tokens = T.take_rows(seq.tokens, np.arange(1, seq.length))
        z_local, z_global = pred.remap_tokens(patch_tokens, retained_patches)
        return assemble_features(
            z_global,
            z_local,
            current,
            cross_mean,
            cross_var,
            per_head=pcfg.per_head,
            with_mean_cols=pcfg.include_mean_stats,
            with_var_cols=pcfg.include_var_stats,
        )

    # -- forward ---------------------------------------------------------------

    def run(
        self,
        image: np.ndarray,
        *,
        mode: str | None = None,
        tau: float = 1.0,
        hard: bool = True,
        rng: np.random.Generator | None = None,
        forced_masks: list[np.ndarray] | None = None,
    ) -> EngineResult:
        mode = mode or self.scfg.mode
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got '{mode}'")
        training = mode == "training"
        if training and self.scfg.stages > 0 and rng is None and forced_masks is None:
            raise ContractError("training mode needs an rng (or forced masks)")

        cfg = self.backbone.cfg
        n0 = cfg.n_patches
        full = n0 + 1
        counts = target_counts(n0, self.scfg.rho, self.scfg.stages)
        seq = self.backbone.patchify_embed(image)
        accs = [CrossLayerAccumulator(full) for _ in range(cfg.heads)]
        last_maps: list[Tensor] | None = None

        mask_bool = np.ones(full, dtype=bool)  # live tokens, original space
        prev_keep = Tensor(np.ones(n0))  # hierarchy chain over patch tokens
        mask_active = False

        stage_idx = 0
        layer_counts: list[int] = []
        stage_counts: list[int] = []
        stage_masks: list[np.ndarray] = []
        rate_tensors: list[Tensor] = []
        mask_tensors: list[Tensor] = []

        for layer in range(1, cfg.depth + 1):
            if stage_idx < self.scfg.stages and layer == self.scfg.stage_layers[stage_idx]:
                if last_maps is None:
                    raise ConfigError(f"stage at layer {layer} precedes any attention map")
                k = stage_idx
                pred = self.predictor_for_stage(k)
                if training:
                    weights = mask_bool[1:].astype(np.float64)
                    retained = mask_bool[1:]
                else:
                    weights = None
                    retained = np.ones(seq.length - 1, dtype=bool)
                stage_counts.append(int(retained.sum()) if training else seq.length - 1)

                if training:
                    if forced_masks is not None:
                        forced = np.asarray(forced_masks[k], dtype=bool)
                        keep_vals = T.mul(
                            Tensor(forced[1:].astype(np.float64)), prev_keep
                        )
                    elif self.scfg.rho >= 1.0:
                        # keep-everything target: no sampling, exactly neutral
                        keep_vals = prev_keep
                    else:
                        features = self._stage_features(
                            seq, last_maps, accs, weights, retained, pred
                        )
                        logits2 = pred.score_logits(features)
                        sampled = gumbel_mask(logits2, tau, hard, rng)
                        keep_vals = T.mul(sampled, prev_keep)
                    rate_tensors.append(T.mul(T.sum_(keep_vals), 1.0 / n0))
                    mask_tensors.append(keep_vals)
                    new_mask = np.concatenate(([True], keep_vals.data > 0.5))
                    stage_masks.append(new_mask)
                    if not new_mask.all():
                        for acc in accs:
                            acc.mask_out(new_mask.astype(np.float64))
                        mask_active = True
                    mask_bool = new_mask
                    prev_keep = keep_vals
                else:
                    features = self._stage_features(
                        seq, last_maps, accs, weights, retained, pred
                    )
                    keep_prob = pred.score(features).data
                    local_prev = np.ones(seq.length, dtype=bool)
                    local_mask = topk_select(keep_prob, counts[k], local_prev)
                    original = np.zeros(full, dtype=bool)
                    original[seq.source_index[local_mask]] = True
                    stage_masks.append(original)
                    seq = physical_prune(seq, local_mask)
                    kept_local = np.flatnonzero(local_mask)
                    for acc in accs:
                        acc.shrink(kept_local)
                stage_idx += 1

            if training and mask_active:
                if hard or forced_masks is not None:
                    col_mask: np.ndarray | Tensor | None = mask_bool
                else:
                    col_mask = T.concat([Tensor(np.ones(1)), prev_keep], axis=0)
            else:
                col_mask = None
            seq, head_maps = self.backbone.attention_block(seq, col_mask, layer - 1)
            seq.retained = mask_bool.copy() if training else seq.retained
            layer_counts.append(int(mask_bool.sum()) if training else seq.length)

            if training and mask_active:
                # zero dead rows as well, so statistics match the pruned path
                zero = Tensor(np.outer(mask_bool, mask_bool).astype(np.float64))
                stats_maps = [T.mul(m.values, zero) for m in head_maps]
            else:
                stats_maps = [m.values for m in head_maps]
            for acc, m in zip(accs, stats_maps):
                acc.update(m)
            last_maps = stats_maps

        logits = self.backbone.classify(seq)
        normed = self.backbone.final_norm(seq)

        if stage_masks:
            retention = compose_hierarchy(stage_masks)
            retention.target_rates = [
                self.scfg.rho**k for k in range(1, self.scfg.stages + 1)
            ]
        else:
            retention = RetentionState()
        return EngineResult(
            logits=logits,
            retention=retention,
            layer_token_counts=layer_counts,
            stage_token_counts=stage_counts,
            final_tokens=seq,
            final_normed=normed,
            rate_tensors=rate_tensors,
            mask_tensors=mask_tensors,
        )
