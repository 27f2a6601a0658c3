"""Analytical compute model, counting one multiply-accumulate as one unit.

Per transformer layer with N live tokens: 4*N*d^2 for the QKV/output
projections plus 2*N^2*d for the score and value products, and
2*N*d*(ratio*d) for the MLP. Softmax, norms, and activations are ignored
(sub-percent at these scales). Tokens removed at a stage layer stop costing
from that layer on. Relevance-predictor overhead counts the remap projection
and the scoring MLP at each stage's live token count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ConfigError
from .predictor import PredictorConfig
from .vit import ViTConfig


@dataclass
class LayerCost:
    layer: int
    token_count: int
    attention_cost: float
    mlp_cost: float

    @property
    def total(self) -> float:
        return self.attention_cost + self.mlp_cost


@dataclass
class StageCost:
    stage: int
    token_count: int
    cost: float


@dataclass
class FlopReport:
    layers: list[LayerCost] = field(default_factory=list)
    embed_cost: float = 0.0
    head_cost: float = 0.0
    predictor_costs: list[StageCost] = field(default_factory=list)

    @property
    def total(self) -> float:
        return (
            self.embed_cost
            + self.head_cost
            + sum(l.total for l in self.layers)
            + sum(s.cost for s in self.predictor_costs)
        )

    @property
    def giga(self) -> float:
        return self.total / 1e9

    def text_table(self) -> str:
        lines = [f"{'layer':>6} {'tokens':>7} {'attention':>14} {'mlp':>14}"]
        for l in self.layers:
            lines.append(
                f"{l.layer:>6} {l.token_count:>7} {l.attention_cost:>14.0f} {l.mlp_cost:>14.0f}"
            )
        lines.append(f"embed: {self.embed_cost:.0f}")
        lines.append(f"classifier head: {self.head_cost:.0f}")
        for s in self.predictor_costs:
            lines.append(f"predictor stage {s.stage} ({s.token_count} tokens): {s.cost:.0f}")
        lines.append(f"total: {self.total:.0f} ({self.giga:.4f} GFLOPS)")
        return "\n".join(lines)

    def csv_rows(self) -> list[str]:
        rows = ["kind,index,token_count,cost"]
        rows.append(f"embed,,,{self.embed_cost:.0f}")
        for l in self.layers:
            rows.append(f"layer,{l.layer},{l.token_count},{l.total:.0f}")
        for s in self.predictor_costs:
            rows.append(f"predictor,{s.stage},{s.token_count},{s.cost:.0f}")
        rows.append(f"head,,,{self.head_cost:.0f}")
        rows.append(f"total,,,{self.total:.0f}")
        return rows


def attention_cost(n_tokens: int, embed_dim: int, heads: int) -> float:
    """Projections (4*N*d^2) plus score/value products (2*N^2*d)."""
    if embed_dim % heads != 0:
        raise ConfigError(f"embed_dim {embed_dim} not divisible by heads {heads}")
    n, d = n_tokens, embed_dim
    return 4.0 * n * d * d + 2.0 * n * n * d


def mlp_cost(n_tokens: int, embed_dim: int, mlp_ratio: float) -> float:
    return 2.0 * n_tokens * embed_dim * (mlp_ratio * embed_dim)


def predictor_cost(
    token_counts, feature_dim: int, d_remap: int, embed_dim: int
) -> float:
    """Remap projection plus scoring MLP, summed over stages at their counts."""
    if isinstance(token_counts, int):
        token_counts = [token_counts]
    e = feature_dim
    h1, h2 = e // 2, e // 4
    per_token = embed_dim * d_remap + e * h1 + h1 * h2 + h2 * 2
    return float(sum(token_counts)) * per_token


def embed_cost(cfg: ViTConfig) -> float:
    patch_in = cfg.patch_size * cfg.patch_size * cfg.in_channels
    return float(cfg.n_patches) * patch_in * cfg.embed_dim


def head_cost(cfg: ViTConfig) -> float:
    return float(cfg.embed_dim) * cfg.num_classes


def retention_token_counts(
    cfg: ViTConfig, rho: float, stage_layers: list[int]
) -> list[int]:
    """Live tokens (incl class) per layer; pruning applies at the stage layer."""
    n0 = cfg.n_patches
    counts = [math.ceil(rho**k * n0) for k in range(1, len(stage_layers) + 1)]
    out = []
    fired = 0
    for layer in range(1, cfg.depth + 1):
        while fired < len(stage_layers) and layer >= stage_layers[fired]:
            fired += 1
        out.append((counts[fired - 1] if fired else n0) + 1)
    return out


def stage_patch_counts(cfg: ViTConfig, rho: float, stages: int) -> list[int]:
    """Patch tokens alive when each stage's predictor runs."""
    n0 = cfg.n_patches
    counts = [math.ceil(rho**k * n0) for k in range(1, stages + 1)]
    return ([n0] + counts[:-1]) if stages else []


def model_cost(
    cfg: ViTConfig,
    layer_token_counts: list[int],
    predictor_stages: list[tuple[int, int, int]] | None = None,
) -> FlopReport:
    """Full roll-up from a per-layer token plan.

    predictor_stages holds (live patch tokens, feature width, d_remap) per
    stage; pass None for a dense model.
    """
    if len(layer_token_counts) != cfg.depth:
        raise ConfigError(
            f"need {cfg.depth} per-layer token counts, got {len(layer_token_counts)}"
        )
    report = FlopReport(embed_cost=embed_cost(cfg), head_cost=head_cost(cfg))
    for i, n in enumerate(layer_token_counts, start=1):
        report.layers.append(
            LayerCost(
                layer=i,
                token_count=n,
                attention_cost=attention_cost(n, cfg.embed_dim, cfg.heads),
                mlp_cost=mlp_cost(n, cfg.embed_dim, cfg.mlp_ratio),
            )
        )
    for k, (n, e, d_remap) in enumerate(predictor_stages or [], start=1):
        report.predictor_costs.append(
            StageCost(stage=k, token_count=n, cost=predictor_cost(n, e, d_remap, cfg.embed_dim))
        )
    return report


def dense_report(cfg: ViTConfig) -> FlopReport:
    return model_cost(cfg, [cfg.n_patches + 1] * cfg.depth)


def sparsified_report(
    cfg: ViTConfig, rho: float, stage_layers: list[int], pcfg: PredictorConfig
) -> FlopReport:
    e = pcfg.feature_dim(cfg.heads)
    stages = [
        (n, e, pcfg.d_remap)
        for n in stage_patch_counts(cfg, rho, len(stage_layers))
    ]
    return model_cost(cfg, retention_token_counts(cfg, rho, stage_layers), stages)
