"""Run configuration: defaults, key=value config files, and CLI overrides.

Files hold one `key = value` per line, '#' starts a comment, later settings
win (defaults < file < overrides). Unknown keys and malformed lines are
rejected with their line number. The resolved configuration can be echoed
next to run outputs so every experiment is reproducible from its directory.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .data import SyntheticDatasetSpec
from .engine import SparsifyConfig, quarter_mark_layers
from .errors import ConfigParseError
from .losses import LossWeights
from .predictor import GumbelSettings, PredictorConfig
from .trainer import TrainConfig
from .vit import ViTConfig


@dataclass
class RunConfig:
    # model
    depth: int = 8
    embed_dim: int = 64
    heads: int = 4
    patch_size: int = 8
    image_size: int = 64
    mlp_ratio: float = 4.0
    num_classes: int = 4
    in_channels: int = 1
    # sparsification
    rho: float = 0.7
    stages: str = "auto"  # quarter-mark placement, or e.g. "4,7,10"
    mode: str = "inference"
    # predictor inputs
    d_remap: int = -1  # -1: match embed_dim
    per_head: bool = True
    include_A: bool = True
    include_M: bool = True
    include_Sigma: bool = True
    include_mu: bool = True
    include_sigma: bool = True
    shared_across_stages: bool = False
    sigma_as_std: bool = False
    # training
    backbone_lr: float = 1e-3
    predictor_lr: float = 1e-2
    pretrain_epochs: int = 12
    epochs: int = 8
    batch_size: int = 32
    weight_decay: float = 0.01
    lambda1: float = 2.0
    lambda2: float = 0.5
    lambda3: float = 0.0
    tau_initial: float = 5.0
    tau_final: float = 0.1
    gumbel_hard: bool = True
    # data
    samples: int = 256
    eval_samples: int = 128
    generator: str = "shapes"
    noise: float = 0.25
    # misc
    seed: int = 0
    checkpoint: str = ""
    visualize_index: int = 0
    shade_levels: str = "0.25,0.5,0.75"
    report_csv: bool = False
    compare_samples: int = 16
    ablate_epochs: int = 1

    # -- derived component configs ------------------------------------------

    def vit_config(self) -> ViTConfig:
        return ViTConfig(
            depth=self.depth,
            embed_dim=self.embed_dim,
            heads=self.heads,
            patch_size=self.patch_size,
            image_size=self.image_size,
            mlp_ratio=self.mlp_ratio,
            num_classes=self.num_classes,
            in_channels=self.in_channels,
        )

    def stage_list(self) -> list[int]:
        if self.stages == "auto":
            return quarter_mark_layers(self.depth, 3)
        if not self.stages:
            return []
        return [int(tok) for tok in self.stages.split(",") if tok.strip()]

    def sparsify_config(self, mode: str | None = None) -> SparsifyConfig:
        return SparsifyConfig(
            rho=self.rho, stage_layers=self.stage_list(), mode=mode or self.mode
        )

    def predictor_config(self) -> PredictorConfig:
        return PredictorConfig(
            d_remap=self.embed_dim if self.d_remap < 0 else self.d_remap,
            per_head=self.per_head,
            include_current=self.include_A,
            include_layer_mean=self.include_M,
            include_layer_var=self.include_Sigma,
            include_mean_stats=self.include_mu,
            include_var_stats=self.include_sigma,
            shared_across_stages=self.shared_across_stages,
            use_std=self.sigma_as_std,
        )

    def train_config(self, epochs: int | None = None) -> TrainConfig:
        n_epochs = self.epochs if epochs is None else epochs
        return TrainConfig(
            backbone_lr=self.backbone_lr,
            predictor_lr=self.predictor_lr,
            epochs=n_epochs,
            batch_size=self.batch_size,
            weight_decay=self.weight_decay,
            seed=self.seed,
            weights=LossWeights(rate=self.lambda1, pred=self.lambda2, token=self.lambda3),
            gumbel=GumbelSettings(
                tau_initial=self.tau_initial,
                tau_final=self.tau_final,
                epochs=n_epochs,
                hard=self.gumbel_hard,
            ),
        )

    def dataset_spec(self, split: str = "train") -> SyntheticDatasetSpec:
        train = split == "train"
        return SyntheticDatasetSpec(
            image_size=self.image_size,
            classes=self.num_classes,
            samples=self.samples if train else self.eval_samples,
            generator=self.generator,
            noise=self.noise,
            seed=self.seed if train else self.seed + 1,
        )

    def shade_list(self) -> list[float]:
        return [float(tok) for tok in self.shade_levels.split(",") if tok.strip()]


_FIELDS = {f.name: f.type for f in fields(RunConfig)}
_BOOL_TRUE = {"true", "1", "yes", "on"}
_BOOL_FALSE = {"false", "0", "no", "off"}


def _coerce(key: str, raw: str, line: int | None):
    kind = _FIELDS[key]
    raw = raw.strip()
    try:
        if kind == "bool" or kind is bool:
            low = raw.lower()
            if low in _BOOL_TRUE:
                return True
            if low in _BOOL_FALSE:
                return False
            raise ValueError(f"not a boolean: '{raw}'")
        if kind == "int" or kind is int:
            return int(raw)
        if kind == "float" or kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigParseError(f"bad value for '{key}': {exc}", line) from None


def _apply(cfg: RunConfig, key: str, raw: str, line: int | None) -> None:
    if key not in _FIELDS:
        raise ConfigParseError(f"unknown key '{key}'", line)
    setattr(cfg, key, _coerce(key, raw, line))


def parse_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults, then the file, then `key=value` overrides; later wins."""
    cfg = RunConfig()
    if path is not None:
        text = Path(path).read_text()
        for lineno, rawline in enumerate(text.splitlines(), start=1):
            line = rawline.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigParseError(f"expected key=value, got '{rawline.strip()}'", lineno)
            key, value = line.split("=", 1)
            _apply(cfg, key.strip(), value, lineno)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigParseError(f"override must be key=value, got '{item}'")
        key, value = item.split("=", 1)
        _apply(cfg, key.strip(), value, None)
    return cfg


def resolved_text(cfg: RunConfig) -> str:
    """Deterministic echo of the full configuration, one key per line."""
    lines = [f"{f.name}={getattr(cfg, f.name)}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"
