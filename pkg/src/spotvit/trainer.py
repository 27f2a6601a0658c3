"""Desk-scale training loops.

Protocol: train a dense model on the synthetic set, clone it as a frozen
teacher, then fine-tune backbone and relevance predictors jointly (separate
learning rates, annealed Gumbel temperature) against the four-term
objective. Everything is seeded and single-threaded, so logs, checkpoints,
and evaluations are reproducible byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import flops as F
from . import losses as L
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .engine import EngineResult, SparsifyEngine
from .errors import ContractError, NumericsError
from .predictor import GumbelSettings
from .tensor import Tensor
from .vit import VisionTransformer, ViTConfig


@dataclass
class TrainConfig:
    backbone_lr: float = 1e-3
    predictor_lr: float = 1e-2  # 10x the backbone rate by default
    epochs: int = 10
    batch_size: int = 32
    weight_decay: float = 0.01
    seed: int = 0
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    gumbel: GumbelSettings = field(default_factory=GumbelSettings)


class AdamW:
    """Adaptive moments with decoupled weight decay (betas 0.9/0.999, eps 1e-8)."""

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, groups: list[tuple[dict[str, Tensor], float]], weight_decay: float = 0.0):
        self.groups = groups
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m: dict[tuple[int, str], np.ndarray] = {}
        self._v: dict[tuple[int, str], np.ndarray] = {}

    def zero_grad(self) -> None:
        for params, _ in self.groups:
            for t in params.values():
                t.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.BETA1**t
        bias2 = 1.0 - self.BETA2**t
        for gi, (params, lr) in enumerate(self.groups):
            for name, p in params.items():
                if p.grad is None:
                    continue
                g = p.grad
                if not np.isfinite(g).all():
                    raise NumericsError(f"NaN/Inf gradient in parameter '{name}'")
                key = (gi, name)
                if key not in self._m:
                    self._m[key] = np.zeros_like(p.data)
                    self._v[key] = np.zeros_like(p.data)
                if self.weight_decay:
                    p.data *= 1.0 - lr * self.weight_decay
                m = self._m[key] = self.BETA1 * self._m[key] + (1 - self.BETA1) * g
                v = self._v[key] = self.BETA2 * self._v[key] + (1 - self.BETA2) * g * g
                p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.EPS)


# -- teacher ---------------------------------------------------------------------


def make_teacher(cfg: ViTConfig, checkpoint) -> VisionTransformer:
    """Frozen dense model loaded from a checkpoint path or array dict."""
    arrays = checkpoint if isinstance(checkpoint, dict) else load_checkpoint(checkpoint)
    # accept combined checkpoints that carry a backbone prefix
    prefix = "backbone." if any(k.startswith("backbone.") for k in arrays) else ""
    teacher = VisionTransformer(cfg, seed=0)
    teacher.load_state(arrays, prefix=prefix)
    teacher.freeze()
    return teacher


def teacher_signals(teacher: VisionTransformer, image: np.ndarray):
    """Class distribution and final-norm token embeddings, gradient-free."""
    with T.no_grad():
        logits, _, seq = teacher.forward(image)
        probs = L.softmax_probs(logits).data
        tokens = teacher.final_norm(seq).data
    return probs, tokens


# -- checkpoint plumbing for backbone + predictors --------------------------------


def model_state(engine: SparsifyEngine) -> dict[str, np.ndarray]:
    state = {f"backbone.{k}": v.data.copy() for k, v in engine.backbone.params.items()}
    for i, pred in enumerate(engine.predictors, start=1):
        state.update({f"predictor.{i}.{k}": v.data.copy() for k, v in pred.params.items()})
    return state


def load_model(engine: SparsifyEngine, arrays: dict[str, np.ndarray]) -> None:
    engine.backbone.load_state(arrays, prefix="backbone.")
    for i, pred in enumerate(engine.predictors, start=1):
        pred.load_state(arrays, prefix=f"predictor.{i}.")


# -- training loops ----------------------------------------------------------------


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo : lo + batch_size]


def train_dense(
    backbone: VisionTransformer,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
) -> list[dict]:
    """Cross-entropy training of the dense backbone (the future teacher)."""
    opt = AdamW([(backbone.params, cfg.backbone_lr)], cfg.weight_decay)
    rows = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng((cfg.seed, epoch))
        loss_sum = 0.0
        hit = 0
        for batch in _batches(len(images), cfg.batch_size, rng):
            opt.zero_grad()
            per = []
            for i in batch:
                logits, _, _ = backbone.forward(images[i])
                per.append(L.task_loss(logits, int(labels[i])))
                hit += int(np.argmax(logits.data) == labels[i])
            loss = per[0]
            for p in per[1:]:
                loss = T.add(loss, p)
            loss = T.mul(loss, 1.0 / len(per))
            if not np.isfinite(loss.data).all():
                raise NumericsError(f"dense training diverged at epoch {epoch}")
            T.backward(loss)
            opt.step()
            loss_sum += loss.item() * len(batch)
        rows.append(
            {
                "epoch": epoch,
                "loss_cls": loss_sum / len(images),
                "accuracy": hit / len(images),
            }
        )
    return rows


def finetune(
    engine: SparsifyEngine,
    teacher: VisionTransformer,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
) -> list[dict]:
    """Joint backbone/predictor fine-tuning against the frozen teacher."""
    groups: list[tuple[dict[str, Tensor], float]] = [
        (engine.backbone.params, cfg.backbone_lr)
    ]
    for pred in engine.predictors:
        groups.append((pred.params, cfg.predictor_lr))
    opt = AdamW(groups, cfg.weight_decay)
    stages = engine.scfg.stages
    targets = [engine.scfg.rho**k for k in range(1, stages + 1)]

    # the teacher is frozen and the dataset fixed: capture its signals once
    cached = [teacher_signals(teacher, img) for img in images]

    rows = []
    last_good = model_state(engine)
    for epoch in range(cfg.epochs):
        tau = cfg.gumbel.tau_at(epoch)
        shuffle_rng = np.random.default_rng((cfg.seed, epoch, 1))
        gumbel_rng = np.random.default_rng((cfg.seed, epoch, 2))
        sums = {"total": 0.0, "cls": 0.0, "rate": 0.0, "pred": 0.0, "token": 0.0}
        rho_hat_sums = np.zeros(stages)
        hit = 0
        for batch in _batches(len(images), cfg.batch_size, shuffle_rng):
            opt.zero_grad()
            batch_terms = []
            for i in batch:
                t_probs, t_tokens = cached[i]
                res: EngineResult = engine.run(
                    images[i],
                    mode="training",
                    tau=tau,
                    hard=cfg.gumbel.hard,
                    rng=gumbel_rng,
                )
                cls = L.task_loss(res.logits, int(labels[i]))
                rate = (
                    L.rate_loss([res.rate_tensors], targets)
                    if stages
                    else Tensor(np.zeros(()))
                )
                pred = L.pred_similarity(t_probs, L.softmax_probs(res.logits))
                retained = (
                    res.retention.masks[-1]
                    if stages
                    else np.ones(res.final_tokens.length, dtype=bool)
                )
                token = L.token_similarity(t_tokens, res.final_normed, retained)
                total = L.total(cls, rate, pred, token, cfg.weights)
                batch_terms.append(total)
                sums["cls"] += cls.item()
                sums["rate"] += rate.item()
                sums["pred"] += pred.item()
                sums["token"] += token.item()
                sums["total"] += total.item()
                for k, rt in enumerate(res.rate_tensors):
                    rho_hat_sums[k] += rt.item()
                hit += int(np.argmax(res.logits.data) == labels[i])
            loss = batch_terms[0]
            for p in batch_terms[1:]:
                loss = T.add(loss, p)
            loss = T.mul(loss, 1.0 / len(batch_terms))
            if not np.isfinite(loss.data).all():
                if out_dir is not None:
                    save_checkpoint(Path(out_dir) / "last_good.ckpt", last_good)
                raise NumericsError(
                    f"fine-tuning diverged at epoch {epoch}; last good state saved"
                )
            T.backward(loss)
            opt.step()
        n = len(images)
        row = {
            "epoch": epoch,
            "tau": tau,
            "loss_total": sums["total"] / n,
            "loss_cls": sums["cls"] / n,
            "loss_rate": sums["rate"] / n,
            "loss_pred": sums["pred"] / n,
            "loss_token": sums["token"] / n,
            "accuracy": hit / n,
        }
        for k in range(stages):
            row[f"rho_hat_{k + 1}"] = rho_hat_sums[k] / n
        rows.append(row)
        last_good = model_state(engine)
    return rows


# -- evaluation ---------------------------------------------------------------------


def evaluate(
    engine: SparsifyEngine, images: np.ndarray, labels: np.ndarray
) -> tuple[float, F.FlopReport]:
    """Top-1 accuracy under inference-mode pruning, plus the compute report."""
    hit = 0
    with T.no_grad():
        for img, label in zip(images, labels):
            res = engine.run(img, mode="inference")
            hit += int(np.argmax(res.logits.data) == label)
    cfg = engine.backbone.cfg
    if engine.scfg.stages:
        report = F.sparsified_report(
            cfg, engine.scfg.rho, engine.scfg.stage_layers, engine.pcfg
        )
    else:
        report = F.dense_report(cfg)
    return hit / len(images), report


def evaluate_dense(
    backbone: VisionTransformer, images: np.ndarray, labels: np.ndarray
) -> tuple[float, F.FlopReport]:
    hit = 0
    with T.no_grad():
        for img, label in zip(images, labels):
            logits, _, _ = backbone.forward(img)
            hit += int(np.argmax(logits.data) == label)
    return hit / len(images), F.dense_report(backbone.cfg)


def write_log(path: str | Path, rows: list[dict]) -> None:
    """Deterministic comma-separated log, one row per epoch."""
    if not rows:
        Path(path).write_text("")
        return
    cols = list(rows[0].keys())
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in cols))
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.12g}"
