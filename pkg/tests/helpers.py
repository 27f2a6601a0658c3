"""Shared test utilities: finite-difference gradient checking, tiny models."""

import numpy as np

from spotvit import engine as E
from spotvit import tensor as T
from spotvit import vit as V
from spotvit.predictor import PredictorConfig


def build_tiny_engine(
    depth=4, stages=(2, 3), rho=0.7, mode="inference", d_remap=8, seed=0, **pkw
):
    """Small backbone + predictors + engine for fast end-to-end tests."""
    cfg = V.ViTConfig(
        depth=depth, embed_dim=8, heads=2, patch_size=4, image_size=16, num_classes=3
    )
    backbone = V.VisionTransformer(cfg, seed=seed)
    pcfg = PredictorConfig(d_remap=d_remap, **pkw)
    scfg = E.SparsifyConfig(rho=rho, stage_layers=list(stages), mode=mode)
    preds = E.make_predictors(cfg.embed_dim, cfg.heads, pcfg, scfg.stages, seed=seed + 1)
    return E.SparsifyEngine(backbone, preds, scfg, pcfg), backbone, cfg


def numerical_grad(fn, arrays, index, h=1e-5):
    """Central-difference gradient of scalar fn w.r.t. arrays[index].

    fn takes plain numpy arrays and returns a float; every entry of the
    chosen array is perturbed independently.
    """
    base = [a.copy() for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    while not it.finished:
        ix = it.multi_index
        orig = target[ix]
        target[ix] = orig + h
        up = fn(*base)
        target[ix] = orig - h
        down = fn(*base)
        target[ix] = orig
        grad[ix] = (up - down) / (2.0 * h)
        it.iternext()
    return grad


def relative_error(analytic, numeric):
    denom = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return np.abs(analytic - numeric).max() / denom


def check_op_grads(build, arrays, tol=1e-5, h=1e-5):
    """Compare tape gradients of a scalar-valued op graph with central differences.

    build maps a list of Tensors to a scalar Tensor; arrays are the leaf
    values. Returns the worst relative error across inputs.
    """
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    loss = build(leaves)
    T.backward(loss)

    def scalar_fn(*vals):
        consts = [T.Tensor(v) for v in vals]
        return build(consts).item()

    worst = 0.0
    for i, leaf in enumerate(leaves):
        assert leaf.grad is not None, f"input {i} received no gradient"
        num = numerical_grad(scalar_fn, [a.copy() for a in arrays], i, h=h)
        err = relative_error(leaf.grad, num)
        worst = max(worst, err)
        assert err < tol, f"input {i}: relative error {err:.3e} >= {tol}"
    return worst
