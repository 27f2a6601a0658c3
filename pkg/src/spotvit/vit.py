"""A small DeiT-style vision transformer that exposes every attention map.

Pre-norm blocks, a class token at index 0, learnable positional embeddings.
Column masking is additive before the softmax (training keeps static shapes),
physical pruning drops token rows (inference realizes the savings); the two
paths agree on retained-token outputs and that equivalence is tested.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, ContractError
from .tensor import Tensor

MASK_NEG = -1e30  # additive pre-softmax bias; exp underflows to exactly 0
SOFT_MASK_FLOOR = 1e-30


@dataclass
class ViTConfig:
    depth: int
    embed_dim: int
    heads: int
    patch_size: int
    image_size: int
    mlp_ratio: float = 4.0
    num_classes: int = 4
    in_channels: int = 1

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )

    @property
    def n_patches(self) -> int:
        side = self.image_size // self.patch_size
        return side * side

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


@dataclass
class TokenSequence:
    """Class token at index 0 plus patch tokens, with original-index bookkeeping."""

    tokens: Tensor  # (T, embed_dim)
    retained: np.ndarray  # bool (T,)
    source_index: np.ndarray  # int (T,), positions in the unpruned sequence

    def __post_init__(self):
        if not self.retained[0]:
            raise ContractError("class token (index 0) must always be retained")

    @property
    def length(self) -> int:
        return self.tokens.shape[0]


@dataclass
class AttentionMap:
    """Row-stochastic (N+1)x(N+1) attention weights for one layer and head."""

    values: Tensor
    head: int = 0

    @property
    def n_tokens(self) -> int:
        return self.values.shape[0]


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def _column_bias(mask, length: int) -> Tensor | None:
    """Additive pre-softmax bias hiding masked columns.

    Binary masks become a -1e30 constant (exact zeros after softmax); a soft
    mask tensor contributes log(mask) so gradients reach the mask values.
    """
    if mask is None:
        return None
    if isinstance(mask, Tensor):
        if mask.shape != (length,):
            raise ContractError(f"mask length {mask.shape} != token count {length}")
        if mask.data[0] <= 0:
            raise ContractError("mask must keep the class token")
        return T.reshape(T.log(T.maximum(mask, SOFT_MASK_FLOOR)), (1, length))
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (length,):
        raise ContractError(f"mask length {mask.shape} != token count {length}")
    if not mask[0]:
        raise ContractError("mask must keep the class token")
    if not mask.any():
        raise ContractError("attention mask hides every token")
    bias = np.where(mask, 0.0, MASK_NEG)[None, :]
    return Tensor(bias)


class VisionTransformer:
    """Backbone with per-layer, per-head attention map capture."""

    def __init__(self, cfg: ViTConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.embed_dim
        hidden = int(round(cfg.mlp_ratio * d))
        patch_in = cfg.patch_size * cfg.patch_size * cfg.in_channels
        p: dict[str, Tensor] = {}

        def w(name, shape, std=0.02):
            p[name] = Tensor(trunc_normal(rng, shape, std), requires_grad=True)

        def zeros(name, shape):
            p[name] = Tensor(np.zeros(shape), requires_grad=True)

        def ones(name, shape):
            p[name] = Tensor(np.ones(shape), requires_grad=True)

        w("patch.weight", (patch_in, d))
        zeros("patch.bias", (d,))
        w("cls", (1, d))
        w("pos", (cfg.n_patches + 1, d))
        for i in range(cfg.depth):
            pre = f"block{i}"
            ones(f"{pre}.ln1.gain", (d,))
            zeros(f"{pre}.ln1.bias", (d,))
            for proj in ("q", "k", "v", "o"):
                w(f"{pre}.attn.w{proj}", (d, d))
                zeros(f"{pre}.attn.b{proj}", (d,))
            ones(f"{pre}.ln2.gain", (d,))
            zeros(f"{pre}.ln2.bias", (d,))
            w(f"{pre}.mlp.w1", (d, hidden))
            zeros(f"{pre}.mlp.b1", (hidden,))
            w(f"{pre}.mlp.w2", (hidden, d))
            zeros(f"{pre}.mlp.b2", (d,))
        ones("norm.gain", (d,))
        zeros("norm.bias", (d,))
        w("head.weight", (d, cfg.num_classes))
        zeros("head.bias", (cfg.num_classes,))
        self.params = p

    # -- parameter plumbing -------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, tensor in self.params.items():
            key = prefix + name
            if key not in arrays:
                raise CheckpointError(f"checkpoint missing parameter '{key}'")
            arr = arrays[key]
            if arr.shape != tensor.data.shape:
                raise CheckpointError(
                    f"'{key}': checkpoint shape {arr.shape} != model shape {tensor.data.shape}"
                )
            tensor.data = arr.astype(np.float64).copy()

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False

    # -- forward pieces -------------------------------------------------------

    def patchify_embed(self, image: np.ndarray) -> TokenSequence:
        """Split the image into patch tokens, project, prepend class token."""
        cfg = self.cfg
        image = np.asarray(image, dtype=np.float64)
        if image.ndim == 2:
            image = image[:, :, None]
        if image.shape != (cfg.image_size, cfg.image_size, cfg.in_channels):
            raise ConfigError(
                f"image shape {image.shape} does not match configured "
                f"{(cfg.image_size, cfg.image_size, cfg.in_channels)}"
            )
        ps = cfg.patch_size
        side = cfg.image_size // ps
        patches = (
            image.reshape(side, ps, side, ps, cfg.in_channels)
            .transpose(0, 2, 1, 3, 4)
            .reshape(cfg.n_patches, ps * ps * cfg.in_channels)
        )
        projected = T.linear(
            Tensor(patches), self.params["patch.weight"], self.params["patch.bias"]
        )
        tokens = T.concat([self.params["cls"], projected], axis=0)
        tokens = T.add(tokens, self.params["pos"])
        n = cfg.n_patches + 1
        return TokenSequence(tokens, np.ones(n, dtype=bool), np.arange(n))

    def attention_block(
        self, seq: TokenSequence, mask=None, layer: int = 0
    ) -> tuple[TokenSequence, list[AttentionMap]]:
        """One pre-norm transformer block; returns the post-softmax map per head."""
        cfg = self.cfg
        p = self.params
        pre = f"block{layer}"
        x = seq.tokens
        n = x.shape[0]
        bias = _column_bias(mask, n)

        h = T.layer_norm(x, p[f"{pre}.ln1.gain"], p[f"{pre}.ln1.bias"])
        q = T.linear(h, p[f"{pre}.attn.wq"], p[f"{pre}.attn.bq"])
        k = T.linear(h, p[f"{pre}.attn.wk"], p[f"{pre}.attn.bk"])
        v = T.linear(h, p[f"{pre}.attn.wv"], p[f"{pre}.attn.bv"])

        # (n, heads * hd) -> (heads, n, hd), all heads in one batched product
        def split(t: Tensor) -> Tensor:
            return T.permute(T.reshape(t, (n, cfg.heads, cfg.head_dim)), (1, 0, 2))

        qh, kh, vh = split(q), split(k), split(v)
        scale = 1.0 / np.sqrt(cfg.head_dim)
        logits = T.mul(T.bmm(qh, T.permute(kh, (0, 2, 1))), scale)
        if bias is not None:
            logits = T.add(logits, bias)
        attn = T.softmax_lastdim(logits)
        maps = [AttentionMap(T.take_plane(attn, hh), head=hh) for hh in range(cfg.heads)]
        mixed = T.bmm(attn, vh)
        merged = T.reshape(T.permute(mixed, (1, 0, 2)), (n, cfg.embed_dim))
        attn_out = T.linear(merged, p[f"{pre}.attn.wo"], p[f"{pre}.attn.bo"])
        x = T.add(x, attn_out)

        h2 = T.layer_norm(x, p[f"{pre}.ln2.gain"], p[f"{pre}.ln2.bias"])
        mid = T.gelu(T.linear(h2, p[f"{pre}.mlp.w1"], p[f"{pre}.mlp.b1"]))
        x = T.add(x, T.linear(mid, p[f"{pre}.mlp.w2"], p[f"{pre}.mlp.b2"]))

        out_seq = TokenSequence(x, seq.retained.copy(), seq.source_index.copy())
        return out_seq, maps

    def classify(self, seq: TokenSequence) -> Tensor:
        """Final norm, then the class-token row through the linear head."""
        normed = T.layer_norm(seq.tokens, self.params["norm.gain"], self.params["norm.bias"])
        cls_row = T.take_rows(normed, [0])
        logits = T.linear(cls_row, self.params["head.weight"], self.params["head.bias"])
        return T.reshape(logits, (self.cfg.num_classes,))

    def final_norm(self, seq: TokenSequence) -> Tensor:
        return T.layer_norm(seq.tokens, self.params["norm.gain"], self.params["norm.bias"])

    def forward(
        self, image: np.ndarray, retention_hooks: dict[int, np.ndarray] | None = None
    ) -> tuple[Tensor, list[list[AttentionMap]], TokenSequence]:
        """Masked-mode forward: hooks apply their mask from that layer onward."""
        hooks = retention_hooks or {}
        for layer in hooks:
            if not 1 <= layer <= self.cfg.depth:
                raise ConfigError(f"retention hook at nonexistent layer {layer}")
        seq = self.patchify_embed(image)
        n = seq.length
        current = np.ones(n, dtype=bool)
        active = False
        all_maps: list[list[AttentionMap]] = []
        for layer in range(1, self.cfg.depth + 1):
            if layer in hooks:
                hook = np.asarray(hooks[layer], dtype=bool)
                if hook.shape != (n,):
                    raise ConfigError(
                        f"hook mask at layer {layer} has length {hook.shape}, expected {n}"
                    )
                current = current & hook
                current[0] = True
                active = True
            seq, maps = self.attention_block(
                seq, current if active else None, layer=layer - 1
            )
            seq.retained = current.copy()
            all_maps.append(maps)
        return self.classify(seq), all_maps, seq


def physical_prune(seq: TokenSequence, mask) -> TokenSequence:
    """Drop masked token rows, preserving order and the original-index map."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (seq.length,):
        raise ContractError(f"prune mask length {mask.shape} != sequence {seq.length}")
    if not mask[0]:
        raise ContractError("physical_prune must keep the class token")
    keep = np.flatnonzero(mask)
    tokens = T.take_rows(seq.tokens, keep)
    return TokenSequence(
        tokens, np.ones(len(keep), dtype=bool), seq.source_index[keep].copy()
    )
