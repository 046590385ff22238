"""Improved vision transformer for lesion classification.

Patch embedding with a class token and learnable positional encodings,
multi-scale fused multi-head self-attention (keys/values average-pooled
over the patch grid per scale, combined with learned weights), a GELU
MLP per pre-norm encoder block, attention-map extraction, and Grad-CAM.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import (DimensionError, NumericError, Tape, Tensor, add,
                       add_rowvec, concat_cols, concat_rows, div_by, gelu,
                       layer_norm, matmul, mul, pool_grid, scale, scale_by,
                       slice_cols, slice_rows, softmax_rows, sub, sum_all,
                       transpose)


@dataclass
class ModelConfig:
    image_h: int = 32
    image_w: int = 32
    channels: int = 3
    patch: int = 4
    embed_dim: int = 32
    heads: int = 4
    scales: int = 2
    layers: int = 2
    mlp_ratio: float = 2.0
    classes: int = 3
    seed: int = 0
    literal_multiscale: bool = False

    def validate(self):
        if self.image_h % self.patch or self.image_w % self.patch:
            raise DimensionError(
                f"image {self.image_h}x{self.image_w} not divisible by patch {self.patch}")
        if self.embed_dim % self.heads:
            raise DimensionError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.scales < 1:
            raise DimensionError("scales must be >= 1")
        window = 2 ** (self.scales - 1)
        if not self.literal_multiscale and window > self.grid_side:
            raise DimensionError(
                f"pooling window {window} exceeds patch grid side {self.grid_side}")
        if self.image_h != self.image_w:
            raise DimensionError("only square images are supported")

    @property
    def grid_side(self) -> int:
        return self.image_h // self.patch

    @property
    def num_patches(self) -> int:
        return (self.image_h // self.patch) * (self.image_w // self.patch)

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def mlp_hidden(self) -> int:
        return int(self.mlp_ratio * self.embed_dim)


@dataclass
class AttentionRecord:
    """Per-layer, per-head, per-scale attention matrices and the focus map.

    ``attn[layer][head][scale]`` is the softmaxed score matrix (numpy copy);
    ``focus_map`` is the head-mean class-token-to-patch attention of the
    final layer at the unpooled scale, renormalized to sum to 1, reshaped
    to the patch grid.
    """
    attn: list
    focus_map: np.ndarray | None = None


@dataclass
class ForwardResult:
    logits: Tensor          # 1 x K
    probs: Tensor           # 1 x K
    record: AttentionRecord
    focus: Tensor | None    # 1 x N, differentiable focus distribution
    tokens: Tensor          # (N+1) x D features entering the final block;
                            # the class logit depends on the patch rows only
                            # through this tensor, so saliency is taken here


class ModelParams:
    """All learnable arrays, keyed by name, in a fixed order."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = tensors

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def check_finite(self):
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t.data)):
                raise NumericError(f"non-finite values in parameter {name}")

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.astype(dtype), requires_grad=True)
                            for k, v in self.tensors.items()})


def init_params(cfg: ModelConfig, dtype=np.float64) -> ModelParams:
    """Seeded init: weights uniform(+-sqrt(1/fan_in)), positional encodings
    and class token uniform(+-0.02), biases and scale logits zero."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    D, S = cfg.embed_dim, cfg.scales
    patch_dim = cfg.patch * cfg.patch * cfg.channels
    hidden = cfg.mlp_hidden

    def u(shape, fan_in):
        b = math.sqrt(1.0 / fan_in)
        return rng.uniform(-b, b, size=shape)

    t = {}

    def p(name, arr):
        t[name] = Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)

    p("patch_proj.w", u((D, patch_dim), patch_dim))
    p("patch_proj.b", np.zeros((1, D)))
    p("cls", rng.uniform(-0.02, 0.02, size=(1, D)))
    p("pos", rng.uniform(-0.02, 0.02, size=(cfg.num_patches + 1, D)))
    for i in range(cfg.layers):
        pre = f"layer{i}."
        p(pre + "ln1.g", np.ones((1, D)))
        p(pre + "ln1.b", np.zeros((1, D)))
        p(pre + "wq", u((D, D), D))
        p(pre + "wk", u((D, D), D))
        p(pre + "wv", u((D, D), D))
        p(pre + "wo", u((D, D), D))
        p(pre + "scale_logits", np.zeros((1, S)))
        p(pre + "ln2.g", np.ones((1, D)))
        p(pre + "ln2.b", np.zeros((1, D)))
        p(pre + "mlp.w1", u((hidden, D), D))
        p(pre + "mlp.b1", np.zeros((1, hidden)))
        p(pre + "mlp.w2", u((D, hidden), hidden))
        p(pre + "mlp.b2", np.zeros((1, D)))
    p("final_ln.g", np.ones((1, D)))
    p("final_ln.b", np.zeros((1, D)))
    p("head.w", u((cfg.classes, D), D))
    p("head.b", np.zeros((1, cfg.classes)))
    return ModelParams(t)


def patchify(image: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Split H x W x C into N patches of P*P*C values each.

    Patches are in row-major grid order; within a patch, values are
    concatenated in (row, col, channel) order.
    """
    expect = (cfg.image_h, cfg.image_w, cfg.channels)
    if image.shape != expect:
        raise DimensionError(f"image shape {image.shape} does not match config {expect}")
    P = cfg.patch
    gh, gw = cfg.image_h // P, cfg.image_w // P
    blocks = image.reshape(gh, P, gw, P, cfg.channels).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(gh * gw, P * P * cfg.channels).copy()


def unpatchify(patches: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    P = cfg.patch
    gh, gw = cfg.image_h // P, cfg.image_w // P
    blocks = patches.reshape(gh, gw, P, P, cfg.channels).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(cfg.image_h, cfg.image_w, cfg.channels).copy()


def embed(params: ModelParams, patches_t: Tensor, cfg: ModelConfig) -> Tensor:
    """Project patches, prepend the class token, add positional encodings."""
    if patches_t.shape[0] != cfg.num_patches:
        raise DimensionError(
            f"got {patches_t.shape[0]} patches, config expects {cfg.num_patches}")
    z = add_rowvec(matmul(patches_t, transpose(params["patch_proj.w"])),
                   params["patch_proj.b"])
    z = concat_rows([params["cls"], z])
    return add(z, params["pos"])


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V"""
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"key dim mismatch: {q.shape} vs {k.shape}")
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    return matmul(softmax_rows(scores), v)


def multi_scale_attention(params: ModelParams, layer: int, x: Tensor,
                          cfg: ModelConfig, record: AttentionRecord | None = None,
                          keep_s1=False):
    """Multi-head attention fused over scales.

    For scale s, key/value patch rows (class token excluded) are
    average-pooled over the patch grid with window 2**(s-1); per-scale
    outputs are combined with softmaxed learned scale weights, heads are
    concatenated and projected. With ``literal_multiscale`` every scale
    uses the unpooled keys/values.

    Returns (output, s1_attention_tensors_per_head).
    """
    pre = f"layer{layer}."
    h, dk, S = cfg.heads, cfg.head_dim, cfg.scales
    G = cfg.grid_side
    n = x.shape[0]

    q_full = matmul(x, params[pre + "wq"])
    k_full = matmul(x, params[pre + "wk"])
    v_full = matmul(x, params[pre + "wv"])
    w = softmax_rows(params[pre + "scale_logits"])  # 1 x S

    head_outs = []
    s1_attns = []
    rec_layer = [] if record is not None else None
    for i in range(h):
        qh = slice_cols(q_full, i * dk, (i + 1) * dk)
        kh = slice_cols(k_full, i * dk, (i + 1) * dk)
        vh = slice_cols(v_full, i * dk, (i + 1) * dk)
        kh_cls, kh_pat = slice_rows(kh, 0, 1), slice_rows(kh, 1, n)
        vh_cls, vh_pat = slice_rows(vh, 0, 1), slice_rows(vh, 1, n)
        combined = None
        rec_head = [] if rec_layer is not None else None
        for s in range(S):
            if cfg.literal_multiscale or s == 0:
                ks, vs = kh, vh
            else:
                win = 2 ** s
                ks = concat_rows([kh_cls, pool_grid(kh_pat, G, win)])
                vs = concat_rows([vh_cls, pool_grid(vh_pat, G, win)])
            scores = scale(matmul(qh, transpose(ks)), 1.0 / math.sqrt(dk))
            attn = softmax_rows(scores)
            if rec_head is not None:
                rec_head.append(attn.data.copy())
            if s == 0 and keep_s1:
                s1_attns.append(attn)
            out_s = scale_by(matmul(attn, vs), slice_cols(w, s, s + 1))
            combined = out_s if combined is None else add(combined, out_s)
        head_outs.append(combined)
        if rec_layer is not None:
            rec_layer.append(rec_head)
    if rec_layer is not None:
        record.attn.append(rec_layer)
    return matmul(concat_cols(head_outs), params[pre + "wo"]), s1_attns


def encoder_block(params: ModelParams, layer: int, z: Tensor, cfg: ModelConfig,
                  record: AttentionRecord | None = None, keep_s1=False):
    """Pre-norm block: z + MSAttn(LN(z)), then + MLP(LN(.))."""
    pre = f"layer{layer}."
    a = layer_norm(z, params[pre + "ln1.g"], params[pre + "ln1.b"])
    attn_out, s1_attns = multi_scale_attention(params, layer, a, cfg, record, keep_s1)
    z = add(z, attn_out)
    b = layer_norm(z, params[pre + "ln2.g"], params[pre + "ln2.b"])
    hidden = gelu(add_rowvec(matmul(b, transpose(params[pre + "mlp.w1"])),
                             params[pre + "mlp.b1"]))
    mlp_out = add_rowvec(matmul(hidden, transpose(params[pre + "mlp.w2"])),
                         params[pre + "mlp.b2"])
    return add(z, mlp_out), s1_attns


def forward(params: ModelParams, image: np.ndarray, cfg: ModelConfig,
            want_record=True) -> ForwardResult:
    """Full forward pass for one image; records attention and focus map."""
    dtype = params["pos"].dtype
    patches = patchify(np.asarray(image, dtype=dtype), cfg)
    z = embed(params, Tensor(patches), cfg)
    record = AttentionRecord(attn=[]) if want_record else None
    last_s1 = []
    tokens = z
    for i in range(cfg.layers):
        keep = i == cfg.layers - 1
        if keep:
            tokens = z
        z, s1 = encoder_block(params, i, z, cfg, record, keep_s1=keep)
        if keep:
            last_s1 = s1
    z = layer_norm(z, params["final_ln.g"], params["final_ln.b"])
    cls_row = slice_rows(z, 0, 1)
    logits = add_rowvec(matmul(cls_row, transpose(params["head.w"])), params["head.b"])
    probs = softmax_rows(logits)

    focus = focus_from_attention(last_s1, cfg)
    if record is not None and focus is not None:
        record.focus_map = focus.data.reshape(cfg.grid_side, cfg.grid_side).copy()
    return ForwardResult(logits=logits, probs=probs, record=record,
                         focus=focus, tokens=tokens)


def focus_from_attention(s1_attns, cfg: ModelConfig) -> Tensor | None:
    """Head-mean class-token-to-patch attention row, renormalized to sum 1."""
    if not s1_attns:
        return None
    acc = None
    for a in s1_attns:
        row = slice_cols(slice_rows(a, 0, 1), 1, cfg.num_patches + 1)
        acc = row if acc is None else add(acc, row)
    acc = scale(acc, 1.0 / len(s1_attns))
    return div_by(acc, sum_all(acc))


def grad_cam(params: ModelParams, image: np.ndarray, target_class: int,
             cfg: ModelConfig):
    """Gradient-weighted patch-token heatmap for a target class.

    Returns (grid G x G in [0, 1], nearest-neighbor upsampled H x W map).
    """
    if not 0 <= target_class < cfg.classes:
        raise ValueError(f"class {target_class} out of range [0, {cfg.classes})")
    params.check_finite()
    with Tape() as tape:
        res = forward(params, image, cfg, want_record=False)
        target = slice_cols(res.logits, target_class, target_class + 1)
        tape.backward(target)
        grads = tape.grad(res.tokens)[1:]
    acts = res.tokens.data[1:]
    weights = (grads * acts).mean(axis=1)
    weights = np.maximum(weights, 0.0)
    top = weights.max()
    if top > 0:
        lo = weights.min()
        weights = (weights - lo) / (top - lo) if top > lo else np.ones_like(weights)
    grid = weights.reshape(cfg.grid_side, cfg.grid_side)
    upsampled = np.kron(grid, np.ones((cfg.patch, cfg.patch), dtype=grid.dtype))
    return grid, upsampled
