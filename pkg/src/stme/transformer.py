"""2D position encoding, the three attention mechanisms, and the token predictors.

Every block runs spatial-temporal attention over the flattened map (condition
token prepended), then joint-spatial attention with frames as batches, then
joint-temporal attention with joints as batches, then a feed-forward, each as
a pre-norm residual sublayer. The condition token only takes part in the
flattened attention; the per-frame and per-joint attentions see motion tokens
alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .masking import MaskPlan
from .tensor import (Module, Tensor, add, concat, cross_entropy, embedding,
                     init_uniform, layer_norm, linear, matmul, mul, relu,
                     reshape, softmax, split, transpose)


def _sinusoid_table(length: int, dim: int, dtype) -> np.ndarray:
    """Classic sin/cos interleave: channel 2i = sin(pos/10000^(2i/dim)), 2i+1 = cos."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    half = (dim + 1) // 2
    freqs = np.exp(-math.log(10000.0) * (2.0 * np.arange(half) / dim))[None, :]
    table = np.zeros((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * freqs)
    table[:, 1::2] = np.cos(pos * freqs)[:, : dim - half]
    return table.astype(dtype)


def pos_encode_2d(t_len: int, j_len: int, d_model: int, dtype=np.float32) -> np.ndarray:
    """(T', J', d_model) table: first half of the channels varies only with t,
    second half only with j."""
    if d_model % 2:
        raise ValueError("d_model must be even")
    half = d_model // 2
    t_table = _sinusoid_table(t_len, half, dtype)
    j_table = _sinusoid_table(j_len, half, dtype)
    out = np.empty((t_len, j_len, d_model), dtype=dtype)
    out[:, :, :half] = t_table[:, None, :]
    out[:, :, half:] = j_table[None, :, :]
    return out


@dataclass
class TransformerConfig:
    layers: int = 6
    heads: int = 6
    d_model: int = 384
    ffn_mult: int = 4
    codes: int = 256       # C; vocab adds mask and pad specials
    d_text: int = 512
    dropout: float = 0.0
    uncond_prob: float = 0.1
    pos_bias: bool = False  # add P-similarity bias inside the attention softmax

    def __post_init__(self):
        if self.d_model % self.heads or self.d_model % 2:
            raise ValueError("d_model must be divisible by heads and by 2")

    @property
    def mask_token(self) -> int:
        return self.codes

    @property
    def pad_token(self) -> int:
        return self.codes + 1

    @property
    def vocab(self) -> int:
        return self.codes + 2


class AttentionParams(Module):
    def __init__(self, d_model, rng, dtype=np.float32):
        self.wq = init_uniform(rng, (d_model, d_model), d_model, dtype)
        self.wk = init_uniform(rng, (d_model, d_model), d_model, dtype)
        self.wv = init_uniform(rng, (d_model, d_model), d_model, dtype)
        self.wo = init_uniform(rng, (d_model, d_model), d_model, dtype)
        self.bq = T.zeros_param((d_model,), dtype)
        self.bk = T.zeros_param((d_model,), dtype)
        self.bv = T.zeros_param((d_model,), dtype)
        self.bo = T.zeros_param((d_model,), dtype)


def multi_head_attention(x: Tensor, p: AttentionParams, heads: int,
                         logit_bias: np.ndarray | None = None) -> Tensor:
    """Full bidirectional attention over (batch, n, d) with row-softmax scores."""
    B, n, d = x.shape
    if d % heads:
        raise ValueError("feature dim not divisible by head count")
    dk = d // heads

    def split_heads(t: Tensor) -> Tensor:
        t = reshape(t, (B, n, heads, dk))
        return reshape(transpose(t, (0, 2, 1, 3)), (B * heads, n, dk))

    q = split_heads(linear(x, p.wq, p.bq))
    k = split_heads(linear(x, p.wk, p.bk))
    v = split_heads(linear(x, p.wv, p.bv))
    scores = mul(matmul(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dk))
    if logit_bias is not None:
        scores = add(scores, Tensor(np.asarray(logit_bias, dtype=x.dtype.type)))
    weights = softmax(scores, axis=-1)
    ctx = matmul(weights, v)
    ctx = reshape(ctx, (B, heads, n, dk))
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (B, n, d))
    return linear(ctx, p.wo, p.bo)


# the three attention arrangements over a token map ------------------------


def attn_spatial_temporal(x: Tensor, p: AttentionParams, heads: int,
                          logit_bias: np.ndarray | None = None) -> Tensor:
    """Attention over the flattened (1 + T'*J') sequence, text token first."""
    single = x.ndim == 2
    x3 = reshape(x, (1,) + x.shape) if single else x
    out = multi_head_attention(x3, p, heads, logit_bias)
    return reshape(out, out.shape[1:]) if single else out


def attn_joint_spatial(x: Tensor, p: AttentionParams, heads: int,
                       logit_bias: np.ndarray | None = None) -> Tensor:
    """Frames as batches: x is (T', J', d) or (B, T', J', d); attention runs
    independently within each frame."""
    single = x.ndim == 3
    x4 = reshape(x, (1,) + x.shape) if single else x
    B, t_len, j_len, d = x4.shape
    flat = reshape(x4, (B * t_len, j_len, d))
    out = reshape(multi_head_attention(flat, p, heads, logit_bias), (B, t_len, j_len, d))
    return reshape(out, out.shape[1:]) if single else out


def attn_joint_temporal(x: Tensor, p: AttentionParams, heads: int,
                        logit_bias: np.ndarray | None = None) -> Tensor:
    """Joints as batches: attention runs independently along each joint's timeline."""
    single = x.ndim == 3
    x4 = reshape(x, (1,) + x.shape) if single else x
    B, t_len, j_len, d = x4.shape
    swapped = transpose(x4, (0, 2, 1, 3))
    flat = reshape(swapped, (B * j_len, t_len, d))
    out = reshape(multi_head_attention(flat, p, heads, logit_bias), (B, j_len, t_len, d))
    out = transpose(out, (0, 2, 1, 3))
    return reshape(out, out.shape[1:]) if single else out


class _LayerNormParams(Module):
    def __init__(self, d_model, dtype=np.float32):
        self.gain = T.ones_param((d_model,), dtype)
        self.bias = T.zeros_param((d_model,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class StBlock(Module):
    """One sequential ST -> joint-spatial -> joint-temporal -> FFN block."""

    def __init__(self, d_model, heads, ffn_mult, rng, dtype=np.float32):
        self.heads = heads
        self.attn_st = AttentionParams(d_model, rng, dtype)
        self.attn_s = AttentionParams(d_model, rng, dtype)
        self.attn_t = AttentionParams(d_model, rng, dtype)
        self.w1 = init_uniform(rng, (d_model, d_model * ffn_mult), d_model, dtype)
        self.b1 = T.zeros_param((d_model * ffn_mult,), dtype)
        self.w2 = init_uniform(rng, (d_model * ffn_mult, d_model), d_model * ffn_mult, dtype)
        self.b2 = T.zeros_param((d_model,), dtype)
        self.ln1 = _LayerNormParams(d_model, dtype)
        self.ln2 = _LayerNormParams(d_model, dtype)
        self.ln3 = _LayerNormParams(d_model, dtype)
        self.ln4 = _LayerNormParams(d_model, dtype)

    def __call__(self, x: Tensor, t_len: int, j_len: int, biases=(None, None, None),
                 dropout: float = 0.0, rng=None) -> Tensor:
        B, n, d = x.shape
        m = t_len * j_len

        def drop(t):
            return T.dropout(t, dropout, rng) if dropout > 0.0 else t

        x = add(x, drop(attn_spatial_temporal(self.ln1(x), self.attn_st, self.heads, biases[0])))
        text, grid = split(x, 1, [1, m])
        g = reshape(grid, (B, t_len, j_len, d))
        g = add(g, drop(attn_joint_spatial(self.ln2(g), self.attn_s, self.heads, biases[1])))
        g = add(g, drop(attn_joint_temporal(self.ln3(g), self.attn_t, self.heads, biases[2])))
        x = concat([text, reshape(g, (B, m, d))], axis=1)
        h = linear(relu(linear(self.ln4(x), self.w1, self.b1)), self.w2, self.b2)
        return add(x, drop(h))


class _TrunkMixin:
    """Shared machinery: cached position tables, optional softmax biases, the
    condition token, and the block pipeline."""

    def _init_trunk(self, cfg: TransformerConfig, rng, dtype):
        self.cfg = cfg
        self.dtype = dtype
        self.blocks = [StBlock(cfg.d_model, cfg.heads, cfg.ffn_mult, rng, dtype)
                       for _ in range(cfg.layers)]
        self.cond_w = init_uniform(rng, (cfg.d_text, cfg.d_model), cfg.d_text, dtype)
        self.cond_b = T.zeros_param((cfg.d_model,), dtype)
        self.null_cond = init_uniform(rng, (1, cfg.d_model), cfg.d_model, dtype)
        self.ln_f = _LayerNormParams(cfg.d_model, dtype)
        # near-zero head keeps initial logits close to uniform (CE ~ ln C)
        self.head_w = init_uniform(rng, (cfg.d_model, cfg.codes), cfg.d_model, dtype)
        self.head_w.data *= 0.01
        self.head_b = T.zeros_param((cfg.codes,), dtype)
        self._pos_cache: dict[tuple[int, int], np.ndarray] = {}
        self._bias_cache: dict[tuple[int, int], tuple] = {}

    def _pos_table(self, t_len: int, j_len: int) -> np.ndarray:
        key = (t_len, j_len)
        if key not in self._pos_cache:
            table = pos_encode_2d(t_len, j_len, self.cfg.d_model, self.dtype)
            self._pos_cache[key] = table.reshape(t_len * j_len, self.cfg.d_model)
        return self._pos_cache[key]

    def _biases(self, t_len: int, j_len: int):
        """P-similarity softmax biases for the three attentions (pos_bias mode)."""
        if not self.cfg.pos_bias:
            return (None, None, None)
        key = (t_len, j_len)
        if key not in self._bias_cache:
            d = self.cfg.d_model
            flat = self._pos_table(t_len, j_len).astype(np.float64)
            st = np.zeros((1 + t_len * j_len,) * 2)
            st[1:, 1:] = flat @ flat.T / math.sqrt(d)
            tt = _sinusoid_table(t_len, d // 2, np.float64)
            jj = _sinusoid_table(j_len, d // 2, np.float64)
            self._bias_cache[key] = (
                st.astype(self.dtype),
                (jj @ jj.T / math.sqrt(d)).astype(self.dtype),
                (tt @ tt.T / math.sqrt(d)).astype(self.dtype),
            )
        return self._bias_cache[key]

    def _condition_tokens(self, cond: np.ndarray, uncond: np.ndarray) -> Tensor:
        """(B, 1, d) condition tokens; rows flagged in `uncond` use the learned
        null token instead of the projected embedding."""
        B = cond.shape[0]
        cond_t = linear(Tensor(np.asarray(cond, dtype=self.dtype)), self.cond_w, self.cond_b)
        gate = np.asarray(uncond, dtype=self.dtype).reshape(B, 1)
        mixed = add(mul(cond_t, Tensor(1.0 - gate)), mul(self.null_cond, Tensor(gate)))
        return reshape(mixed, (B, 1, self.cfg.d_model))

    def _run_trunk(self, x: Tensor, t_len: int, j_len: int, dropout: float, rng) -> Tensor:
        biases = self._biases(t_len, j_len)
        for block in self.blocks:
            x = block(x, t_len, j_len, biases, dropout, rng)
        x = self.ln_f(x)
        _, grid = split(x, 1, [1, t_len * j_len])
        logits = linear(grid, self.head_w, self.head_b)
        B = x.shape[0]
        return reshape(logits, (B, t_len, j_len, self.cfg.codes))


class MaskTransformer(Module, _TrunkMixin):
    """Predicts code logits for a token map containing mask tokens."""

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator, dtype=np.float32):
        self.token_emb = init_uniform(rng, (cfg.vocab, cfg.d_model), cfg.d_model, dtype)
        self._init_trunk(cfg, rng, dtype)

    def forward_batch(self, tokens: np.ndarray, cond: np.ndarray, uncond: np.ndarray,
                      dropout: float = 0.0, rng=None) -> Tensor:
        tokens = np.asarray(tokens)
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab:
            raise ValueError(f"token id outside vocab of {self.cfg.vocab}")
        B, t_len, j_len = tokens.shape
        emb = embedding(self.token_emb, tokens.reshape(B, t_len * j_len))
        emb = add(emb, Tensor(self._pos_table(t_len, j_len)))
        x = concat([self._condition_tokens(cond, uncond), emb], axis=1)
        return self._run_trunk(x, t_len, j_len, dropout, rng)

    def forward(self, tokens: np.ndarray, cond_vector: np.ndarray,
                unconditional: bool = False) -> np.ndarray:
        """Single-map inference: (T', J') tokens -> (T', J', C) logits."""
        with T.no_grad():
            out = self.forward_batch(
                tokens[None], cond_vector[None],
                np.array([1.0 if unconditional else 0.0]))
        return out.data[0]


class ResidualTransformer(Module, _TrunkMixin):
    """Predicts layer-l codes from the summed code vectors of layers [0:l].

    Keeps a frozen copy of the quantizer's code tables so a token-stack prefix
    can be turned into its summed latent without the VQ model at hand.
    """

    def __init__(self, cfg: TransformerConfig, residual_layers: int, d_code: int,
                 joint_tables: np.ndarray, global_tables: np.ndarray,
                 rng: np.random.Generator, dtype=np.float32):
        if residual_layers < 1:
            raise ValueError("need at least one residual layer")
        self.residual_layers = residual_layers
        self.d_code = d_code
        # tables: (L, C, d_code) for input layers 0..L-1
        self.joint_tables = np.ascontiguousarray(joint_tables, dtype=np.float32)
        self.global_tables = np.ascontiguousarray(global_tables, dtype=np.float32)
        self.in_w = init_uniform(rng, (d_code, cfg.d_model), d_code, dtype)
        self.in_b = T.zeros_param((cfg.d_model,), dtype)
        self.layer_emb = init_uniform(rng, (residual_layers, cfg.d_model), cfg.d_model, dtype)
        self._init_trunk(cfg, rng, dtype)

    def sum_code_vectors(self, layers: list[np.ndarray]) -> np.ndarray:
        """Sum table entries of stack layers [0:l]; maps are (B, T', J')."""
        B, t_len, j_len = layers[0].shape
        J = j_len - 1
        out = np.zeros((B, t_len, j_len, self.d_code), dtype=np.float32)
        for level, layer in enumerate(layers):
            out[:, :, :J, :] += self.joint_tables[level][layer[:, :, :J]]
            out[:, :, J:, :] += self.global_tables[level][layer[:, :, J:]]
        return out

    def forward_batch(self, summed: np.ndarray, layer: int, cond: np.ndarray,
                      uncond: np.ndarray, dropout: float = 0.0, rng=None) -> Tensor:
        if not 1 <= layer <= self.residual_layers:
            raise ValueError(f"layer {layer} outside [1, {self.residual_layers}]")
        B, t_len, j_len, d_code = summed.shape
        x = linear(Tensor(np.asarray(summed, dtype=self.dtype)), self.in_w, self.in_b)
        x = reshape(x, (B, t_len * j_len, self.cfg.d_model))
        x = add(x, Tensor(self._pos_table(t_len, j_len)))
        level_vec = reshape(embedding(self.layer_emb, np.array([layer - 1])), (1, 1, self.cfg.d_model))
        x = add(x, level_vec)
        x = concat([self._condition_tokens(cond, uncond), x], axis=1)
        return self._run_trunk(x, t_len, j_len, dropout, rng)

    def forward(self, summed: np.ndarray, layer: int, cond_vector: np.ndarray,
                unconditional: bool = False) -> np.ndarray:
        with T.no_grad():
            out = self.forward_batch(
                summed[None], layer, cond_vector[None],
                np.array([1.0 if unconditional else 0.0]))
        return out.data[0]


def mask_loss(logits: Tensor, targets: np.ndarray, plan_selected: np.ndarray) -> Tensor:
    """Categorical cross-entropy averaged over the selected cells only."""
    codes = logits.shape[-1]
    selected = np.asarray(plan_selected if not isinstance(plan_selected, MaskPlan)
                          else plan_selected.selected)
    if not selected.any():
        raise ValueError("no masked positions")
    flat = reshape(logits, (-1, codes))
    return cross_entropy(flat, np.asarray(targets).reshape(-1), select=selected.reshape(-1))
