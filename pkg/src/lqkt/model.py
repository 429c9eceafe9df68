"""Sequence model: last-query attention encoder, LSTM, prediction head.

The attention stage queries with only the final position, so its score
computation is a length-L vector per head instead of an L x L matrix:
n_heads * L * d_k multiply-accumulates exactly, linear in L. Because the
sole query is the last position, excluding padded keys is the only masking
needed; there is no causal mask to apply. A conventional all-positions
attention is kept alongside as a brute-force reference and benchmark
baseline.

The encoder's 1 x d attention context is residual-added to every input row
before layernorm and the position-wise FFN, so the LSTM still consumes a
length-L sequence while the attention stays O(L).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import numcore
from .features import EmbedParams, FeatureWindow, embed_window, embed_window_backward
from .numcore import Param

CHECKPOINT_MAGIC = "LQKT1"


# ---------------------------------------------------------------------------
# Configuration and parameters
# ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    """Width d, head count, window length L, FFN width, embedding width, vocab."""

    d: int = 32
    n_heads: int = 2
    seq_len: int = 128
    n_questions: int = 0
    d_ff: int = 0   # 0 -> 4 * d
    d_e: int = 0    # 0 -> d

    def __post_init__(self):
        if self.d_ff == 0:
            self.d_ff = 4 * self.d
        if self.d_e == 0:
            self.d_e = self.d
        if self.d % self.n_heads != 0:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.seq_len < 1:
            raise ValueError(f"seq_len must be >= 1, got {self.seq_len}")
        if self.n_questions < 1:
            raise ValueError(f"n_questions must be >= 1, got {self.n_questions}")

    @property
    def d_k(self) -> int:
        return self.d // self.n_heads

    def to_json(self) -> str:
        return json.dumps({
            "d": self.d, "n_heads": self.n_heads, "seq_len": self.seq_len,
            "n_questions": self.n_questions, "d_ff": self.d_ff, "d_e": self.d_e,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "ModelConfig":
        return cls(**json.loads(s))


@dataclass
class AttentionParams:
    wq: Param
    wk: Param
    wv: Param
    wo: Param

    @classmethod
    def init(cls, d: int, rng: np.random.Generator) -> "AttentionParams":
        xu = numcore.xavier_uniform
        return cls(
            wq=Param("encoder.attn.wq", xu(d, d, rng)),
            wk=Param("encoder.attn.wk", xu(d, d, rng)),
            wv=Param("encoder.attn.wv", xu(d, d, rng)),
            wo=Param("encoder.attn.wo", xu(d, d, rng)),
        )

    def params(self) -> list[Param]:
        return [self.wq, self.wk, self.wv, self.wo]


@dataclass
class EncoderParams:
    attn: AttentionParams
    ln1_gamma: Param
    ln1_beta: Param
    ffn_w1: Param
    ffn_b1: Param
    ffn_w2: Param
    ffn_b2: Param
    ln2_gamma: Param
    ln2_beta: Param

    @classmethod
    def init(cls, d: int, d_ff: int, rng: np.random.Generator) -> "EncoderParams":
        xu = numcore.xavier_uniform
        return cls(
            attn=AttentionParams.init(d, rng),
            ln1_gamma=Param("encoder.ln1_gamma", numcore.ones(1, d)),
            ln1_beta=Param("encoder.ln1_beta", numcore.zeros(1, d)),
            ffn_w1=Param("encoder.ffn_w1", xu(d, d_ff, rng)),
            ffn_b1=Param("encoder.ffn_b1", numcore.zeros(1, d_ff)),
            ffn_w2=Param("encoder.ffn_w2", xu(d_ff, d, rng)),
            ffn_b2=Param("encoder.ffn_b2", numcore.zeros(1, d)),
            ln2_gamma=Param("encoder.ln2_gamma", numcore.ones(1, d)),
            ln2_beta=Param("encoder.ln2_beta", numcore.zeros(1, d)),
        )

    def params(self) -> list[Param]:
        return self.attn.params() + [
            self.ln1_gamma, self.ln1_beta,
            self.ffn_w1, self.ffn_b1, self.ffn_w2, self.ffn_b2,
            self.ln2_gamma, self.ln2_beta,
        ]


_GATES = ("i", "f", "g", "o")


@dataclass
class LstmParams:
    """Input and hidden weights plus bias for each of the four gates."""

    w_x: dict
    w_h: dict
    b: dict

    @classmethod
    def init(cls, d: int, rng: np.random.Generator) -> "LstmParams":
        xu = numcore.xavier_uniform
        w_x = {g: Param(f"lstm.w_x{g}", xu(d, d, rng)) for g in _GATES}
        w_h = {g: Param(f"lstm.w_h{g}", xu(d, d, rng)) for g in _GATES}
        b = {g: Param(f"lstm.b_{g}", numcore.zeros(1, d)) for g in _GATES}
        return cls(w_x=w_x, w_h=w_h, b=b)

    def params(self) -> list[Param]:
        out = []
        for g in _GATES:
            out.extend([self.w_x[g], self.w_h[g], self.b[g]])
        return out

    def fused(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Gate matrices stacked column-wise in i,f,g,o order: (d,4d),(d,4d),(1,4d)."""
        wx = np.hstack([self.w_x[g].value for g in _GATES])
        wh = np.hstack([self.w_h[g].value for g in _GATES])
        b = np.hstack([self.b[g].value for g in _GATES])
        return wx, wh, b

    def add_fused_grads(self, dwx: np.ndarray, dwh: np.ndarray, db: np.ndarray) -> None:
        d = self.w_x["i"].value.shape[0]
        for k, g in enumerate(_GATES):
            self.w_x[g].grad += dwx[:, k * d:(k + 1) * d]
            self.w_h[g].grad += dwh[:, k * d:(k + 1) * d]
            self.b[g].grad += db[:, k * d:(k + 1) * d]


@dataclass
class HeadParams:
    w1: Param
    b1: Param
    w2: Param
    b2: Param

    @classmethod
    def init(cls, d: int, rng: np.random.Generator) -> "HeadParams":
        xu = numcore.xavier_uniform
        return cls(
            w1=Param("head.w1", xu(d, d, rng)),
            b1=Param("head.b1", numcore.zeros(1, d)),
            w2=Param("head.w2", xu(d, 1, rng)),
            b2=Param("head.b2", numcore.zeros(1, 1)),
        )

    def params(self) -> list[Param]:
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class ModelParams:
    config: ModelConfig
    embed: EmbedParams
    encoder: EncoderParams
    lstm: LstmParams
    head: HeadParams

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        return cls(
            config=config,
            embed=EmbedParams.init(config.n_questions, config.d_e, config.d, rng),
            encoder=EncoderParams.init(config.d, config.d_ff, rng),
            lstm=LstmParams.init(config.d, rng),
            head=HeadParams.init(config.d, rng),
        )

    def params(self) -> list[Param]:
        return (self.embed.params() + self.encoder.params()
                + self.lstm.params() + self.head.params())

    def zero_grads(self) -> None:
        numcore.zero_grads(self.params())

    def copy(self) -> "ModelParams":
        """Deep copy of values (fresh zero grads)."""
        clone = ModelParams.init(self.config, numcore.new_rng(0))
        for dst, src in zip(clone.params(), self.params()):
            dst.value[...] = src.value
        return clone


# ---------------------------------------------------------------------------
# Score-stage MAC accounting
# ---------------------------------------------------------------------------


class MacCounter:
    """Exact multiply-accumulate count for the attention score stage."""

    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        self.count += n

    def reset(self) -> None:
        self.count = 0


score_macs = MacCounter()


def attention_flops(L: int, d: int, n_heads: int, variant: str) -> int:
    """Analytic score-stage MACs: last_query is linear in L, full is quadratic."""
    d_k = d // n_heads
    if variant == "last_query":
        return n_heads * L * d_k
    if variant == "full":
        return n_heads * L * L * d_k
    raise ValueError(f"unknown variant {variant!r}")


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


def last_query_attention(
    x: np.ndarray, pad_mask: np.ndarray, p: AttentionParams, n_heads: int
) -> tuple[np.ndarray, tuple]:
    """Attend from the final position only: (L,d) -> (1,d) context.

    Per head the scores are a single length-L row (q_h K_h^T / sqrt(d_k));
    no L x L matrix exists anywhere on this path. Padded keys get weight
    exactly 0 via the masked softmax.
    """
    L, d = x.shape
    if pad_mask[L - 1]:
        raise ValueError("last position is padded; windows must end on a real event")
    d_k = d // n_heads
    scale = 1.0 / math.sqrt(d_k)
    q = x[-1:] @ p.wq.value          # (1, d)
    k = x @ p.wk.value               # (L, d)
    v = x @ p.wv.value               # (L, d)
    weights = np.zeros((n_heads, L))
    ctx = np.zeros((1, d))
    for h in range(n_heads):
        cols = slice(h * d_k, (h + 1) * d_k)
        scores = (q[:, cols] @ k[:, cols].T) * scale       # (1, L)
        score_macs.add(L * d_k)
        w_h = numcore.masked_row_softmax(scores, pad_mask)  # (1, L)
        weights[h] = w_h[0]
        ctx[:, cols] = w_h @ v[:, cols]
    out = ctx @ p.wo.value
    return out, (x, pad_mask, q, k, v, weights, ctx, scale)


def last_query_attention_backward(
    g: np.ndarray, cache: tuple, p: AttentionParams, n_heads: int
) -> np.ndarray:
    """Upstream (1,d) -> dL/dx (L,d); accumulates projection grads."""
    x, pad_mask, q, k, v, weights, ctx, scale = cache
    L, d = x.shape
    d_k = d // n_heads
    p.wo.grad += ctx.T @ g
    dctx = g @ p.wo.value.T
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    for h in range(n_heads):
        cols = slice(h * d_k, (h + 1) * d_k)
        w_h = weights[h:h + 1]                              # (1, L)
        dw = dctx[:, cols] @ v[:, cols].T                   # (1, L)
        dv[:, cols] = w_h.T @ dctx[:, cols]
        dscores = numcore.masked_row_softmax_backward(dw, w_h) * scale
        dq[:, cols] = dscores @ k[:, cols]
        dk[:, cols] = dscores.T @ q[:, cols]
    p.wq.grad += x[-1:].T @ dq
    p.wk.grad += x.T @ dk
    p.wv.grad += x.T @ dv
    dx = dk @ p.wk.value.T + dv @ p.wv.value.T
    dx[-1:] += dq @ p.wq.value.T
    return dx


def full_attention_reference(
    x: np.ndarray, pad_mask: np.ndarray, p: AttentionParams, n_heads: int
) -> np.ndarray:
    """All-positions multi-head attention with padded keys excluded.

    Quadratic in L by construction; serves as the correctness oracle for
    the last-query path and as the benchmark baseline. Forward only.
    """
    L, d = x.shape
    d_k = d // n_heads
    scale = 1.0 / math.sqrt(d_k)
    q = x @ p.wq.value
    k = x @ p.wk.value
    v = x @ p.wv.value
    ctx = np.zeros((L, d))
    for h in range(n_heads):
        cols = slice(h * d_k, (h + 1) * d_k)
        scores = (q[:, cols] @ k[:, cols].T) * scale        # (L, L)
        score_macs.add(L * L * d_k)
        w_h = numcore.masked_row_softmax(scores, pad_mask)
        ctx[:, cols] = w_h @ v[:, cols]
    return ctx @ p.wo.value


# ---------------------------------------------------------------------------
# Encoder block
# ---------------------------------------------------------------------------


def encoder_block(
    x: np.ndarray, pad_mask: np.ndarray, p: EncoderParams, n_heads: int
) -> tuple[np.ndarray, tuple]:
    """context -> broadcast residual -> layernorm -> FFN residual -> layernorm."""
    ctx, attn_cache = last_query_attention(x, pad_mask, p.attn, n_heads)
    r = numcore.broadcast_add_row(x, ctx)
    h1, ln1_cache = numcore.layernorm(r, p.ln1_gamma.value, p.ln1_beta.value)
    f_pre = h1 @ p.ffn_w1.value + p.ffn_b1.value
    f_act = numcore.relu(f_pre)
    f_out = f_act @ p.ffn_w2.value + p.ffn_b2.value
    out, ln2_cache = numcore.layernorm(h1 + f_out, p.ln2_gamma.value, p.ln2_beta.value)
    return out, (attn_cache, ln1_cache, h1, f_pre, f_act, ln2_cache)


def encoder_block_backward(
    g: np.ndarray, cache: tuple, p: EncoderParams, n_heads: int
) -> np.ndarray:
    attn_cache, ln1_cache, h1, f_pre, f_act, ln2_cache = cache
    dsum, dg2, db2 = numcore.layernorm_backward(g, ln2_cache)
    p.ln2_gamma.grad += dg2
    p.ln2_beta.grad += db2
    # FFN branch
    p.ffn_w2.grad += f_act.T @ dsum
    p.ffn_b2.grad += dsum.sum(axis=0, keepdims=True)
    df_act = dsum @ p.ffn_w2.value.T
    df_pre = numcore.relu_backward(df_act, f_pre)
    p.ffn_w1.grad += h1.T @ df_pre
    p.ffn_b1.grad += df_pre.sum(axis=0, keepdims=True)
    dh1 = dsum + df_pre @ p.ffn_w1.value.T
    dr, dg1, db1 = numcore.layernorm_backward(dh1, ln1_cache)
    p.ln1_gamma.grad += dg1
    p.ln1_beta.grad += db1
    dx, dctx = numcore.broadcast_add_row_backward(dr)
    dx = dx + last_query_attention_backward(dctx, attn_cache, p.attn, n_heads)
    return dx


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------


def lstm_forward(
    x: np.ndarray, p: LstmParams, start: int = 0
) -> tuple[np.ndarray, tuple]:
    """Run the recurrence from `start` to the end; h_0 = c_0 = 0.

    `start` skips a left-padded prefix so the hidden state depends only on
    real positions. Returns the final hidden state (1, d).
    """
    L, d = x.shape
    wx, wh, b = p.fused()
    steps = L - start
    h = np.zeros((1, d))
    c = np.zeros((1, d))
    hs = np.zeros((steps + 1, d))      # hs[t] is the state entering step t
    cs = np.zeros((steps + 1, d))
    gates = np.zeros((steps, 4 * d))   # post-activation i,f,g,o
    tcs = np.zeros((steps, d))
    for t in range(steps):
        z = x[start + t:start + t + 1] @ wx + h @ wh + b
        i = numcore.sigmoid(z[:, :d])
        f = numcore.sigmoid(z[:, d:2 * d])
        g_c = numcore.tanh(z[:, 2 * d:3 * d])
        o = numcore.sigmoid(z[:, 3 * d:])
        c = f * c + i * g_c
        tc = numcore.tanh(c)
        h = o * tc
        gates[t] = np.hstack([i, f, g_c, o])[0]
        hs[t + 1] = h[0]
        cs[t + 1] = c[0]
        tcs[t] = tc[0]
    return h, (x, start, wx, wh, hs, cs, gates, tcs)


def lstm_backward(g_h: np.ndarray, cache: tuple, p: LstmParams) -> np.ndarray:
    """Backprop through time from the final hidden state; -> dL/dx (L,d)."""
    x, start, wx, wh, hs, cs, gates, tcs = cache
    L, d = x.shape
    steps = L - start
    dwx = np.zeros_like(wx)
    dwh = np.zeros_like(wh)
    db = np.zeros((1, 4 * d))
    dx = np.zeros_like(x)
    dh = g_h.copy()
    dc = np.zeros((1, d))
    for t in range(steps - 1, -1, -1):
        i = gates[t:t + 1, :d]
        f = gates[t:t + 1, d:2 * d]
        g_c = gates[t:t + 1, 2 * d:3 * d]
        o = gates[t:t + 1, 3 * d:]
        tc = tcs[t:t + 1]
        c_prev = cs[t:t + 1]
        h_prev = hs[t:t + 1]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        di = dc * g_c
        df = dc * c_prev
        dg = dc * i
        dz = np.hstack([
            di * i * (1.0 - i),
            df * f * (1.0 - f),
            dg * (1.0 - g_c * g_c),
            do * o * (1.0 - o),
        ])
        x_t = x[start + t:start + t + 1]
        dwx += x_t.T @ dz
        dwh += h_prev.T @ dz
        db += dz
        dx[start + t] = (dz @ wx.T)[0]
        dh = dz @ wh.T
        dc = dc * f
    p.add_fused_grads(dwx, dwh, db)
    return dx


# ---------------------------------------------------------------------------
# Head and full model
# ---------------------------------------------------------------------------


def head_forward(h: np.ndarray, p: HeadParams) -> tuple[float, tuple]:
    a_pre = h @ p.w1.value + p.b1.value
    a = numcore.relu(a_pre)
    logit = a @ p.w2.value + p.b2.value
    return float(logit[0, 0]), (h, a_pre, a)


def head_backward(d_logit: float, cache: tuple, p: HeadParams) -> np.ndarray:
    h, a_pre, a = cache
    dl = np.array([[d_logit]])
    p.w2.grad += a.T @ dl
    p.b2.grad += dl
    da = dl @ p.w2.value.T
    dpre = numcore.relu_backward(da, a_pre)
    p.w1.grad += h.T @ dpre
    p.b1.grad += dpre.sum(axis=0, keepdims=True)
    return dpre @ p.w1.value.T


def forward_logit(w: FeatureWindow, params: ModelParams) -> tuple[float, tuple]:
    """Embed -> encoder -> LSTM over real positions -> head. Returns the logit."""
    x, emb_cache = embed_window(w, params.embed)
    enc, enc_cache = encoder_block(x, w.pad_mask, params.encoder, params.config.n_heads)
    start = int(w.pad_mask.sum())      # padding is a contiguous prefix
    h, lstm_cache = lstm_forward(enc, params.lstm, start=start)
    logit, head_cache = head_forward(h, params.head)
    return logit, (emb_cache, enc_cache, lstm_cache, head_cache)


def backward_from_logit(d_logit: float, cache: tuple, params: ModelParams) -> None:
    """Accumulate dL/dtheta for every parameter, given dL/dlogit."""
    emb_cache, enc_cache, lstm_cache, head_cache = cache
    dh = head_backward(d_logit, head_cache, params.head)
    denc = lstm_backward(dh, lstm_cache, params.lstm)
    dx = encoder_block_backward(denc, enc_cache, params.encoder, params.config.n_heads)
    embed_window_backward(dx, emb_cache, params.embed)


def _sigmoid_scalar(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def forward(w: FeatureWindow, params: ModelParams) -> float:
    """Probability that the window's final question is answered correctly."""
    logit, _ = forward_logit(w, params)
    return _sigmoid_scalar(logit)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str, params: ModelParams) -> None:
    """Header line with format version + config, then named raw float64 blocks."""
    with open(path, "wb") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} {params.config.to_json()}\n".encode("utf-8"))
        for p in params.params():
            rows, cols = p.value.shape
            fh.write(f"{p.name} {rows} {cols}\n".encode("utf-8"))
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
            fh.write(b"\n")


def load_checkpoint(path: str) -> ModelParams:
    with open(path, "rb") as fh:
        header = fh.readline().decode("utf-8").rstrip("\n")
        magic, _, cfg_json = header.partition(" ")
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (header {magic!r})")
        config = ModelConfig.from_json(cfg_json)
        params = ModelParams.init(config, numcore.new_rng(0))
        for p in params.params():
            line = fh.readline().decode("utf-8").rstrip("\n")
            if not line:
                raise ValueError(f"{path}: truncated before block {p.name!r}")
            name, rows_s, cols_s = line.split(" ")
            rows, cols = int(rows_s), int(cols_s)
            if name != p.name or (rows, cols) != p.value.shape:
                raise ValueError(
                    f"{path}: expected block {p.name} {p.value.shape}, got {name} ({rows}, {cols})"
                )
            raw = fh.read(rows * cols * 8)
            if len(raw) != rows * cols * 8:
                raise ValueError(f"{path}: truncated values in block {name!r}")
            p.value[...] = np.frombuffer(raw, dtype="<f8").reshape(rows, cols)
            fh.read(1)  # trailing newline
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after final block")
    return params
