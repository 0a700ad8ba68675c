"""Forward network: self-refine smoothing, encoders, co-attention fusion, boundary heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import (
    Tensor,
    bilstm,
    bilstm_params,
    clamp_min,
    concat,
    cosine_matrix,
    embedding,
    init_uniform,
    lstm_params,
    lstm_sequence,
    matmul,
    self_attention,
    softmax,
    transpose,
)
from .autograd.nn import attention_params, zeros

REFINE_EPS = 1e-8


@dataclass
class SelfRefineConfig:
    sigma: float = 5.0
    iterations: int = 3
    row_normalize: bool = True

    def validate(self):
        if self.sigma <= 0:
            raise ValueError("sigma_refine must be > 0")
        if self.iterations < 0:
            raise ValueError("refine_iterations must be >= 0")
        return self


@dataclass
class ModelConfig:
    D: int = 32
    H: int = 16
    vocab_size: int = 64
    embed_dim: int = 0  # 0 means same as D
    refine: SelfRefineConfig = None

    def __post_init__(self):
        if self.refine is None:
            self.refine = SelfRefineConfig()
        if not self.embed_dim:
            self.embed_dim = self.D


def temporal_kernel(T, sigma, dtype=np.float64):
    d = np.arange(T)[:, None] - np.arange(T)[None, :]
    return np.exp(-(d * d) / (2.0 * sigma * sigma)).astype(dtype)


def self_refine(x, cfg=None):
    """Smooth frames over a graph weighted by temporal proximity times cosine similarity.

    ``x`` is ``(T, D)`` or ``(B, T, D)``. With ``row_normalize`` the graph
    weights are clamped at zero and each row rescaled to sum to one, so every
    round is a convex combination of frames.
    """
    cfg = cfg or SelfRefineConfig()
    x = x if isinstance(x, Tensor) else Tensor(x)
    if cfg.iterations == 0:
        return x
    tem = Tensor(temporal_kernel(x.shape[-2], cfg.sigma, x.dtype.type))
    for _ in range(cfg.iterations):
        e = tem * cosine_matrix(x, x)
        if cfg.row_normalize:
            e = clamp_min(e, 0.0)
            e = e / (e.sum(axis=-1, keepdims=True) + REFINE_EPS)
        x = matmul(e, x)
    return x


def init_params(cfg, seed=0, dtype=np.float64):
    """Fresh parameter dict, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    D, H, E = cfg.D, cfg.H, cfg.embed_dim
    p = {"emb": Tensor(rng.normal(0.0, 1.0, (cfg.vocab_size, E)), requires_grad=True, dtype=dtype, name="emb")}
    p.update(attention_params(rng, D, dtype, "vattn"))
    p.update(bilstm_params(rng, D, H, dtype, "vlstm"))
    p["vproj.w"] = init_uniform(rng, (2 * H, D), 2 * H, dtype, "vproj.w")
    p["vproj.b"] = zeros(D, dtype, "vproj.b")
    p.update(attention_params(rng, E, dtype, "qattn"))
    p.update(bilstm_params(rng, E, H, dtype, "qlstm"))
    p["qproj.w"] = init_uniform(rng, (2 * H, D), 2 * H, dtype, "qproj.w")
    p["qproj.b"] = zeros(D, dtype, "qproj.b")
    p["fuse.ws"] = init_uniform(rng, (D, D), D, dtype, "fuse.ws")
    p.update(bilstm_params(rng, 4 * D, H, dtype, "flstm"))
    p["fproj.w"] = init_uniform(rng, (2 * H, D), 2 * H, dtype, "fproj.w")
    p["fproj.b"] = zeros(D, dtype, "fproj.b")
    for head in ("start", "end"):
        p.update(lstm_params(rng, D, H, dtype, f"{head}.lstm"))
        p[f"{head}.w"] = init_uniform(rng, (D + H,), D + H, dtype, f"{head}.w")
        p[f"{head}.b"] = zeros(1, dtype, f"{head}.b")
    return p


def cast_params(params, dtype):
    return {k: Tensor(v.data, requires_grad=True, dtype=dtype, name=k) for k, v in params.items()}


def encode_video(frames, params, cfg=None):
    """self-refine -> self-attention -> BiLSTM -> linear, output ``(..., T, D)``."""
    refine = cfg.refine if isinstance(cfg, ModelConfig) else cfg
    x = self_refine(frames, refine)
    x = self_attention(x, params, "vattn")
    x = bilstm(x, params, "vlstm")
    return matmul(x, params["vproj.w"]) + params["vproj.b"]


def encode_query(tokens, params, lengths=None):
    """Token ids ``(N,)`` or padded ``(B, N)`` -> ``(..., N, D)``.

    ``lengths`` gives the valid prefix per row of a padded batch.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    x = embedding(params["emb"], tokens)
    mask = None
    if lengths is not None:
        mask = np.arange(tokens.shape[-1])[None, :] < np.asarray(lengths)[:, None]
    x = self_attention(x, params, "qattn", key_mask=mask)
    x = bilstm(x, params, "qlstm", lengths=lengths)
    return matmul(x, params["qproj.w"]) + params["qproj.b"]


def co_attention(video, query, params, query_mask=None):
    """Similarity ``S``, row/column softmaxes and the attended features ``A``, ``B``."""
    qw = matmul(query, params["fuse.ws"])
    s = matmul(video, transpose(qw))
    row_mask = None if query_mask is None else np.asarray(query_mask, bool)[..., None, :]
    s_r = softmax(s, axis=-1, mask=row_mask)
    s_c = softmax(s, axis=-2)
    a = matmul(s_r, qw)
    b = matmul(matmul(s_r, transpose(s_c)), video)
    return {"S": s, "S_r": s_r, "S_c": s_c, "A": a, "B": b}


def co_attention_fuse(video, query, params, query_mask=None):
    """Query-guided video features ``(..., T, D)``."""
    att = co_attention(video, query, params, query_mask)
    a, b = att["A"], att["B"]
    x = concat([video, a, video * a, video * b], axis=-1)
    x = bilstm(x, params, "flstm")
    return matmul(x, params["fproj.w"]) + params["fproj.b"]


def boundary_scores(fused, params, head):
    h = lstm_sequence(fused, params[f"{head}.lstm.wx"], params[f"{head}.lstm.wh"], params[f"{head}.lstm.b"])
    return matmul(concat([fused, h], axis=-1), params[f"{head}.w"]) + params[f"{head}.b"]


def grounding_head(fused, params):
    """Per-frame start and end scores from causal LSTMs; returns ``(C_s, C_e)``."""
    return boundary_scores(fused, params, "start"), boundary_scores(fused, params, "end")


def pad_tokens(queries):
    """Right-pad token sequences with 0; returns ``(ids (B, N_max), lengths (B,))``."""
    lengths = np.array([len(q) for q in queries], dtype=np.int64)
    ids = np.zeros((len(queries), int(lengths.max())), dtype=np.int64)
    for i, q in enumerate(queries):
        ids[i, :len(q)] = q
    return ids, lengths


def forward(params, frames, tokens, lengths=None, cfg=None):
    """Full network on a batch; frames ``(B, T, D)``, tokens ``(B, N)``.

    Returns ``(fused, start_scores, end_scores)``.
    """
    frames = frames if isinstance(frames, Tensor) else Tensor(frames, dtype=params["emb"].dtype.type)
    video = encode_video(frames, params, cfg)
    query = encode_query(tokens, params, lengths)
    qmask = None
    if lengths is not None:
        qmask = np.arange(np.asarray(tokens).shape[-1])[None, :] < np.asarray(lengths)[:, None]
    fused = co_attention_fuse(video, query, params, qmask)
    c_s, c_e = grounding_head(fused, params)
    return fused, c_s, c_e


def predict_topn(start, end, n=1):
    """Top-``n`` spans ``(s, e, confidence)`` over all ``s <= e`` by summed boundary score.

    Ties are broken by smaller ``s`` and then smaller ``e``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    start = np.asarray(start.data if isinstance(start, Tensor) else start, dtype=np.float64)
    end = np.asarray(end.data if isinstance(end, Tensor) else end, dtype=np.float64)
    s_idx, e_idx = np.triu_indices(len(start))
    conf = start[s_idx] + end[e_idx]
    order = np.lexsort((e_idx, s_idx, -conf))[:n]
    return [(int(s_idx[k]), int(e_idx[k]), float(conf[k])) for k in order]
