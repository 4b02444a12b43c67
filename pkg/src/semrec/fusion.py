"""Gated variable-depth cross-modal fusion of item ID embeddings.

Each item owns a learnable query vector. Modality features are projected to
the shared width, L2-normalized and softly aligned to the query; a stack of
cross-attention blocks then updates the query, each followed by a sigmoid
gate that both interpolates the residual update and decides early exit.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .nn import MLP, LayerNorm, Linear, Module, MultiHeadAttention

log = logging.getLogger(__name__)


@dataclass
class FusionConfig:
    embed_dim: int = 64
    max_depth: int = 5
    n_heads: int = 4
    temperature: float = 0.07
    halt_threshold: float = 0.5
    # kept small: at 0.1 the consistency term outweighs alignment at d=64,
    # since LayerNorm outputs have norm sqrt(d)
    consistency_weight: float = 0.01
    fixed_depth_mode: bool = False
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 128
    ffn_mult: int = 2

    def validate(self):
        if self.max_depth < 1:
            raise ad.ConfigError("max_depth must be >= 1")
        if self.temperature <= 0:
            raise ad.ConfigError("temperature must be > 0")
        if not 0.0 < self.halt_threshold < 1.0:
            raise ad.ConfigError("halt_threshold must lie in (0, 1)")
        if self.consistency_weight < 0:
            raise ad.ConfigError("consistency_weight must be >= 0")
        if self.batch_size < 2:
            raise ad.ConfigError("batch_size must be >= 2 for in-batch negatives")


@dataclass
class GateTrace:
    depth_used: np.ndarray  # (n_items,) int
    gate_means: list  # per layer: (n_items,) float, NaN where the item had halted

    def depth_histogram(self, max_depth):
        return {d: int((self.depth_used == d).sum()) for d in range(1, max_depth + 1)}

    def summary(self, max_depth):
        return {
            "depth_histogram": self.depth_histogram(max_depth),
            "mean_depth": float(self.depth_used.mean()),
            "median_depth": float(np.median(self.depth_used)),
            "mean_gate_per_layer": [float(np.nanmean(g)) if np.isfinite(g).any() else None for g in self.gate_means],
        }


class FusionBlock(Module):
    def __init__(self, rng, dim, n_heads, ffn_mult, dtype):
        self.attn = MultiHeadAttention(rng, dim, n_heads, dtype)
        self.ln1 = LayerNorm(dim, dtype)
        self.ffn = MLP(rng, [dim, dim * ffn_mult, dim], dtype)
        self.ln2 = LayerNorm(dim, dtype)
        self.gate = MLP(rng, [dim, max(dim // 2, 1), dim], dtype)

    def candidate(self, h, kv):
        """TransformerBlock(h, kv): cross-attention, then feed-forward."""
        att = self.attn(ad.reshape(h, (h.shape[0], 1, h.shape[1])), kv)
        x = self.ln1(h + ad.reshape(att, h.shape))
        return self.ln2(x + self.ffn(x))


class FusionState(Module):
    def __init__(self, n_items, modality_dims, cfg: FusionConfig, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        d = cfg.embed_dim
        self.cfg = cfg
        self.queries = ad.parameter((rng.standard_normal((n_items, d)) / np.sqrt(d)).astype(dtype))
        self.projections = [Linear(rng, dm, d, dtype) for dm in modality_dims]
        self.blocks = [FusionBlock(rng, d, cfg.n_heads, cfg.ffn_mult, dtype) for _ in range(cfg.max_depth)]

    @property
    def dtype(self):
        return self.queries.dtype


def align_modality(q, feats, temperature):
    """Similarity-weighted pooling of one modality's vectors.

    ``q`` is (B, d); ``feats`` is (B, J, d). Weights are
    softmax_j(q . x_j / temperature); returns (pooled (B, d), weights (B, J)).
    """
    if feats.shape[-2] == 0:
        raise ValueError("align_modality needs at least one feature vector")
    b, j, d = feats.shape
    scores = ad.reshape(ad.matmul(feats, ad.reshape(q, (b, d, 1))), (b, j))
    w = ad.softmax(scores * (1.0 / temperature), axis=-1)
    pooled = ad.reshape(ad.matmul(ad.reshape(w, (b, 1, j)), feats), (b, d))
    return pooled, w


def fusion_layer(h_prev, kv, block: FusionBlock, gate_override=None):
    """One gated fusion step: returns (h_next, gate)."""
    cand = block.candidate(h_prev, kv)
    g = ad.sigmoid(block.gate(cand)) if gate_override is None else ad.Tensor(
        np.broadcast_to(np.asarray(gate_override, dtype=cand.dtype), cand.shape))
    return g * cand + (1.0 - g) * h_prev, g


def aligned_modalities(state: FusionState, idx, modal_feats):
    """Project, normalize and align each modality for items ``idx``.

    ``modal_feats`` is a list (per modality) of arrays shaped (n_items, d_m)
    or (n_items, J, d_m).
    """
    q = ad.take_rows(state.queries, idx)
    out = []
    for proj, feats in zip(state.projections, modal_feats):
        x = np.asarray(feats[idx], dtype=state.dtype)
        if x.ndim == 2:
            x = x[:, None, :]
        px = ad.l2_normalize_rows(proj(ad.Tensor(x)))
        pooled, _ = align_modality(q, px, state.cfg.temperature)
        out.append(pooled)
    return q, out


def dynamic_forward(state: FusionState, idx, modal_feats, halt_threshold=None, fixed_depth=None):
    """Run the gated stack for items ``idx``.

    Returns (h, aligned, q, trace). Items stop after the first layer whose
    mean gate falls below the threshold; in fixed-depth mode all layers run.
    """
    cfg = state.cfg
    thr = cfg.halt_threshold if halt_threshold is None else halt_threshold
    fixed = cfg.fixed_depth_mode if fixed_depth is None else fixed_depth
    q, aligned = aligned_modalities(state, idx, modal_feats)
    kv = ad.stack(aligned, axis=1)
    n = len(idx)
    h = q
    active = np.ones(n, dtype=bool)
    depth = np.zeros(n, dtype=np.int64)
    gate_means = []
    for block in state.blocks:
        h_next, g = fusion_layer(h, kv, block)
        h = ad.where(active[:, None], h_next, h)
        gm = g.data.mean(axis=1).astype(np.float64)
        gate_means.append(np.where(active, gm, np.nan))
        depth += active
        if not fixed:
            active = active & (gm >= thr)
        if not active.any():
            break
    return h, aligned, q, GateTrace(depth, gate_means)


def info_nce(a, b, temperature):
    """Symmetric InfoNCE with in-batch negatives over row-normalized a, b."""
    if a.shape[0] < 2 or a.shape[0] != b.shape[0]:
        raise ValueError(f"info_nce needs equal batches of size >= 2, got {a.shape[0]} and {b.shape[0]}")
    logits = ad.matmul(a, b.T) * (1.0 / temperature)
    diag = np.arange(a.shape[0])
    ab = ad.cross_entropy(logits, diag).mean()
    ba = ad.cross_entropy(logits.T, diag).mean()
    return (ab + ba) * 0.5


def align_loss(h, x_text, x_image, q, consistency_weight, temperature, extra=()):
    """InfoNCE(h,t) + InfoNCE(h,v) + InfoNCE(t,v) + w * ||h - sg(q)||^2.

    ``extra`` holds further aligned channels (e.g. structural) that are
    contrasted against ``h`` as well.
    """
    hn = ad.l2_normalize_rows(h)
    tn = ad.l2_normalize_rows(x_text)
    vn = ad.l2_normalize_rows(x_image)
    loss = info_nce(hn, tn, temperature) + info_nce(hn, vn, temperature) + info_nce(tn, vn, temperature)
    for x in extra:
        loss = loss + info_nce(hn, ad.l2_normalize_rows(x), temperature)
    if consistency_weight:
        resid = h - ad.stop_gradient(q)
        loss = loss + ad.sum_squares(resid, axis=-1).mean() * consistency_weight
    return loss


def batch_loss(state, idx, modal_feats):
    h, aligned, q, trace = dynamic_forward(state, idx, modal_feats)
    loss = align_loss(h, aligned[0], aligned[1], q, state.cfg.consistency_weight,
                      state.cfg.temperature, extra=aligned[2:])
    return loss, trace


@dataclass
class InjectionResult:
    state: FusionState
    item_ids: list
    h_table: np.ndarray
    trace: GateTrace
    epoch_losses: list = field(default_factory=list)


def modality_arrays(features, item_ids):
    first = features[item_ids[0]]
    n_mod = len(first.modalities())
    return [np.stack([features[i].modalities()[m] for i in item_ids]) for m in range(n_mod)]


def embed_all(state, modal_feats, batch=1024):
    n = modal_feats[0].shape[0]
    hs, depths, gms = [], [], []
    for start in range(0, n, batch):
        idx = np.arange(start, min(start + batch, n))
        h, _, _, tr = dynamic_forward(state, idx, modal_feats)
        hs.append(h.data)
        depths.append(tr.depth_used)
        gms.append(tr.gate_means + [np.full(len(idx), np.nan)] * (state.cfg.max_depth - len(tr.gate_means)))
    gate_means = [np.concatenate([g[l] for g in gms]) for l in range(state.cfg.max_depth)]
    return np.concatenate(hs), GateTrace(np.concatenate(depths), gate_means)


def train_injection(features, cfg: FusionConfig, seed=0, item_ids=None, dtype=np.float32):
    """Minibatch Adam on the alignment loss; returns per-item fused embeddings."""
    cfg.validate()
    item_ids = sorted(features) if item_ids is None else list(item_ids)
    modal_feats = modality_arrays(features, item_ids)
    n = len(item_ids)
    if n < 2:
        raise ValueError("need at least two items for contrastive training")
    state = FusionState(n, [m.shape[-1] for m in modal_feats], cfg, seed=seed, dtype=dtype)
    opt = ad.Adam(state.named_parameters(), lr=cfg.lr)
    losses = []
    last_good = state.state_dict()
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            opt.zero_grad()
            loss, _ = batch_loss(state, idx, modal_feats)
            if not np.isfinite(loss.data):
                state.load_state_dict(last_good)
                raise ad.TrainingDiverged(f"fusion loss became non-finite at epoch {epoch + 1}")
            ad.backward(loss)
            opt.step()
            total += float(loss.data) * len(idx)
            count += len(idx)
        losses.append(total / max(count, 1))
        last_good = state.state_dict()
        log.info("inject epoch %d loss %.4f", epoch + 1, losses[-1])
    h_table, trace = embed_all(state, modal_feats)
    return InjectionResult(state, item_ids, h_table, trace, losses)
