"""Residual vector quantization of fused item embeddings into semantic IDs."""
from __future__ import annotations

import itertools
import logging
import re
import string
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .nn import MLP, Module

log = logging.getLogger(__name__)

LETTERS = string.ascii_lowercase


class TokenParseError(ValueError):
    pass


class ReallocationError(RuntimeError):
    pass


@dataclass
class QuantizerConfig:
    levels: int = 4
    codebook_size: int = 256
    code_dim: int = 32
    beta: float = 0.25
    lr: float = 1e-3
    batch_size: int = 1024
    epochs: int = 100
    hidden: tuple = (128,)
    kmeans_iters: int = 20
    dead_code_restart: bool = True
    realloc_scope: str = "group"  # or "global"

    def validate(self):
        if self.levels < 1 or self.levels > len(LETTERS):
            raise ad.ConfigError(f"levels must be in 1..{len(LETTERS)}")
        if self.codebook_size < 2:
            raise ad.ConfigError("codebook_size must be >= 2")
        if self.code_dim < 1:
            raise ad.ConfigError("code_dim must be >= 1")
        if self.beta <= 0:
            raise ad.ConfigError("beta must be > 0")
        if self.realloc_scope not in ("group", "global"):
            raise ad.ConfigError(f"realloc_scope must be 'group' or 'global', got {self.realloc_scope!r}")


@dataclass(frozen=True)
class SemanticId:
    item_id: str
    indices: tuple


@dataclass
class Codebook:
    level: int  # 1-based
    codewords: np.ndarray
    usage: np.ndarray

    @property
    def letter(self):
        return LETTERS[self.level - 1]


class RqVae(Module):
    def __init__(self, input_dim, cfg: QuantizerConfig, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        hidden = list(cfg.hidden)
        self.encoder = MLP(rng, [input_dim] + hidden + [cfg.code_dim], dtype)
        self.decoder = MLP(rng, [cfg.code_dim] + hidden[::-1] + [input_dim], dtype)
        self.codebooks = [ad.parameter(rng.standard_normal((cfg.codebook_size, cfg.code_dim)).astype(dtype) * 0.1)
                          for _ in range(cfg.levels)]

    def codebook_arrays(self):
        return [c.data for c in self.codebooks]

    def encode(self, h):
        return self.encoder(ad.Tensor(np.asarray(h, dtype=self.codebooks[0].dtype))).data


# ---------------------------------------------------------------- quantize


def nearest(r, codewords):
    """Index of the nearest codeword for each row of ``r``; ties -> lowest."""
    d = ((r[:, None, :] - codewords[None, :, :]) ** 2).sum(axis=-1)
    return d.argmin(axis=1)


def quantize(z, codebooks):
    """Greedy residual quantization.

    ``z`` is (n, c) or (c,). Returns (indices (n, K), codewords (n, K, c),
    residuals (n, K + 1, c)) where residuals[:, 0] = z and
    residuals[:, k] = residuals[:, k - 1] - codewords[:, k - 1].
    """
    single = np.ndim(z) == 1
    z = np.atleast_2d(np.asarray(z))
    n, c = z.shape
    K = len(codebooks)
    idx = np.zeros((n, K), dtype=np.int64)
    words = np.zeros((n, K, c), dtype=z.dtype)
    resid = np.zeros((n, K + 1, c), dtype=z.dtype)
    resid[:, 0] = z
    r = z
    for k, cb in enumerate(codebooks):
        i = nearest(r, cb)
        idx[:, k] = i
        words[:, k] = cb[i]
        r = r - cb[i]
        resid[:, k + 1] = r
    if single:
        return idx[0], words[0], resid[0]
    return idx, words, resid


def recon_loss(h, h_hat):
    """Per-item squared reconstruction error, averaged over the batch."""
    return ad.sum_squares(h - h_hat, axis=-1).mean()


def rq_loss(residual_inputs, selected, beta):
    """Codebook + commitment terms summed over levels, batch-averaged.

    ``residual_inputs[k]`` is the residual entering level k, ``selected[k]``
    the chosen codeword rows (gradients flow into the codebook).
    """
    total = None
    for r, e in zip(residual_inputs, selected):
        term = (ad.sum_squares(ad.stop_gradient(r) - e, axis=-1)
                + ad.sum_squares(r - ad.stop_gradient(e), axis=-1) * beta).mean()
        total = term if total is None else total + term
    return total


def rqvae_forward(model: RqVae, h):
    """Returns (total loss, recon loss, rq loss, indices)."""
    h = h if isinstance(h, ad.Tensor) else ad.Tensor(np.asarray(h, dtype=model.codebooks[0].dtype))
    z = model.encoder(h)
    idx, _, _ = quantize(z.data, model.codebook_arrays())
    r = z
    resid_in, selected = [], []
    for k, cb in enumerate(model.codebooks):
        e = ad.take_rows(cb, idx[:, k])
        resid_in.append(r)
        selected.append(e)
        r = r - ad.stop_gradient(e)
    z_q = selected[0]
    for e in selected[1:]:
        z_q = z_q + e
    # straight-through: value of z_q, gradient of z
    z_st = z + ad.stop_gradient(z_q - z)
    h_hat = model.decoder(z_st)
    lrec = recon_loss(h, h_hat)
    lrq = rq_loss(resid_in, selected, model.cfg.beta)
    return lrec + lrq, lrec, lrq, idx


# ---------------------------------------------------------------- init


def kmeans_pp(points, k, rng):
    """k-means++ seeding; duplicates padded with jittered points if needed."""
    n = len(points)
    centers = [points[rng.integers(n)]]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    while len(centers) < k:
        total = d2.sum()
        if total <= 0:
            break
        nxt = points[rng.choice(n, p=d2 / total)]
        centers.append(nxt)
        d2 = np.minimum(d2, ((points - nxt) ** 2).sum(axis=1))
    centers = np.array(centers)
    if len(centers) < k:
        scale = points.std() if points.std() > 0 else 1.0
        extra = points[rng.integers(n, size=k - len(centers))]
        extra = extra + rng.standard_normal(extra.shape) * 1e-3 * scale
        centers = np.concatenate([centers, extra])
    return centers


def kmeans(points, k, iters, rng):
    centers = kmeans_pp(points, k, rng)
    for _ in range(iters):
        assign = nearest(points, centers)
        moved = False
        for j in range(k):
            members = points[assign == j]
            if len(members):
                new = members.mean(axis=0)
                moved |= not np.array_equal(new, centers[j])
                centers[j] = new
        if not moved:
            break
    return centers


def init_codebooks(model: RqVae, h_all, rng):
    """Seed each level by k-means on the residuals left by earlier levels."""
    r = model.encode(h_all).astype(np.float64)
    for cb in model.codebooks:
        centers = kmeans(r, cb.shape[0], model.cfg.kmeans_iters, rng)
        cb.data = centers.astype(cb.dtype)
        r = r - centers[nearest(r, centers)]


# ---------------------------------------------------------------- training


@dataclass
class QuantizerResult:
    model: RqVae
    item_ids: list
    indices: np.ndarray  # (n, K) before reallocation
    residuals: np.ndarray  # (n, K + 1, c)
    epoch_losses: list = field(default_factory=list)
    epoch_recon: list = field(default_factory=list)

    def codebooks(self):
        usage = [np.bincount(self.indices[:, k], minlength=self.model.cfg.codebook_size)
                 for k in range(self.model.cfg.levels)]
        return [Codebook(k + 1, cb.data.copy(), usage[k]) for k, cb in enumerate(self.model.codebooks)]


def train_rqvae(h_table, cfg: QuantizerConfig, seed=0, item_ids=None, dtype=np.float32):
    cfg.validate()
    h_table = np.asarray(h_table, dtype=dtype)
    n = len(h_table)
    item_ids = list(item_ids) if item_ids is not None else [str(i) for i in range(n)]
    model = RqVae(h_table.shape[1], cfg, seed=seed, dtype=dtype)
    init_codebooks(model, h_table, np.random.default_rng([seed, 1]))
    opt = ad.Adam(model.named_parameters(), lr=cfg.lr)
    losses, recons = [], []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([seed, 2, epoch])
        order = rng.permutation(n)
        usage = np.zeros((cfg.levels, cfg.codebook_size), dtype=np.int64)
        tot = rec = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            loss, lrec, _, codes = rqvae_forward(model, h_table[idx])
            if not np.isfinite(loss.data):
                raise ad.TrainingDiverged(f"rq-vae loss became non-finite at epoch {epoch + 1}")
            ad.backward(loss)
            opt.step()
            for k in range(cfg.levels):
                usage[k] += np.bincount(codes[:, k], minlength=cfg.codebook_size)
            tot += float(loss.data) * len(idx)
            rec += float(lrec.data) * len(idx)
        losses.append(tot / n)
        recons.append(rec / n)
        if cfg.dead_code_restart and epoch < cfg.epochs - 1:
            _restart_dead(model, h_table, usage, rng)
        log.debug("rqvae epoch %d loss %.5f recon %.5f", epoch + 1, losses[-1], recons[-1])
    z = model.encode(h_table)
    indices, _, residuals = quantize(z, model.codebook_arrays())
    return QuantizerResult(model, item_ids, indices, residuals, losses, recons)


def _restart_dead(model, h_table, usage, rng):
    """Reseed codewords unused for a whole epoch from random residuals."""
    batch = h_table[rng.choice(len(h_table), size=min(len(h_table), model.cfg.batch_size), replace=False)]
    z = model.encode(batch)
    _, _, resid = quantize(z, model.codebook_arrays())
    for k, cb in enumerate(model.codebooks):
        dead = np.flatnonzero(usage[k] == 0)
        if len(dead):
            src = resid[rng.integers(len(resid), size=len(dead)), k]
            cb.data[dead] = src


# ---------------------------------------------------------------- collisions


def detect_collisions(sid_table):
    """Groups of item ids (sorted) that share an index tuple, ordered by first id."""
    by_code = defaultdict(list)
    for iid, code in sid_table.items():
        by_code[tuple(code)].append(iid)
    groups = [sorted(g) for g in by_code.values() if len(g) > 1]
    return sorted(groups)


def level_distances(residual_inputs, codebooks):
    """D[i, k, j] = ||residual entering level k - codeword j of level k||^2."""
    return np.stack([((residual_inputs[:, k, None, :] - cb[None]) ** 2).sum(-1) for k, cb in enumerate(codebooks)],
                    axis=1)


def reallocate(sid_table, residuals, codebooks, scope="group"):
    """Resolve code collisions; returns a new item -> index-tuple table.

    ``residuals`` maps item id -> (K + 1, c) residual stages from
    :func:`quantize`. Within each colliding group, items are ranked by their
    minimum distance at the last level. The rank-1 item keeps the shared
    code; every other item takes its nearest last-level codeword whose full
    code is still free. When every last-level option is taken, the search
    backs up one level at a time and also re-chooses the later positions, so
    a free code is always found when the catalog fits in m**K slots. Codes of all items count as taken, so the result is
    injective. ``scope="global"`` ranks all colliding items in one pool
    instead of group by group.
    """
    K = len(codebooks)
    m = codebooks[0].shape[0]
    if len(sid_table) > m ** K:
        raise ReallocationError(f"{len(sid_table)} items cannot have unique codes in {m}^{K} slots")
    if scope not in ("group", "global"):
        raise ValueError(f"scope must be 'group' or 'global', got {scope!r}")
    groups = detect_collisions(sid_table)
    out = {iid: tuple(int(x) for x in code) for iid, code in sid_table.items()}
    if not groups:
        return out
    occupied = set(out.values())
    batches = groups if scope == "group" else [sorted(i for g in groups for i in g)]
    for members in batches:
        res_in = np.stack([residuals[i][:K] for i in members])
        dist = level_distances(res_in, codebooks)
        order_lists = np.argsort(dist, axis=2, kind="stable")
        rank = np.argsort(dist[:, K - 1].min(axis=1), kind="stable")
        keepers = set()
        for j in rank:
            iid = members[j]
            code = list(out[iid])
            if tuple(code) not in keepers:
                keepers.add(tuple(code))
                continue
            placed = None
            for level in range(K - 1, -1, -1):
                # keep the prefix above ``level``; the position at ``level``
                # and everything after it follow this item's preference order
                prefs = [order_lists[j, k] for k in range(level, K)]
                for tail in itertools.product(*prefs):
                    trial = tuple(code[:level]) + tuple(int(x) for x in tail)
                    if trial not in occupied:
                        placed = trial
                        break
                if placed is not None:
                    break
            if placed is None:
                raise ReallocationError(f"no free code for item {iid}")
            out[iid] = placed
            occupied.add(placed)
    return out


# ---------------------------------------------------------------- tokens


def serialize(indices):
    """(2, 3, 1, 6) -> '<a_2><b_3><c_1><d_6>'."""
    if isinstance(indices, SemanticId):
        indices = indices.indices
    return "".join(f"<{LETTERS[k]}_{int(i)}>" for k, i in enumerate(indices))


_TOKEN = re.compile(r"<([a-z])_(\d+)>")


def parse_token_string(s, levels=None, codebook_size=None, item_id=""):
    pos = 0
    indices = []
    while pos < len(s):
        m = _TOKEN.match(s, pos)
        if not m:
            raise TokenParseError(f"malformed token at offset {pos}: {s[pos:pos + 12]!r}")
        letter, num = m.group(1), int(m.group(2))
        expected = LETTERS[len(indices)]
        if letter != expected:
            raise TokenParseError(f"out-of-order level in token {m.group(0)!r}: expected level {expected!r}")
        if codebook_size is not None and num >= codebook_size:
            raise TokenParseError(f"index out of range in token {m.group(0)!r}: codebook size {codebook_size}")
        indices.append(num)
        pos = m.end()
    if not indices:
        raise TokenParseError("empty token string")
    if levels is not None and len(indices) != levels:
        missing = LETTERS[len(indices)] if len(indices) < levels else LETTERS[levels]
        raise TokenParseError(f"expected {levels} levels, got {len(indices)} (token for level {missing!r})")
    return SemanticId(item_id, tuple(indices))


def write_sid_file(sid_table, path):
    lines = [f"{iid}\t{serialize(code)}" for iid, code in sorted(sid_table.items())]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_sid_file(path, levels=None, codebook_size=None):
    table = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            iid, sep, tokens = line.partition("\t")
            if not sep:
                raise TokenParseError(f"{path}:{lineno}: expected 'item_id<TAB>tokens'")
            try:
                table[iid] = parse_token_string(tokens, levels, codebook_size, iid).indices
            except TokenParseError as exc:
                raise TokenParseError(f"{path}:{lineno}: {exc}") from exc
    return table
