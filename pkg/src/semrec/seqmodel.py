"""Bidirectional masked-token encoder over flattened semantic-ID sequences."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import load_arrays, save_arrays
from .nn import MLP, LayerNorm, Module, MultiHeadAttention

log = logging.getLogger(__name__)

STRATEGIES = ("span", "multi_region", "tail")


class VocabMismatch(RuntimeError):
    pass


@dataclass(frozen=True)
class TokenVocab:
    levels: int
    codebook_size: int

    @property
    def n_semantic(self):
        return self.levels * self.codebook_size

    @property
    def pad(self):
        return self.n_semantic

    @property
    def mask(self):
        return self.n_semantic + 1

    @property
    def size(self):
        return self.n_semantic + 2

    def token(self, level, index):
        """``level`` is 0-based here."""
        return level * self.codebook_size + int(index)

    def item_tokens(self, code):
        return [self.token(k, i) for k, i in enumerate(code)]


@dataclass
class SeqModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    dropout: float = 0.2
    max_items: int = 50
    hidden: int = 64
    ffn_mult: int = 4
    pretrain_lr: float = 5e-4
    pretrain_batch: int = 512
    pretrain_epochs: int = 10
    span_ratio: float = 0.3
    multi_region_ratio: float = 0.15
    tail_ratio: float = 0.1
    finetune_lr: float = 1e-4
    finetune_batch: int = 256
    finetune_epochs: int = 10
    finetune_mask_ratio: float = 0.3
    # "ratios": 0.3/0.15/0.1 are per-strategy mask ratios, strategy picked
    # uniformly; "weights": they are strategy selection weights and every
    # strategy masks weights_mask_ratio of the items
    strategy_mode: str = "ratios"
    weights_mask_ratio: float = 0.2
    simultaneous: bool = False
    pretrain_objective: str = "multimask"  # "mlm", or "none" to skip pretraining

    def validate(self):
        for name in ("span_ratio", "multi_region_ratio", "tail_ratio", "finetune_mask_ratio", "weights_mask_ratio"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ad.ConfigError(f"{name} must lie in (0, 1), got {v}")
        if self.max_items < 2:
            raise ad.ConfigError("max_items must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ad.ConfigError("dropout must lie in [0, 1)")
        if self.strategy_mode not in ("ratios", "weights"):
            raise ad.ConfigError(f"strategy_mode must be 'ratios' or 'weights', got {self.strategy_mode!r}")
        if self.pretrain_objective not in ("multimask", "mlm", "none"):
            raise ad.ConfigError(f"pretrain_objective must be 'multimask', 'mlm' or 'none', got {self.pretrain_objective!r}")
        if self.hidden % self.n_heads:
            raise ad.ConfigError("hidden must be divisible by n_heads")


# ---------------------------------------------------------------- tokenize


def tokenize_sequence(items, sid_table, vocab: TokenVocab, max_items):
    """Left-padded token ids for the most recent ``max_items`` items."""
    items = list(items)[-max_items:]
    toks = []
    for it in items:
        try:
            code = sid_table[it]
        except KeyError:
            raise KeyError(f"item {it!r} has no semantic id") from None
        toks.extend(vocab.item_tokens(code))
    length = max_items * vocab.levels
    return np.array([vocab.pad] * (length - len(toks)) + toks, dtype=np.int64)


def tokenize_many(sequences, sid_table, vocab, max_items):
    if not sequences:
        return np.zeros((0, max_items * vocab.levels), dtype=np.int64)
    return np.stack([tokenize_sequence(s, sid_table, vocab, max_items) for s in sequences])


# ---------------------------------------------------------------- masking


@dataclass
class MaskPlan:
    strategy: str
    positions: np.ndarray  # token positions, sorted
    originals: np.ndarray
    items: np.ndarray = field(default=None)  # masked item slots (0 = oldest real item)


def _round(x):
    return int(math.floor(x + 0.5))


def _item_layout(tokens, vocab):
    n_tok = int((np.asarray(tokens) != vocab.pad).sum())
    n_items = n_tok // vocab.levels
    offset = len(tokens) - n_items * vocab.levels
    return n_items, offset


def _plan(tokens, vocab, strategy, item_slots):
    n_items, offset = _item_layout(tokens, vocab)
    item_slots = np.array(sorted(int(i) for i in item_slots), dtype=np.int64)
    pos = (offset + item_slots[:, None] * vocab.levels + np.arange(vocab.levels)[None, :]).reshape(-1)
    return MaskPlan(strategy, pos, np.asarray(tokens)[pos].copy(), item_slots)


def _span_slots(n, ratio, rng):
    m = min(n, max(1, _round(ratio * n)))
    start = int(rng.integers(0, n - m + 1))
    return range(start, start + m)


def span_mask(tokens, ratio, rng, vocab):
    n, _ = _item_layout(tokens, vocab)
    if n < 1:
        raise ValueError("cannot mask a sequence without items")
    return _plan(tokens, vocab, "span", _span_slots(n, ratio, rng))


def tail_mask(tokens, ratio, rng, vocab):
    n, _ = _item_layout(tokens, vocab)
    if n < 1:
        raise ValueError("cannot mask a sequence without items")
    m = min(n, max(1, _round(ratio * n)))
    return _plan(tokens, vocab, "tail", range(n - m, n))


def _multi_region_slots(n, ratio, rng):
    m = max(2, _round(ratio * n))
    max_regions = min(3, m, (n + 1) // 2)
    if n < 4 or m + 1 > n or max_regions < 2:
        return None
    while m + 1 > n:
        m -= 1
    r = int(rng.integers(2, max_regions + 1))
    while m + r - 1 > n:
        r -= 1
    cuts = np.sort(rng.choice(np.arange(1, m), size=r - 1, replace=False)) if r > 1 else np.array([], int)
    sizes = np.diff(np.concatenate([[0], cuts, [m]]))
    slack = n - m - (r - 1)
    # stars and bars: distribute slack over r + 1 gaps
    bars = np.sort(rng.choice(slack + r, size=r, replace=False))
    gaps = np.diff(np.concatenate([[-1], bars, [slack + r]])) - 1
    slots = []
    pos = gaps[0]
    for j, size in enumerate(sizes):
        slots.extend(range(pos, pos + size))
        pos += size + 1 + gaps[j + 1]
    return slots


def multi_region_mask(tokens, ratio, rng, vocab):
    n, _ = _item_layout(tokens, vocab)
    if n < 1:
        raise ValueError("cannot mask a sequence without items")
    slots = _multi_region_slots(n, ratio, rng)
    if slots is None:
        log.debug("sequence of %d items too short for multi-region masking; using span", n)
        return _plan(tokens, vocab, "span", _span_slots(n, ratio, rng))
    return _plan(tokens, vocab, "multi_region", slots)


def uniform_mask(tokens, ratio, rng, vocab):
    n, _ = _item_layout(tokens, vocab)
    if n < 1:
        raise ValueError("cannot mask a sequence without items")
    m = min(n, max(1, _round(ratio * n)))
    return _plan(tokens, vocab, "uniform", rng.choice(n, size=m, replace=False))


MASKERS = {"span": span_mask, "tail": tail_mask, "multi_region": multi_region_mask, "uniform": uniform_mask}


def regions(slots):
    """Split sorted item slots into maximal runs of consecutive integers."""
    runs = []
    for s in slots:
        if runs and s == runs[-1][-1] + 1:
            runs[-1].append(int(s))
        else:
            runs.append([int(s)])
    return runs


def sample_strategy(mode, rng, cfg: SeqModelConfig = None):
    """Pick (strategy, ratio) for one batch."""
    cfg = cfg or SeqModelConfig()
    if mode == "finetune" or (mode == "pretrain" and cfg.pretrain_objective == "mlm"):
        return "uniform", cfg.finetune_mask_ratio
    if mode != "pretrain":
        raise ValueError(f"unknown mode {mode!r}")
    ratios = {"span": cfg.span_ratio, "multi_region": cfg.multi_region_ratio, "tail": cfg.tail_ratio}
    if cfg.strategy_mode == "weights":
        w = np.array([ratios[s] for s in STRATEGIES])
        strategy = STRATEGIES[int(rng.choice(len(STRATEGIES), p=w / w.sum()))]
        return strategy, cfg.weights_mask_ratio
    strategy = STRATEGIES[int(rng.integers(len(STRATEGIES)))]
    return strategy, ratios[strategy]


def make_plan(tokens, strategy, ratio, rng, vocab, cfg=None):
    if strategy == "combined":
        cfg = cfg or SeqModelConfig()
        slots = set()
        for s, r in (("span", cfg.span_ratio), ("multi_region", cfg.multi_region_ratio), ("tail", cfg.tail_ratio)):
            slots.update(MASKERS[s](tokens, r, rng, vocab).items.tolist())
        return _plan(tokens, vocab, "combined", slots)
    return MASKERS[strategy](tokens, ratio, rng, vocab)


# ---------------------------------------------------------------- encoder


class EncoderBlock(Module):
    def __init__(self, rng, dim, n_heads, ffn_mult, dtype):
        self.attn = MultiHeadAttention(rng, dim, n_heads, dtype)
        self.ln1 = LayerNorm(dim, dtype)
        self.ffn = MLP(rng, [dim, dim * ffn_mult, dim], dtype)
        self.ln2 = LayerNorm(dim, dtype)

    def __call__(self, x, key_mask, p_drop, key):
        k1 = None if key is None else key + (1,)
        k2 = None if key is None else key + (2,)
        k3 = None if key is None else key + (3,)
        att = self.attn(x, x, key_mask, k1, p_drop)
        x = self.ln1(x + ad.dropout(att, p_drop, k2))
        return self.ln2(x + ad.dropout(self.ffn(x), p_drop, k3))


class EncoderState(Module):
    def __init__(self, vocab: TokenVocab, cfg: SeqModelConfig, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.vocab = vocab
        self.cfg = cfg
        length = cfg.max_items * vocab.levels
        self.tok_emb = ad.parameter((rng.standard_normal((vocab.size, cfg.hidden)) * 0.02).astype(dtype))
        self.pos_emb = ad.parameter((rng.standard_normal((length, cfg.hidden)) * 0.02).astype(dtype))
        self.emb_ln = LayerNorm(cfg.hidden, dtype)
        self.blocks = [EncoderBlock(rng, cfg.hidden, cfg.n_heads, cfg.ffn_mult, dtype) for _ in range(cfg.n_layers)]
        self.out_bias = ad.parameter(np.zeros(vocab.size, dtype=dtype))

    @property
    def seq_len(self):
        return self.pos_emb.shape[0]

    def architecture(self):
        return {"levels": self.vocab.levels, "codebook_size": self.vocab.codebook_size,
                "vocab_size": self.vocab.size, "hidden": self.cfg.hidden, "n_layers": self.cfg.n_layers,
                "n_heads": self.cfg.n_heads, "ffn_mult": self.cfg.ffn_mult, "max_items": self.cfg.max_items}

    def arch_hash(self):
        return hashlib.sha256(json.dumps(self.architecture(), sort_keys=True).encode()).hexdigest()[:16]

    def encode(self, tokens, dropout_key=None):
        """Hidden states for left-padded ``tokens`` (B, L).

        Leading columns that are PAD in every row are dropped (they are never
        attended to); returns (hidden (B, L', H), offset).
        """
        tokens = np.asarray(tokens)
        if tokens.shape[1] != self.seq_len:
            raise ad.ShapeError(f"expected sequences of {self.seq_len} tokens, got {tokens.shape[1]}")
        real = (tokens != self.vocab.pad).any(axis=0)
        offset = int(np.argmax(real)) if real.any() else tokens.shape[1] - 1
        tokens = tokens[:, offset:]
        p = self.cfg.dropout
        x = ad.take_rows(self.tok_emb, tokens) + self.pos_emb[offset:]
        x = self.emb_ln(x)
        x = ad.dropout(x, p, None if dropout_key is None else tuple(dropout_key) + (0, 0))
        key_mask = tokens != self.vocab.pad
        for i, block in enumerate(self.blocks):
            key = None if dropout_key is None else tuple(dropout_key) + (i + 1,)
            x = block(x, key_mask, p, key)
        return x, offset

    def project(self, hidden):
        return ad.matmul(hidden, self.tok_emb.T) + self.out_bias


def mlm_forward(state: EncoderState, tokens, dropout_key=None):
    """Logits (B, L, V) at every position (PAD rows included)."""
    hidden, offset = state.encode(tokens, dropout_key)
    logits = state.project(hidden).data
    if offset:
        full = np.zeros((logits.shape[0], state.seq_len, logits.shape[2]), dtype=logits.dtype)
        full[:, offset:] = logits
        return full
    return logits


def mask_loss(logits, targets):
    """Mean negative log-likelihood over masked positions."""
    if logits.shape[0] == 0:
        raise ValueError("mask_loss needs at least one masked position")
    return ad.cross_entropy(logits, np.asarray(targets)).mean()


# ---------------------------------------------------------------- training


def masked_batch(tokens, mode, rng, vocab, cfg):
    """Apply one sampled strategy to every row; returns (inputs, rows, cols, targets, strategy)."""
    strategy, ratio = sample_strategy(mode, rng, cfg)
    if mode == "pretrain" and cfg.simultaneous and cfg.pretrain_objective == "multimask":
        strategy = "combined"
    inputs = tokens.copy()
    rows, cols, targets = [], [], []
    for b, seq in enumerate(tokens):
        plan = make_plan(seq, strategy, ratio, rng, vocab, cfg)
        inputs[b, plan.positions] = vocab.mask
        rows.append(np.full(len(plan.positions), b))
        cols.append(plan.positions)
        targets.append(plan.originals)
    return inputs, np.concatenate(rows), np.concatenate(cols), np.concatenate(targets), strategy


def batch_loss(state, tokens, mode, rng, cfg, dropout_key):
    inputs, rows, cols, targets, _ = masked_batch(tokens, mode, rng, state.vocab, cfg)
    hidden, offset = state.encode(inputs, dropout_key)
    picked = hidden[rows, cols - offset]
    return mask_loss(state.project(picked), targets)


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)  # (epoch, loss, lr, wall_time)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "lr", "wall_time"])
            for row in self.epochs:
                w.writerow([row[0], f"{row[1]:.6f}", row[2], f"{row[3]:.3f}"])

    @property
    def losses(self):
        return [r[1] for r in self.epochs]


def save_encoder(path, state: EncoderState, opt=None, meta=None, config_hash=None):
    arrays = state.state_dict()
    info = {"architecture": state.architecture(), "seq_config": asdict(state.cfg)}
    if opt is not None:
        arrays.update(opt.state_arrays())
        info["adam_step"] = opt.step_count
    info.update(meta or {})
    save_arrays(path, arrays, config_hash or state.arch_hash(), info)


def load_encoder(path, cfg: SeqModelConfig = None):
    """Returns (state, arrays, meta). ``cfg`` overrides training settings."""
    arrays, _, meta = load_arrays(path)
    arch = meta["architecture"]
    saved = SeqModelConfig(**meta["seq_config"])
    if cfg is None:
        cfg = saved
    vocab = TokenVocab(arch["levels"], arch["codebook_size"])
    state = EncoderState(vocab, cfg)
    if state.architecture() != arch:
        raise VocabMismatch(f"checkpoint architecture {arch} differs from config {state.architecture()}")
    state.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("adam.")})
    return state, arrays, meta


def train_masked(state, tokens, mode, cfg, seed, epochs, lr, batch_size,
                 ckpt_dir=None, resume_from=None, tag=0):
    """Shared Adam loop for pretraining and finetuning. Returns TrainLog."""
    tokens = np.asarray(tokens)
    if len(tokens) == 0 or not (tokens != state.vocab.pad).any(axis=1).all():
        raise ValueError("training set contains sequences made only of PAD tokens")
    opt = ad.Adam(state.named_parameters(), lr=lr)
    start_epoch = 0
    tlog = TrainLog()
    if resume_from is not None:
        arrays, _, meta = load_arrays(resume_from)
        state.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("adam.")})
        opt.load_state_arrays(arrays, meta["adam_step"])
        start_epoch = int(meta["epoch"])
        tlog.epochs = [tuple(r) for r in meta.get("log", [])]
    t0 = time.perf_counter()
    n = len(tokens)
    for epoch in range(start_epoch, epochs):
        rng = np.random.default_rng([seed, tag, epoch])
        order = rng.permutation(n)
        total = 0.0
        count = 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            loss = batch_loss(state, tokens[idx], mode, rng, cfg, (seed, tag, opt.step_count))
            if not np.isfinite(loss.data):
                raise ad.TrainingDiverged(f"{mode} loss became non-finite at epoch {epoch + 1}")
            ad.backward(loss)
            opt.step()
            total += float(loss.data) * len(idx)
            count += len(idx)
        tlog.epochs.append((epoch + 1, total / count, lr, time.perf_counter() - t0))
        log.info("%s epoch %d loss %.4f", mode, epoch + 1, total / count)
        if ckpt_dir is not None:
            save_encoder(Path(ckpt_dir) / f"{mode}-epoch{epoch + 1:03d}.ckpt", state, opt,
                         {"epoch": epoch + 1, "log": [list(r) for r in tlog.epochs]})
    return tlog


def pretrain(corpora, sid_table, vocab, cfg: SeqModelConfig, seed=0, ckpt_dir=None, resume_from=None):
    """Masked pretraining on a list of token-sequence corpora."""
    cfg.validate()
    tokens = np.concatenate([np.asarray(c) for c in corpora]) if corpora else np.zeros((0, 0), np.int64)
    del sid_table
    state = EncoderState(vocab, cfg, seed=seed)
    tlog = train_masked(state, tokens, "pretrain", cfg, seed, cfg.pretrain_epochs, cfg.pretrain_lr,
                        cfg.pretrain_batch, ckpt_dir, resume_from, tag=1)
    return state, tlog


def finetune(tokens, init: EncoderState | None, vocab, cfg: SeqModelConfig, seed=0, ckpt_dir=None):
    """Uniform-mask finetuning; ``init=None`` trains from scratch."""
    cfg.validate()
    state = EncoderState(vocab, cfg, seed=seed)
    if init is not None:
        if init.architecture() != state.architecture():
            raise VocabMismatch(f"init checkpoint hash {init.arch_hash()} != config hash {state.arch_hash()}")
        state.load_state_dict(init.state_dict())
    tlog = train_masked(state, tokens, "finetune", cfg, seed, cfg.finetune_epochs, cfg.finetune_lr,
                        cfg.finetune_batch, ckpt_dir, tag=2)
    return state, tlog
