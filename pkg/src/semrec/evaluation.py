"""Leave-one-out ranking evaluation over the full item catalog."""
from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .seqmodel import EncoderState, tokenize_many

KS = (1, 5, 10)


def hr_at_k(ranks, k):
    """Fraction of 1-based ranks that fall within the top ``k``."""
    ranks = np.asarray(ranks)
    return float((ranks <= k).mean()) if len(ranks) else 0.0


def ndcg_at_k(ranks, k):
    """Single-relevant-item NDCG: 1 / log2(rank + 1) inside the cutoff."""
    ranks = np.asarray(ranks, dtype=np.float64)
    if not len(ranks):
        return 0.0
    gains = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(gains.mean())


def metric_dict(ranks):
    out = {f"hr@{k}": hr_at_k(ranks, k) for k in KS}
    out.update({f"ndcg@{k}": ndcg_at_k(ranks, k) for k in KS if k > 1})
    return out


def query_tokens(histories, sid_table, state: EncoderState):
    """History truncated to ``max_items - 1`` items followed by K MASK tokens."""
    vocab = state.vocab
    keep = state.cfg.max_items - 1
    toks = tokenize_many([list(h)[-keep:] for h in histories], sid_table, vocab, keep)
    masks = np.full((len(histories), vocab.levels), vocab.mask, dtype=np.int64)
    return np.concatenate([toks, masks], axis=1)


def level_log_probs(state: EncoderState, histories, sid_table):
    """Log-probabilities (B, K, M_c) at the K appended MASK positions.

    The softmax is restricted to the semantic-token range so PAD and MASK
    never absorb probability mass.
    """
    vocab = state.vocab
    tokens = query_tokens(histories, sid_table, state)
    hidden, offset = state.encode(tokens)
    last = hidden.data[:, -vocab.levels:, :]
    logits = last @ state.tok_emb.data[:vocab.n_semantic].T + state.out_bias.data[:vocab.n_semantic]
    logits = logits.astype(np.float64)
    logits -= logits.max(axis=-1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))
    out = np.empty((len(histories), vocab.levels, vocab.codebook_size))
    for k in range(vocab.levels):
        out[:, k, :] = logp[:, k, k * vocab.codebook_size:(k + 1) * vocab.codebook_size]
    return out


def score_candidates(state: EncoderState, histories, sid_table, candidate_ids):
    """Scores (B, n_candidates): summed per-level log-probability of each code."""
    codes = np.array([sid_table[c] for c in candidate_ids], dtype=np.int64)  # (N, K)
    logp = level_log_probs(state, histories, sid_table)
    scores = np.zeros((len(histories), len(codes)))
    for k in range(state.vocab.levels):
        scores += logp[:, k, codes[:, k]]
    return scores


def rank_of(scores, candidate_ids, target):
    """1-based rank of ``target``; ties are broken by ascending item id."""
    t = candidate_ids.index(target)
    s = scores[t]
    better = scores > s
    tied_before = (scores == s) & (np.array(candidate_ids, dtype=object) < target)
    return int(better.sum() + tied_before.sum()) + 1


def _ranks_from_scores(scores, order_pos, targets_pos):
    """Vectorized ranks; ``order_pos`` is each candidate's position in item-id order."""
    ranks = np.empty(len(targets_pos), dtype=np.int64)
    for b, t in enumerate(targets_pos):
        s = scores[b]
        st = s[t]
        ranks[b] = int((s > st).sum() + ((s == st) & (order_pos < order_pos[t])).sum()) + 1
    return ranks


@dataclass
class MetricsReport:
    phase: str
    n_users: int
    n_items: int
    model: dict
    baselines: dict
    ranks: list = field(default_factory=list)  # (user_id, target, rank)

    def to_dict(self):
        return {"phase": self.phase, "n_users": self.n_users, "n_items": self.n_items,
                "model": self.model, "baselines": self.baselines}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self):
        names = list(self.model)
        rows = [("model", self.model)] + sorted(self.baselines.items())
        width = max(len(r[0]) for r in rows)
        lines = [f"{self.phase} metrics over {self.n_users} users, {self.n_items} items",
                 " " * width + "  " + "  ".join(f"{n:>8}" for n in names)]
        for label, vals in rows:
            lines.append(f"{label:<{width}}  " + "  ".join(f"{vals[n]:8.4f}" for n in names))
        return "\n".join(lines) + "\n"

    def write_ranks(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["user_id", "target", "rank"])
            w.writerows(self.ranks)


def popularity_ranks(split, phase, candidate_ids):
    """Ranks under a train-count popularity ranking (ties by item id)."""
    counts = Counter(it for seq in split.train_sequences() for it in seq)
    ordered = sorted(candidate_ids, key=lambda i: (-counts.get(i, 0), i))
    pos = {it: r + 1 for r, it in enumerate(ordered)}
    return [pos[split.target(u, phase)] for u in split.users]


def random_metrics(n_items):
    """Closed-form expectation for a uniformly random ranking."""
    out = {f"hr@{k}": min(k, n_items) / n_items for k in KS}
    for k in KS:
        if k > 1:
            out[f"ndcg@{k}"] = float(sum(1.0 / np.log2(r + 1.0) for r in range(1, min(k, n_items) + 1)) / n_items)
    return out


def evaluate(state: EncoderState, split, sid_table, phase="test", batch_size=256, candidate_ids=None):
    """Full-catalog leave-one-out ranking for every user in ``split``."""
    if phase not in ("val", "test"):
        raise ValueError(f"phase must be 'val' or 'test', got {phase!r}")
    candidate_ids = sorted(sid_table) if candidate_ids is None else sorted(candidate_ids)
    cpos = {c: i for i, c in enumerate(candidate_ids)}
    order_pos = np.arange(len(candidate_ids))
    users = list(split.users)
    ranks = []
    for start in range(0, len(users), batch_size):
        chunk = users[start:start + batch_size]
        hist = [split.history(u, phase) for u in chunk]
        scores = score_candidates(state, hist, sid_table, candidate_ids)
        targets = [cpos[split.target(u, phase)] for u in chunk]
        ranks.extend(_ranks_from_scores(scores, order_pos, targets).tolist())
    pop = popularity_ranks(split, phase, candidate_ids)
    report = MetricsReport(
        phase=phase, n_users=len(users), n_items=len(candidate_ids),
        model=metric_dict(ranks),
        baselines={"popularity": metric_dict(pop), "random": random_metrics(len(candidate_ids))},
        ranks=[(u.user_id, split.target(u, phase), r) for u, r in zip(users, ranks)],
    )
    return report
