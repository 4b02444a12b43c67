"""Interaction sequences, per-item modality vectors, synthetic data, splits."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MIN_SEQ_LEN = 3
VECTOR_MAGIC = "#semrec-vectors v1"


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class InteractionDataset:
    users: tuple  # ((user_id, (item_id, ...)), ...)
    item_universe: frozenset
    dropped_users: int = 0

    def __post_init__(self):
        for uid, items in self.users:
            if len(items) < MIN_SEQ_LEN:
                raise DataError(f"user {uid} has {len(items)} interactions, need >= {MIN_SEQ_LEN}")
            missing = [i for i in items if i not in self.item_universe]
            if missing:
                raise DataError(f"user {uid} references unknown items {missing[:5]}")

    @classmethod
    def from_sequences(cls, sequences, item_universe=None):
        """Build from ``{user: [items]}``; dedups and drops short users."""
        users = []
        dropped = 0
        for uid, items in sequences.items() if isinstance(sequences, dict) else sequences:
            items = dedup_consecutive(items)
            if len(items) < MIN_SEQ_LEN:
                dropped += 1
                continue
            users.append((str(uid), tuple(items)))
        if not users:
            raise DataError("dataset is empty after filtering")
        universe = frozenset(item_universe) if item_universe is not None else frozenset(
            i for _, seq in users for i in seq)
        return cls(tuple(users), universe, dropped)

    def __len__(self):
        return len(self.users)

    @property
    def items(self):
        return sorted(self.item_universe)

    def sequences(self):
        return dict(self.users)


@dataclass(frozen=True)
class ItemFeatures:
    item_id: str
    text_vec: np.ndarray
    image_vec: np.ndarray
    struct_vec: np.ndarray | None = None

    def modalities(self):
        vecs = [self.text_vec, self.image_vec]
        if self.struct_vec is not None:
            vecs.append(self.struct_vec)
        return vecs


@dataclass(frozen=True)
class UserSplit:
    user_id: str
    train: tuple
    val: str
    test: str


@dataclass(frozen=True)
class SplitSpec:
    users: tuple  # of UserSplit

    def history(self, user: UserSplit, phase: str):
        if phase == "val":
            return user.train
        if phase == "test":
            return user.train + (user.val,)
        raise ValueError(f"unknown phase {phase!r}")

    def target(self, user: UserSplit, phase: str):
        return user.val if phase == "val" else user.test

    def train_sequences(self):
        return [u.train for u in self.users]


@dataclass
class SynthConfig:
    n_users: int = 2000
    n_items: int = 500
    n_concepts: int = 20
    seq_len_range: tuple = (5, 11)
    feature_dims: tuple = (32, 32)
    concept_noise_sigma: float = 0.1
    markov_stickiness: float = 0.8
    seed: int = 7
    # per-item noise is sigma * (1 + noise_spread) ** u, u ~ U(-1, 1)
    noise_spread: float = 0.0
    # off-diagonal transition rows are Dirichlet(transition_alpha)
    transition_alpha: float = 0.3

    def validate(self):
        if self.n_concepts < 1 or self.n_concepts > self.n_items:
            raise DataError(f"n_concepts must be in [1, n_items], got {self.n_concepts}")
        if not 0.0 <= self.markov_stickiness <= 1.0:
            raise DataError(f"markov_stickiness must be in [0, 1], got {self.markov_stickiness}")
        lo, hi = self.seq_len_range
        if lo < MIN_SEQ_LEN or hi < lo:
            raise DataError(f"seq_len_range must satisfy {MIN_SEQ_LEN} <= lo <= hi, got {self.seq_len_range}")
        if len(self.feature_dims) not in (2, 3) or min(self.feature_dims) < 1:
            raise DataError(f"feature_dims must list 2 or 3 positive dims, got {self.feature_dims}")
        if self.concept_noise_sigma < 0 or self.noise_spread < 0:
            raise DataError("noise parameters must be non-negative")
        if self.n_users < 1:
            raise DataError("n_users must be positive")


@dataclass
class SynthData:
    dataset: InteractionDataset
    features: dict
    concepts: dict  # item_id -> concept index
    centroids: list  # per modality: (n_concepts, d)
    noise: dict = field(default_factory=dict)  # item_id -> sigma used


def dedup_consecutive(items):
    out = []
    for it in items:
        if not out or out[-1] != it:
            out.append(it)
    return out


# ---------------------------------------------------------------- interactions


def load_interactions(path):
    sequences = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 2:
            raise DataError(f"{path}:{lineno}: expected 'user_id item ...', got {line!r}")
        sequences.append((parts[0], parts[1:]))
    ds = InteractionDataset.from_sequences(sequences)
    if ds.dropped_users:
        log.info("dropped %d users with fewer than %d interactions", ds.dropped_users, MIN_SEQ_LEN)
    return ds


def write_interactions(ds, path):
    lines = [" ".join((uid,) + tuple(items)) for uid, items in ds.users]
    Path(path).write_text("\n".join(lines) + "\n")


def leave_one_out_split(ds):
    return SplitSpec(tuple(UserSplit(uid, tuple(items[:-2]), items[-2], items[-1]) for uid, items in ds.users))


# ---------------------------------------------------------------- vector files


def write_vectors(path, ids, blocks, encoding="text"):
    """Write named (n, d) float blocks keyed by item id.

    Missing rows are NaN and written as ``NA`` in text mode.
    """
    ids = list(ids)
    names = list(blocks)
    mats = [np.asarray(blocks[k], dtype=np.float64) for k in names]
    for k, m in zip(names, mats):
        if m.shape[0] != len(ids):
            raise DataError(f"block {k} has {m.shape[0]} rows for {len(ids)} ids")
    header = [
        VECTOR_MAGIC,
        f"count {len(ids)}",
        "dims " + " ".join(f"{k}={m.shape[1]}" for k, m in zip(names, mats)),
        f"encoding {encoding}",
    ]
    path = Path(path)
    if encoding == "text":
        body = []
        for r, iid in enumerate(ids):
            fields = [iid]
            for m in mats:
                row = m[r]
                fields.append("NA" if np.isnan(row).any() else " ".join(repr(float(v)) for v in row))
            body.append("\t".join(fields))
        path.write_text("\n".join(header + ["end"] + body) + "\n")
    elif encoding == "binary":
        payload = np.concatenate(mats, axis=1).astype("<f4") if mats else np.zeros((len(ids), 0), "<f4")
        with path.open("wb") as fh:
            fh.write(("\n".join(header + ids + ["end"]) + "\n").encode())
            fh.write(payload.tobytes())
    else:
        raise DataError(f"unknown encoding {encoding!r}")


def read_vectors(path):
    """Inverse of :func:`write_vectors`: returns (ids, {name: (n, d) array})."""
    raw = Path(path).read_bytes()
    pos = 0
    header = []
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise DataError(f"{path}: header not terminated by 'end'")
        header.append(raw[pos:nl].decode())
        pos = nl + 1
        if header[-1] == "end":
            break
    if header[0] != VECTOR_MAGIC:
        raise DataError(f"{path}: bad magic line {header[0]!r}")
    meta = {}
    for line in header[1:4]:
        key, _, val = line.partition(" ")
        meta[key] = val
    try:
        count = int(meta["count"])
        dims = [(k, int(v)) for k, v in (tok.split("=") for tok in meta["dims"].split())]
        encoding = meta["encoding"]
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: malformed header: {exc}") from exc
    total = sum(d for _, d in dims)
    if encoding == "binary":
        ids = header[4:-1]
        if len(ids) != count:
            raise DataError(f"{path}: header declares {count} items, id list has {len(ids)}")
        flat = np.frombuffer(raw, dtype="<f4", offset=pos)
        if flat.size != count * total:
            raise DataError(f"{path}: payload has {flat.size} floats, expected {count * total}")
        mat = flat.reshape(count, total).astype(np.float64)
    elif encoding == "text":
        if header[-1] != "end" or len(header) != 5:
            raise DataError(f"{path}: text header must end with 'end'")
        ids = []
        mat = np.full((count, total), np.nan)
        lines = [ln for ln in raw[pos:].decode().splitlines() if ln.strip()]
        hdr_lines = len(header)
        for r, line in enumerate(lines):
            fields = line.split("\t")
            lineno = hdr_lines + r + 1
            if len(fields) != len(dims) + 1:
                raise DataError(f"{path}:{lineno}: expected {len(dims) + 1} tab-separated fields, got {len(fields)}")
            if r >= count:
                raise DataError(f"{path}:{lineno}: more records than declared count {count}")
            ids.append(fields[0])
            off = 0
            for (name, d), fld in zip(dims, fields[1:]):
                if fld.strip() != "NA":
                    vals = fld.split()
                    if len(vals) != d:
                        raise DataError(f"{path}:{lineno}: {name} has {len(vals)} values, header says {d}")
                    try:
                        mat[r, off:off + d] = [float(v) for v in vals]
                    except ValueError as exc:
                        raise DataError(f"{path}:{lineno}: {exc}") from exc
                off += d
        if len(ids) != count:
            raise DataError(f"{path}: header declares {count} items, found {len(ids)}")
    else:
        raise DataError(f"{path}: unknown encoding {encoding!r}")
    blocks = {}
    off = 0
    for name, d in dims:
        blocks[name] = mat[:, off:off + d]
        off += d
    return ids, blocks


def _normalize_rows(mat, name):
    mat = np.array(mat, dtype=np.float64)
    norms = np.linalg.norm(mat, axis=1)
    zero = norms == 0
    if zero.any():
        log.warning("%d zero %s vectors replaced by the uniform unit vector", int(zero.sum()), name)
        mat[zero] = 1.0 / np.sqrt(mat.shape[1])
        norms[zero] = 1.0
    return mat / norms[:, None]


def load_features(path, allow_missing=False):
    """Read a features file into ``{item_id: ItemFeatures}``, L2-normalized."""
    ids, blocks = read_vectors(path)
    for req in ("text", "image"):
        if req not in blocks:
            raise DataError(f"{path}: features file lacks a {req!r} block")
    normed = {}
    for name in ("text", "image", "struct"):
        if name not in blocks:
            continue
        mat = blocks[name]
        if not np.isfinite(mat[~np.isnan(mat).any(axis=1)]).all():
            raise DataError(f"{path}: non-finite values in {name} vectors")
        missing = np.isnan(mat).any(axis=1)
        if missing.any():
            if not allow_missing:
                bad = [ids[i] for i in np.flatnonzero(missing)[:10]]
                raise DataError(f"{path}: items missing {name} vectors: {bad}")
            present = _normalize_rows(mat[~missing], name)
            mat = mat.copy()
            mat[missing] = present.mean(axis=0)
            log.warning("substituted mean %s vector for %d items", name, int(missing.sum()))
        normed[name] = _normalize_rows(mat, name)
    out = {}
    for r, iid in enumerate(ids):
        out[iid] = ItemFeatures(iid, normed["text"][r], normed["image"][r],
                                normed["struct"][r] if "struct" in normed else None)
    return out


def write_features(features, path, encoding="text"):
    ids = sorted(features)
    blocks = {
        "text": np.stack([features[i].text_vec for i in ids]),
        "image": np.stack([features[i].image_vec for i in ids]),
    }
    if ids and features[ids[0]].struct_vec is not None:
        blocks["struct"] = np.stack([features[i].struct_vec for i in ids])
    write_vectors(path, ids, blocks, encoding)


def check_coverage(ds, features):
    missing = sorted(i for i in ds.item_universe if i not in features)
    if missing:
        raise DataError(f"{len(missing)} items have no features: {missing[:20]}")


# ---------------------------------------------------------------- synthetic


def _unit_rows(rng, n, d):
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _transition_matrix(rng, n_concepts, stickiness, alpha):
    if n_concepts == 1:
        return np.ones((1, 1))
    trans = np.zeros((n_concepts, n_concepts))
    for c in range(n_concepts):
        others = [o for o in range(n_concepts) if o != c]
        trans[c, others] = rng.dirichlet(np.full(len(others), alpha)) * (1.0 - stickiness)
        trans[c, c] = stickiness
    return trans


def _sample_domain(cfg, rng, centroids, trans, prefix=""):
    n_items, n_concepts = cfg.n_items, cfg.n_concepts
    item_ids = [f"{prefix}i{k:04d}" for k in range(n_items)]
    concept_of = rng.permutation(np.arange(n_items) % n_concepts)
    sig = cfg.concept_noise_sigma * (1.0 + cfg.noise_spread) ** rng.uniform(-1, 1, n_items)
    mats = []
    for cen in centroids:
        noise = rng.standard_normal((n_items, cen.shape[1]))
        mats.append(cen[concept_of] + noise * sig[:, None])
    features = {}
    for k, iid in enumerate(item_ids):
        vecs = [m[k] / max(np.linalg.norm(m[k]), 1e-12) for m in mats]
        features[iid] = ItemFeatures(iid, vecs[0], vecs[1], vecs[2] if len(vecs) > 2 else None)
    members = [np.flatnonzero(concept_of == c) for c in range(n_concepts)]

    lo, hi = cfg.seq_len_range
    sequences = []
    for u in range(cfg.n_users):
        length = int(rng.integers(lo, hi + 1))
        c = int(rng.integers(n_concepts))
        seq = []
        for _ in range(length):
            pool = members[c]
            pick = int(pool[rng.integers(len(pool))])
            if seq and item_ids[pick] == seq[-1] and len(pool) > 1:
                pick = int(pool[(np.flatnonzero(pool == pick)[0] + 1 + rng.integers(len(pool) - 1)) % len(pool)])
            seq.append(item_ids[pick])
            c = int(rng.choice(n_concepts, p=trans[c]))
        sequences.append((f"{prefix}u{u:04d}", seq))
    ds = InteractionDataset.from_sequences(sequences, item_universe=item_ids)
    concepts = {iid: int(concept_of[k]) for k, iid in enumerate(item_ids)}
    noise = {iid: float(sig[k]) for k, iid in enumerate(item_ids)}
    return SynthData(ds, features, concepts, centroids, noise)


def _shared_structure(cfg, rng):
    centroids = [_unit_rows(rng, cfg.n_concepts, d) for d in cfg.feature_dims]
    trans = _transition_matrix(rng, cfg.n_concepts, cfg.markov_stickiness, cfg.transition_alpha)
    return centroids, trans


def synth_generate(cfg: SynthConfig) -> SynthData:
    """Planted-concept dataset: features cluster by concept, sequences follow
    a sticky Markov chain over concepts. Bit-deterministic per ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    centroids, trans = _shared_structure(cfg, rng)
    return _sample_domain(cfg, rng, centroids, trans)


def synth_transfer(cfg: SynthConfig, n_source_domains=2, source_users=None, source_items=None):
    """Target domain plus source domains sharing concept centroids and
    transition dynamics but with disjoint item and user ids."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    centroids, trans = _shared_structure(cfg, rng)
    target = _sample_domain(cfg, rng, centroids, trans)
    sources = []
    for d in range(n_source_domains):
        scfg = SynthConfig(**{**vars(cfg),
                              "n_users": source_users or cfg.n_users,
                              "n_items": source_items or cfg.n_items})
        sources.append(_sample_domain(scfg, rng, centroids, trans, prefix=f"s{d + 1}_"))
    return target, sources


def nearest_centroid_accuracy(synth: SynthData):
    """Fraction of items whose features sit nearest their own concept centroid
    (summed over modalities), by exhaustive search over concepts."""
    correct = 0
    for iid, feats in synth.features.items():
        best, best_c = np.inf, -1
        for c in range(synth.centroids[0].shape[0]):
            dist = sum(float(np.sum((v - cen[c]) ** 2)) for v, cen in zip(feats.modalities(), synth.centroids))
            if dist < best:
                best, best_c = dist, c
        correct += best_c == synth.concepts[iid]
    return correct / len(synth.features)


def concept_similarity_gap(synth: SynthData):
    """(mean within-concept cosine, mean cross-concept cosine) of text vectors."""
    ids = sorted(synth.features)
    mat = np.stack([synth.features[i].text_vec for i in ids])
    lab = np.array([synth.concepts[i] for i in ids])
    sim = mat @ mat.T
    same = lab[:, None] == lab[None, :]
    off = ~np.eye(len(ids), dtype=bool)
    return float(sim[same & off].mean()), float(sim[~same].mean())


def merge_features(*feature_maps):
    out = {}
    for fm in feature_maps:
        out.update(fm)
    return out

