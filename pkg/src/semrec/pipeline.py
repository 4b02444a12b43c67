"""File-based pipeline stages with an append-only run manifest."""
from __future__ import annotations

import hashlib
import json
import logging
import shutil
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import evaluation as E
from . import fusion as F
from . import quantizer as Q
from . import seqmodel as S
from .checkpoint import save_arrays
from .config import RunConfig, write_resolved

log = logging.getLogger(__name__)

STAGES = ("synth", "inject", "quantize", "pretrain", "finetune", "eval")


class DependencyError(RuntimeError):
    pass


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """JSON-lines log of stage runs; later entries supersede earlier ones."""

    def __init__(self, path):
        self.path = Path(path)

    def entries(self):
        if not self.path.exists():
            return []
        return [json.loads(ln) for ln in self.path.read_text().splitlines() if ln.strip()]

    def append(self, entry):
        with self.path.open("a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def recorded_hash(self, path):
        key = str(path)
        found = None
        for e in self.entries():
            if key in e.get("outputs", {}):
                found = (e["stage"], e["outputs"][key])
        return found

    def verify(self, paths):
        """Hash each input; refuse if a pipeline-produced file has changed."""
        hashes = {}
        for p in paths:
            p = Path(p)
            if not p.exists():
                raise DependencyError(f"missing artifact {p}")
            digest = sha256_file(p)
            rec = self.recorded_hash(p)
            if rec is not None and rec[1] != digest:
                raise DependencyError(
                    f"{p} changed since stage '{rec[0]}' wrote it (sha256 {digest[:12]} != {rec[1][:12]}); "
                    f"re-run '{rec[0]}'")
            hashes[str(p)] = digest
        return hashes


class Run:
    """Paths and bookkeeping for one output directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(self.out / "manifest.jsonl")
        write_resolved(cfg, self.out / "config.resolved.json")

    def dir(self, stage):
        return self.out / stage

    # artifact locations ----------------------------------------------------
    def target_interactions(self):
        return self.dir("synth") / "target.txt" if self.cfg.data.synthetic else Path(self.cfg.data.interactions)

    def source_interactions(self):
        if self.cfg.data.synthetic:
            return [self.dir("synth") / f"source_{k + 1}.txt" for k in range(self.cfg.data.n_source_domains)]
        return [Path(p) for p in self.cfg.data.pretrain_interactions]

    def features(self):
        return self.dir("synth") / "features.vec" if self.cfg.data.synthetic else Path(self.cfg.data.features)

    def fused(self):
        return self.dir("inject") / "fused.vec"

    def sids(self):
        return self.dir("quantize") / "sids.tsv"

    def pretrain_ckpt(self):
        return self.dir("pretrain") / "encoder.ckpt"

    def finetune_ckpt(self):
        return self.dir("finetune") / "encoder.ckpt"

    def metrics(self):
        return self.dir("eval") / "metrics.json"

    def pretraining_enabled(self):
        return self.cfg.seqmodel.pretrain_objective != "none" and bool(self.source_interactions())

    # execution -------------------------------------------------------------
    def stage(self, name, inputs, body):
        """Verify inputs, run ``body(stage_dir)``, record outputs.

        ``body`` returns the list of files it wrote. If it raises, whatever
        it left in the stage directory is moved under ``quarantine/``.
        """
        in_hashes = self.manifest.verify(inputs)
        sdir = self.dir(name)
        if sdir.exists():
            shutil.rmtree(sdir)
        sdir.mkdir(parents=True)
        t0 = time.perf_counter()
        try:
            outputs = body(sdir)
        except BaseException:
            qdir = self.out / "quarantine"
            qdir.mkdir(exist_ok=True)
            n = sum(1 for p in qdir.iterdir() if p.name.startswith(name + "-"))
            shutil.move(str(sdir), str(qdir / f"{name}-{n + 1}"))
            log.error("stage %s failed; partial outputs moved to %s", name, qdir / f"{name}-{n + 1}")
            raise
        self.manifest.append({
            "stage": name,
            "inputs": in_hashes,
            "outputs": {str(p): sha256_file(p) for p in outputs},
            "wall_time": round(time.perf_counter() - t0, 3),
            "seed": self.cfg.seed,
            "config_hash": self.cfg.hash(),
            "version": __version__,
        })
        return outputs


# ---------------------------------------------------------------- stages


def stage_synth(run: Run):
    cfg = run.cfg
    if not cfg.data.synthetic:
        raise DependencyError("synth stage requested but data.synthetic is false")

    def body(d):
        if cfg.data.n_source_domains:
            target, sources = D.synth_transfer(cfg.synth, cfg.data.n_source_domains,
                                               cfg.data.source_users, cfg.data.source_items)
        else:
            target, sources = D.synth_generate(cfg.synth), []
        outs = [d / "target.txt", d / "features.vec", d / "concepts.json"]
        D.write_interactions(target.dataset, outs[0])
        for k, s in enumerate(sources):
            p = d / f"source_{k + 1}.txt"
            D.write_interactions(s.dataset, p)
            outs.append(p)
        D.write_features(D.merge_features(target.features, *[s.features for s in sources]), outs[1])
        concepts = {}
        noise = {}
        for s in [target] + sources:
            concepts.update(s.concepts)
            noise.update(s.noise)
        outs[2].write_text(json.dumps({"concept": concepts, "noise_sigma": noise}, sort_keys=True) + "\n")
        return outs

    return run.stage("synth", [], body)


def _catalog(run):
    ids = set(D.load_interactions(run.target_interactions()).item_universe)
    for p in run.source_interactions():
        ids |= D.load_interactions(p).item_universe
    return sorted(ids)


def stage_inject(run: Run):
    cfg = run.cfg
    inputs = [run.features(), run.target_interactions()] + run.source_interactions()

    def body(d):
        feats = D.load_features(run.features(), cfg.data.allow_missing_features)
        items = _catalog(run)
        missing = [i for i in items if i not in feats]
        if missing:
            raise D.DataError(f"{len(missing)} items have no features: {missing[:10]}")
        res = F.train_injection(feats, cfg.fusion, seed=cfg.seed, item_ids=items)
        D.write_vectors(d / "fused.vec", res.item_ids, {"h": res.h_table}, encoding="binary")
        save_ckpt = d / "fusion.ckpt"
        save_arrays(save_ckpt, res.state.state_dict(), cfg.hash(), {"stage": "inject"})
        summary = res.trace.summary(cfg.fusion.max_depth)
        summary["epoch_losses"] = res.epoch_losses
        (d / "gates.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        depth_per_item = {i: int(x) for i, x in zip(res.item_ids, res.trace.depth_used)}
        (d / "depths.json").write_text(json.dumps(depth_per_item, sort_keys=True) + "\n")
        log.info("fusion depth histogram %s", summary["depth_histogram"])
        return [d / "fused.vec", save_ckpt, d / "gates.json", d / "depths.json"]

    return run.stage("inject", inputs, body)


def stage_quantize(run: Run):
    cfg = run.cfg

    def body(d):
        ids, blocks = D.read_vectors(run.fused())
        h = blocks["h"].astype(np.float32)
        res = Q.train_rqvae(h, cfg.quantizer, seed=cfg.seed, item_ids=ids)
        raw = {i: tuple(int(x) for x in res.indices[j]) for j, i in enumerate(ids)}
        before = Q.detect_collisions(raw)
        n_before = sum(len(g) for g in before)
        final = Q.reallocate(raw, {i: res.residuals[j] for j, i in enumerate(ids)},
                             [c.codewords for c in res.codebooks()], cfg.quantizer.realloc_scope)
        n_after = sum(len(g) for g in Q.detect_collisions(final))
        print(f"collisions: {n_before} → {n_after}")
        Q.write_sid_file(final, d / "sids.tsv")
        save_arrays(d / "rqvae.ckpt", res.model.state_dict(), cfg.hash(), {"stage": "quantize"})
        report = {
            "colliding_items_before": n_before,
            "colliding_groups_before": len(before),
            "colliding_items_after": n_after,
            "codebook_usage": [int((c.usage > 0).sum()) for c in res.codebooks()],
            "final_recon": res.epoch_recon[-1] if res.epoch_recon else None,
            "epoch_losses": res.epoch_losses,
        }
        (d / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        return [d / "sids.tsv", d / "rqvae.ckpt", d / "report.json"]

    return run.stage("quantize", [run.fused()], body)


def _vocab(cfg):
    return S.TokenVocab(cfg.quantizer.levels, cfg.quantizer.codebook_size)


def _load_sids(run):
    q = run.cfg.quantizer
    return Q.read_sid_file(run.sids(), q.levels, q.codebook_size)


def stage_pretrain(run: Run):
    cfg = run.cfg

    def body(d):
        if not run.pretraining_enabled():
            reason = "pretrain_objective is none" if cfg.seqmodel.pretrain_objective == "none" else "no source corpora"
            (d / "skipped.json").write_text(json.dumps({"skipped": reason}) + "\n")
            return [d / "skipped.json"]
        sid = _load_sids(run)
        vocab = _vocab(cfg)
        corpora = [S.tokenize_many([s for _, s in D.load_interactions(p).users], sid, vocab, cfg.seqmodel.max_items)
                   for p in run.source_interactions()]
        state, tlog = S.pretrain(corpora, sid, vocab, cfg.seqmodel, seed=cfg.seed)
        S.save_encoder(d / "encoder.ckpt", state, config_hash=cfg.hash(), meta={"stage": "pretrain"})
        tlog.write_csv(d / "log.csv")
        return [d / "encoder.ckpt", d / "log.csv"]

    inputs = [run.sids()] + (run.source_interactions() if run.pretraining_enabled() else [])
    return run.stage("pretrain", inputs, body)


def stage_finetune(run: Run):
    cfg = run.cfg
    use_init = run.pretraining_enabled()

    def body(d):
        sid = _load_sids(run)
        vocab = _vocab(cfg)
        split = D.leave_one_out_split(D.load_interactions(run.target_interactions()))
        tokens = S.tokenize_many(split.train_sequences(), sid, vocab, cfg.seqmodel.max_items)
        init = S.load_encoder(run.pretrain_ckpt(), cfg.seqmodel)[0] if use_init else None
        state, tlog = S.finetune(tokens, init, vocab, cfg.seqmodel, seed=cfg.seed)
        S.save_encoder(d / "encoder.ckpt", state, config_hash=cfg.hash(), meta={"stage": "finetune"})
        tlog.write_csv(d / "log.csv")
        return [d / "encoder.ckpt", d / "log.csv"]

    inputs = [run.sids(), run.target_interactions()] + ([run.pretrain_ckpt()] if use_init else [])
    return run.stage("finetune", inputs, body)


def stage_eval(run: Run):
    cfg = run.cfg
    result = {}

    def body(d):
        sid = _load_sids(run)
        ds = D.load_interactions(run.target_interactions())
        split = D.leave_one_out_split(ds)
        state = S.load_encoder(run.finetune_ckpt(), cfg.seqmodel)[0]
        report = E.evaluate(state, split, {i: sid[i] for i in ds.item_universe},
                            cfg.eval.phase, cfg.eval.batch_size)
        (d / "metrics.json").write_text(report.to_json())
        (d / "metrics.txt").write_text(report.to_text())
        report.write_ranks(d / "ranks.csv")
        print(report.to_text(), end="")
        result["report"] = report
        return [d / "metrics.json", d / "metrics.txt", d / "ranks.csv"]

    run.stage("eval", [run.sids(), run.target_interactions(), run.finetune_ckpt()], body)
    return result["report"]


def export_tokens(run: Run, dest=None):
    dest = Path(dest) if dest else run.out / "tokens.tsv"
    run.manifest.verify([run.sids()])
    sid = _load_sids(run)
    Q.write_sid_file(sid, dest)
    return dest


STAGE_FUNCS = {"synth": stage_synth, "inject": stage_inject, "quantize": stage_quantize,
               "pretrain": stage_pretrain, "finetune": stage_finetune, "eval": stage_eval}


def run_all(cfg: RunConfig):
    run = Run(cfg)
    report = None
    for name in STAGES:
        if name == "synth" and not cfg.data.synthetic:
            continue
        log.info("stage %s", name)
        out = STAGE_FUNCS[name](run)
        if name == "eval":
            report = out
    return report


def with_overrides(cfg: RunConfig, **sections):
    """Copy of ``cfg`` with dataclass sections partially replaced."""
    kw = {}
    for name, val in sections.items():
        cur = getattr(cfg, name)
        kw[name] = replace(cur, **val) if isinstance(val, dict) else val
    return replace(cfg, **kw).validate()
