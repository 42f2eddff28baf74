"""End-to-end experiment runner.

Stages run in dependency order inside a work directory, one sub-directory per
stage.  Each finished stage leaves ``stage.json`` holding a key (hash of the
config sections it reads, its seed and the hashes of its inputs) and the
SHA-256 of every file it wrote.  A rerun skips stages whose key and outputs
still match; anything else is recomputed, and so is everything downstream of it
because the input hashes change.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import archive, attributes, backend, metrics, synth, tying
from .checkpoint import load_checkpoint, save_checkpoint
from .config import VARIANT_MODE, ExperimentConfig, format_config_section
from .errors import AttrxvecError, DataError, ParseError
from .frontend import FrontendConfig, extract, read_wav, sliding_cmn
from .mtl import MTLCfg, MTLNet
from .train import History, TrainConfig, alternating_train, nsa_frame_accuracy, train_xvector
from .xvector import XVector, XVectorCfg

log = logging.getLogger(__name__)

STAGES = ("generate", "features", "attributes", "tie", "train", "embed", "backend", "score",
          "evaluate")
NSA_STAGES = ("attributes", "tie")

# config sections each stage reads; part of the stage key
READS = {
    "generate": ("corpus",),
    "features": ("features",),
    "attributes": ("nsa_corpus", "corpus"),
    "tie": ("tying",),
    "train": ("network", "training", "nsa_corpus"),
    "embed": (),
    "backend": ("backend",),
    "score": ("corpus",),
    "evaluate": ("eval",),
}

# upstream outputs each stage consumes, as (stage, output name)
CONSUMES = {
    "generate": (),
    "features": (("generate", "manifest"), ("generate", "raw")),
    "attributes": (),
    "tie": (("attributes", "alignments"), ("attributes", "inventory")),
    "train": (("generate", "manifest"), ("features", "feats"), ("attributes", "feats"),
              ("tie", "labels")),
    "embed": (("train", "model"), ("features", "feats")),
    "backend": (("generate", "manifest"), ("embed", "embeddings")),
    "score": (("generate", "manifest"), ("embed", "embeddings"), ("backend", "model")),
    "evaluate": (("score", "trials"), ("score", "scores"), ("train", "summary"),
                 ("train", "history")),
}


class StageError(AttrxvecError):
    """A stage failed; carries the stage name and keeps the cause's exit code."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.exit_code = getattr(cause, "exit_code", 2)


def stage_seed(master: int, stage: str) -> int:
    """Per-stage seed derived from the master seed and the stage name."""
    seq = np.random.SeedSequence([master, zlib.crc32(stage.encode("ascii"))])
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def stage_plan(cfg: ExperimentConfig):
    return [s for s in STAGES if cfg.uses_nsa or s not in NSA_STAGES]


# -- small text formats ----------------------------------------------------------


def format_history(history: History) -> str:
    lines = ["step\ttask\tloss\taccuracy\tlr"]
    for s in history.steps:
        lines.append(f"{s['step']}\t{s['task']}\t{s['loss']!r}\t{s['accuracy']!r}\t{s['lr']!r}")
    return "\n".join(lines) + "\n"


def parse_history(text: str) -> History:
    history = History()
    for line in text.splitlines()[1:]:
        step, task, loss, acc, lr = line.split("\t")
        history.steps.append({"step": int(step), "task": task, "loss": float(loss),
                              "accuracy": float(acc), "lr": float(lr)})
    return history


def parse_frame_labels(lines, source=None) -> dict:
    """Lines ``utt id id id ...``, one per utterance."""
    out = {}
    for lineno, raw in enumerate(lines, start=1):
        fields = raw.split()
        if not fields:
            continue
        if fields[0] in out or len(fields) < 2:
            raise ParseError("expected 'utt label label ...' with a unique utterance id",
                             source, lineno)
        try:
            out[fields[0]] = np.array([int(v) for v in fields[1:]], dtype=np.int64)
        except ValueError:
            raise ParseError("labels must be integers", source, lineno) from None
        if out[fields[0]].min() < 0:
            raise ParseError("labels must be non-negative", source, lineno)
    return out


def save_labels(path, labels: dict, meta: dict) -> str:
    return archive.write_container(path, "frame-labels", meta,
                                   {u: np.asarray(v, dtype=np.int32) for u, v in labels.items()})


def load_labels(path):
    meta, arrays = archive.read_container(path, "frame-labels")
    return meta, {u: a.astype(np.int64) for u, a in arrays.items()}


def heldout_split(utts, fraction):
    """Deterministic held-out split: the last ``fraction`` of the sorted ids."""
    utts = sorted(utts)
    n_held = int(math.ceil(fraction * len(utts))) if fraction > 0 else 0
    if n_held >= len(utts):
        raise DataError("the NSA held-out split leaves no training utterances")
    return utts[:len(utts) - n_held], utts[len(utts) - n_held:]


def speaker_index(manifest: synth.Manifest, split="train"):
    speakers = manifest.subset(split).speakers()
    index = {s: i for i, s in enumerate(speakers)}
    return {r.utt_id: index[r.speaker] for r in manifest.subset(split).records}


# -- the runner ------------------------------------------------------------------


@dataclass
class StageResult:
    name: str
    outputs: dict  # output name -> path
    hashes: dict  # output name -> sha256
    cached: bool


class Experiment:
    def __init__(self, cfg: ExperimentConfig, work_dir):
        self.cfg = cfg.validate()
        self.work = Path(work_dir)
        self.results: dict[str, StageResult] = {}

    def dir(self, stage):
        d = self.work / stage
        d.mkdir(parents=True, exist_ok=True)
        return d

    def seed(self, stage):
        return stage_seed(self.cfg.experiment.seed, stage)

    def output(self, stage, name):
        result = self.results.get(stage)
        if result is None or name not in result.outputs:
            return None
        return result.outputs[name]

    def _key(self, stage):
        parts = {"stage": stage, "seed": self.seed(stage), "variant": self.cfg.variant,
                 "config": [format_config_section(self.cfg, s) for s in READS[stage]], "inputs": {}}
        for up, name in CONSUMES[stage]:
            if up in self.results and name in self.results[up].hashes:
                parts["inputs"][f"{up}.{name}"] = self.results[up].hashes[name]
        return hashlib.sha256(json.dumps(parts, sort_keys=True).encode("utf-8")).hexdigest()

    def _cached(self, stage, key):
        marker = self.work / stage / "stage.json"
        if not marker.exists():
            return None
        try:
            info = json.loads(marker.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            return None
        if info.get("key") != key:
            log.info("stage %s: configuration or inputs changed, rerunning", stage)
            return None
        outputs = {}
        for name, rec in info["outputs"].items():
            path = self.work / stage / rec["file"]
            if not path.exists() or archive.file_sha256(path) != rec["sha256"]:
                log.warning("stage %s: stale or missing artifact %s, rerunning", stage, rec["file"])
                return None
            outputs[name] = path
        return StageResult(stage, outputs, {n: r["sha256"] for n, r in info["outputs"].items()},
                           True)

    def run_stage(self, stage, force=False):
        key = self._key(stage)
        result = None if force else self._cached(stage, key)
        if result is None:
            log.info("stage %s: running", stage)
            try:
                files = getattr(self, f"_stage_{stage}")(self.dir(stage))
            except StageError:
                raise
            except AttrxvecError as exc:
                raise StageError(stage, exc) from exc
            except (OSError, ValueError) as exc:
                raise StageError(stage, DataError(str(exc))) from exc
            hashes = {n: archive.file_sha256(p) for n, p in files.items()}
            marker = {"stage": stage, "key": key,
                      "outputs": {n: {"file": Path(p).name, "sha256": hashes[n]}
                                  for n, p in sorted(files.items())}}
            (self.work / stage / "stage.json").write_text(
                json.dumps(marker, indent=1, sort_keys=True) + "\n", encoding="utf-8")
            result = StageResult(stage, dict(files), hashes, False)
        else:
            log.info("stage %s: up to date", stage)
        self.results[stage] = result
        return result

    def run(self, until=None, force=()):
        plan = stage_plan(self.cfg)
        if until is not None:
            if until not in plan:
                raise DataError(f"stage {until!r} is not part of the {self.cfg.variant} pipeline")
            plan = plan[:plan.index(until) + 1]
        limits = threadpool_limits(1) if self.cfg.experiment.single_threaded else None
        try:
            for stage in plan:
                self.run_stage(stage, force=stage in force)
        finally:
            if limits is not None:
                limits.unregister()
        return self.results

    # -- stages ------------------------------------------------------------------

    def _stage_generate(self, out):
        c = self.cfg.corpus
        files = {"manifest": out / "manifest.txt"}
        if c.manifest:
            src = self.cfg.resolve(c.manifest)
            manifest = synth.load_manifest(src)
            manifest.validate_paths(src.parent)
            def absolute(p):
                return p if p == "-" else str((src.parent / p).resolve())
            records = [synth.Record(r.utt_id, r.speaker, r.split, absolute(r.path),
                                    absolute(r.alignment)) for r in manifest.records]
            if any(r.path == "-" for r in records):
                raise DataError("every manifest record needs an audio or feature path")
            manifest = synth.Manifest(records)
        else:
            scfg = synth.SpeakerCorpusConfig(c.n_speakers, c.utts_per_speaker, c.eval_speakers,
                                             c.eval_utts_per_speaker, c.frames_per_utt, c.feat_dim,
                                             c.between_within_ratio, c.within_std,
                                             self.seed("generate"))
            manifest, feats = synth.synth_speaker_corpus(scfg)
            archive.write_matrix_archive(out / "raw", feats)
            files["raw"] = out / "raw.ark"
        if not manifest.subset("train").records or not manifest.subset("eval").records:
            raise DataError("the manifest needs both 'train' and 'eval' records")
        synth.save_manifest(files["manifest"], manifest)
        return files

    def _stage_features(self, out):
        f = self.cfg.features
        manifest = synth.load_manifest(self.output("generate", "manifest"))
        raw = self.output("generate", "raw")
        if raw is not None:
            feats = archive.read_matrix_archive(Path(raw).with_suffix(""))
            if f.cmn:
                feats = {u: sliding_cmn(x, f.cmn_window_s) for u, x in feats.items()}
        else:
            fcfg = FrontendConfig(sample_rate=f.sample_rate, cmn_window_s=f.cmn_window_s)
            feats, arks = {}, {}
            for rec in manifest.records:
                if rec.path.lower().endswith(".wav"):
                    feats[rec.utt_id] = extract(read_wav(rec.path), fcfg, apply_cmn=f.cmn,
                                                apply_vad=f.vad)
                    continue
                # precomputed features: "<archive>.ark#<utt>" or "<archive>.ark"
                ark, _, key = rec.path.partition("#")
                if ark not in arks:
                    arks[ark] = archive.read_matrix_archive(Path(ark).with_suffix(""))
                key = key or rec.utt_id
                if key not in arks[ark]:
                    raise DataError(f"{rec.utt_id}: {key} not found in {ark}")
                x = arks[ark][key]
                feats[rec.utt_id] = sliding_cmn(x, f.cmn_window_s) if f.cmn else x
        archive.write_features(out, {u: feats[u] for u in sorted(feats)})
        return {"feats": out / "feats.ark"}

    def _stage_attributes(self, out):
        n = self.cfg.nsa_corpus
        amap = (attributes.load_attribute_map(self.cfg.resolve(n.attribute_map)) if n.attribute_map
                else attributes.default_attribute_map())
        inventory = attributes.derive_saus(amap)
        files = {"inventory": out / "inventory.txt", "alignments": out / "alignments.txt",
                 "feats": out / "feats.ark"}
        files["inventory"].write_text(attributes.format_inventory(inventory), encoding="utf-8")
        if n.alignments:
            path = self.cfg.resolve(n.alignments)
            symbols = None
            if n.alignment_units == "phoneme":
                index = {(s.manner, s.place): s.id for s in inventory}
                symbols = {ph: index[pair] for ph, pair in amap.entries.items()}
            with open(path, encoding="utf-8") as fh:
                alignments = tying.parse_alignments(fh, str(path), symbols)
            feats = archive.read_features(self.cfg.resolve(n.features))
            for utt, ali in alignments.items():
                if utt not in feats or len(feats[utt]) != len(ali):
                    raise DataError(f"{utt}: alignment and features disagree on frame count")
            feats = {u: feats[u] for u in alignments}
        else:
            scfg = tying.SynthAlignmentConfig(len(inventory), n.n_utts, n.saus_per_utt,
                                              n.frames_per_state, self.cfg.corpus.feat_dim,
                                              tying.N_STATES, n.center_scale, n.context_scale,
                                              n.noise_std, self.seed("attributes"))
            alignments, feats = tying.synth_alignment(scfg)
        files["alignments"].write_text(tying.format_alignments(alignments), encoding="utf-8")
        archive.write_matrix_archive(out / "feats", feats)
        return files

    def _stage_tie(self, out):
        t = self.cfg.tying
        with open(self.output("attributes", "alignments"), encoding="utf-8") as fh:
            alignments = tying.parse_alignments(fh)
        files = {"labels": out / "labels.bin"}
        if t.label_source == "external":
            path = self.cfg.resolve(t.external_labels)
            with open(path, encoding="utf-8") as fh:
                labels = parse_frame_labels(fh, str(path))
            missing = sorted(set(alignments) - set(labels))
            if missing:
                raise DataError(f"external labels lack utterance {missing[0]}")
            for utt, ali in alignments.items():
                if len(labels[utt]) != len(ali):
                    raise DataError(f"{utt}: external labels have {len(labels[utt])} frames, "
                                    f"features have {len(ali)}")
            labels = {u: labels[u] for u in alignments}
            count = int(max(v.max() for v in labels.values())) + 1
        else:
            feats = archive.read_matrix_archive(Path(self.output("attributes", "feats")).with_suffix(""))
            inventory = attributes.parse_inventory(
                Path(self.output("attributes", "inventory")).read_text(encoding="utf-8"))
            stats = tying.merge_stats(*[tying.accumulate_stats(alignments[u], feats[u])
                                        for u in sorted(alignments)])
            tree = tying.build_tree(stats, tying.make_questions(inventory), t.target_leaves,
                                    t.min_gain, n_sau=len(inventory))
            tying.save_tree(tree, out / "tree.txt")
            files["tree"] = out / "tree.txt"
            labels = {u: tree.relabel(alignments[u]) for u in sorted(alignments)}
            count = tree.nsa_count
        save_labels(files["labels"], labels, {"nsa_count": count, "source": t.label_source})
        return files

    def _network_cfg(self, n_speakers):
        net = self.cfg.network
        return XVectorCfg(feat_dim=self.cfg.corpus.feat_dim, frame_dims=net.frame_dims,
                          segment_dims=net.segment_dims, n_speakers=n_speakers, dtype=net.dtype)

    def _stage_train(self, out):
        tr = self.cfg.training
        seed = self.seed("train")
        manifest = synth.load_manifest(self.output("generate", "manifest"))
        feats = archive.read_features(self.output("features", "feats"))
        dims = {x.shape[1] for x in feats.values()}
        if dims != {self.cfg.corpus.feat_dim}:
            raise DataError(f"feature dimensions {sorted(dims)} do not match corpus.feat_dim")
        spk_labels = speaker_index(manifest)
        tcfg = TrainConfig(tr.epochs, tr.batch_size, tr.lr_initial, tr.lr_final, tr.lr_shape,
                           tr.weight_decay, tr.chunk_min_s, tr.chunk_max_s, 0.010,
                           tr.schedule if self.cfg.uses_nsa else ("speaker",), seed)
        xcfg = self._network_cfg(len(set(spk_labels.values())))
        summary = {"variant": self.cfg.variant, "n_train_speakers": xcfg.n_speakers,
                   "n_train_utts": len(spk_labels)}
        if not self.cfg.uses_nsa:
            net, opt, history = train_xvector(XVector(xcfg, seed=seed), feats, spk_labels, tcfg)
        else:
            meta, labels = load_labels(self.output("tie", "labels"))
            nsa_feats = archive.read_matrix_archive(Path(self.output("attributes", "feats")).with_suffix(""))
            train_utts, held_utts = heldout_split(labels, self.cfg.nsa_corpus.heldout_fraction)
            net = self.cfg.network
            mcfg = MTLCfg(xcfg, meta["nsa_count"], net.nsa_fc_dim, net.cross_stitch_layers,
                          net.alpha_init, VARIANT_MODE[self.cfg.variant], net.alpha_granularity)
            model = MTLNet(mcfg, seed=seed)
            net, opt, history = alternating_train(
                model, (feats, spk_labels), (nsa_feats, {u: labels[u] for u in train_utts}), tcfg)
            summary["nsa_count"] = meta["nsa_count"]
            summary["nsa_train_utts"] = len(train_utts)
            summary["nsa_heldout_utts"] = len(held_utts)
            eval_utts = held_utts or train_utts
            summary["nsa_accuracy"] = nsa_frame_accuracy(net, nsa_feats,
                                                         {u: labels[u] for u in eval_utts})
            summary["nsa_chance"] = 1.0 / meta["nsa_count"]
            summary["alphas"] = {k: [float(x) for x in np.ravel(v)] for k, v in net.alphas().items()}
        speaker_losses = history.losses("speaker")
        summary["final_speaker_loss"] = float(speaker_losses[-1])
        summary["steps"] = len(history.steps)
        files = {"model": out / "model.ckpt", "history": out / "history.tsv",
                 "summary": out / "summary.json"}
        save_checkpoint(files["model"], net, opt)
        files["history"].write_text(format_history(history), encoding="utf-8")
        files["summary"].write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n",
                                    encoding="utf-8")
        return files

    def _stage_embed(self, out):
        net, _ = load_checkpoint(self.output("train", "model"))
        feats = archive.read_features(self.output("features", "feats"))
        emb = {u: net.extract_embedding(feats[u]) for u in sorted(feats)}
        archive.write_embeddings(out / "embeddings", emb)
        return {"embeddings": out / "embeddings.ark"}

    def _stage_backend(self, out):
        b = self.cfg.backend
        manifest = synth.load_manifest(self.output("generate", "manifest"))
        emb = archive.read_embeddings(self.output("embed", "embeddings"))
        train = manifest.subset("train").records
        x = np.stack([emb[r.utt_id] for r in train]).astype(np.float64)
        labels = [r.speaker for r in train]
        dim = min(b.lda_dim, x.shape[1], len(set(labels)) - 1)
        if dim < b.lda_dim:
            log.info("LDA dimension reduced from %d to %d by the training data", b.lda_dim, dim)
        model = backend.train_backend(x, labels, dim, b.em_iters, b.length_norm)
        backend.save_backend(out / "backend.bin", model)
        return {"model": out / "backend.bin"}

    def _stage_score(self, out):
        c = self.cfg.corpus
        manifest = synth.load_manifest(self.output("generate", "manifest"))
        emb = archive.read_embeddings(self.output("embed", "embeddings"))
        model = backend.load_backend(self.output("backend", "model"))
        trials = synth.make_trials(manifest.subset("eval"), c.trial_policy, c.nontarget_ratio,
                                   self.seed("score"))
        scorer = model.scorer()
        scores = metrics.ScoreSet(trials, np.array([scorer.score(emb[t.enroll], emb[t.test])
                                                    for t in trials]))
        files = {"trials": out / "trials.txt", "scores": out / "scores.txt"}
        metrics.write_trials(files["trials"], trials)
        metrics.write_scores(files["scores"], scores)
        return files

    def _stage_evaluate(self, out):
        e = self.cfg.eval
        trials = metrics.load_trials(self.output("score", "trials"))
        scores = metrics.load_scores(self.output("score", "scores"), trials)
        rep = metrics.evaluate(scores, e.p_target, e.c_miss, e.c_fa)
        summary = json.loads(Path(self.output("train", "summary")).read_text(encoding="utf-8"))
        rows = [("variant", self.cfg.variant), ("seed", str(self.cfg.experiment.seed))]
        rows += rep.rows()
        rows += [("n_train_speakers", str(summary["n_train_speakers"])),
                 ("final_speaker_loss", f"{summary['final_speaker_loss']:.6f}")]
        if "nsa_count" in summary:
            rows += [("nsa_count", str(summary["nsa_count"])),
                     ("nsa_accuracy", f"{summary['nsa_accuracy']:.6f}"),
                     ("nsa_chance", f"{summary['nsa_chance']:.6f}"),
                     ("nsa_accuracy_over_chance",
                      f"{summary['nsa_accuracy'] / summary['nsa_chance']:.4f}")]
        for stage in STAGES[:-1]:
            if stage in self.results:
                for name, digest in sorted(self.results[stage].hashes.items()):
                    rows.append((f"sha256.{stage}.{name}", digest))
        files = {"report": out / "report.tsv"}
        files["report"].write_text("".join(f"{k}\t{v}\n" for k, v in rows), encoding="utf-8")
        if e.figures:
            from .plotting import plot_score_histogram, plot_training_curves
            tar, non = scores.split()
            history = parse_history(Path(self.output("train", "history")).read_text(encoding="utf-8"))
            plot_training_curves(history, out / "loss.png")
            plot_score_histogram(tar, non, out / "scores.png", threshold=rep.eer_threshold)
            files["loss_figure"] = out / "loss.png"
            files["score_figure"] = out / "scores.png"
        return files


def run(cfg: ExperimentConfig, work_dir, until=None, force=()):
    """Run (or resume) the experiment; returns the report path once evaluation has run."""
    exp = Experiment(cfg, work_dir)
    results = exp.run(until=until, force=force)
    if "evaluate" in results:
        return results["evaluate"].outputs["report"]
    return None


def read_report(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        key, value = line.split("\t", 1)
        out[key] = value
    return out
