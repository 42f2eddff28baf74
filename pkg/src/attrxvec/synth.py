"""Synthetic speaker corpora, manifests and trial lists."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError
from .metrics import Trial, TrialSet


@dataclass
class SpeakerCorpusConfig:
    n_speakers: int = 50
    utts_per_speaker: int = 6
    eval_speakers: int = 20
    eval_utts_per_speaker: int = 6
    frames_per_utt: int = 400
    feat_dim: int = 30
    between_within_ratio: float = 10.0
    within_std: float = 1.0
    seed: int = 0

    def validate(self):
        ints = ("n_speakers", "utts_per_speaker", "frames_per_utt", "feat_dim")
        if any(getattr(self, k) < 1 for k in ints) or self.eval_speakers < 0:
            raise DataError("synthetic corpus sizes must be positive")
        if self.between_within_ratio < 0 or self.within_std <= 0:
            raise DataError("synthetic corpus needs ratio >= 0 and within_std > 0")


@dataclass(frozen=True)
class Record:
    utt_id: str
    speaker: str
    split: str = "train"
    path: str = "-"
    alignment: str = "-"


@dataclass
class Manifest:
    records: list

    def __post_init__(self):
        ids = [r.utt_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DataError("manifest utterance ids must be unique")

    def __len__(self):
        return len(self.records)

    def subset(self, split):
        return Manifest([r for r in self.records if r.split == split])

    def speakers(self):
        return sorted({r.speaker for r in self.records})

    def utt2spk(self):
        return {r.utt_id: r.speaker for r in self.records}

    def validate_paths(self, root="."):
        for r in self.records:
            for p in (r.path, r.alignment):
                if p != "-" and not (Path(root) / p.split("#")[0]).exists():
                    raise DataError(f"{r.utt_id}: referenced file {p} does not exist")


def format_manifest(manifest: Manifest) -> str:
    lines = ["# utt_id speaker split path alignment"]
    lines += [f"{r.utt_id} {r.speaker} {r.split} {r.path} {r.alignment}" for r in manifest.records]
    return "\n".join(lines) + "\n"


def parse_manifest(lines, source=None) -> Manifest:
    records = []
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if not 2 <= len(fields) <= 5:
            raise ParseError("expected 'utt_id speaker [split [path [alignment]]]'", source, lineno)
        records.append(Record(*fields))
    return Manifest(records)


def load_manifest(path) -> Manifest:
    with open(path, encoding="utf-8") as fh:
        return parse_manifest(fh, str(path))


def save_manifest(path, manifest: Manifest):
    Path(path).write_text(format_manifest(manifest), encoding="utf-8")


def synth_speaker_corpus(cfg: SpeakerCorpusConfig):
    """Speaker-conditional Gaussian features.

    Speaker means are drawn with variance ``ratio * within_std**2`` per
    dimension and frames scatter around them with ``within_std``.  Training and
    held-out evaluation speakers are disjoint.
    """
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 3])
    between_std = np.sqrt(cfg.between_within_ratio) * cfg.within_std
    records, feats = [], {}
    plan = [("train", "spk", cfg.n_speakers, cfg.utts_per_speaker),
            ("eval", "evl", cfg.eval_speakers, cfg.eval_utts_per_speaker)]
    for split, prefix, n_spk, n_utt in plan:
        for s in range(n_spk):
            speaker = f"{prefix}{s:04d}"
            mean = between_std * rng.standard_normal(cfg.feat_dim)
            for u in range(n_utt):
                utt = f"{speaker}-{u:03d}"
                noise = cfg.within_std * rng.standard_normal((cfg.frames_per_utt, cfg.feat_dim))
                feats[utt] = (mean + noise).astype(np.float32)
                records.append(Record(utt, speaker, split))
    return Manifest(records), feats


def make_trials(manifest: Manifest, policy="exhaustive", nontarget_ratio=4.0, seed=0) -> TrialSet:
    """Enrollment/test pairs over distinct utterances.

    ``exhaustive`` emits every unordered pair once.  ``sampled`` keeps every
    target pair plus ``nontarget_ratio`` times as many random nontarget pairs.
    """
    records = sorted(manifest.records, key=lambda r: r.utt_id)
    if len({r.speaker for r in records}) < 2:
        raise DataError("trials need at least two speakers")
    pairs = [(a, b) for a, b in itertools.combinations(records, 2)]
    targets = [p for p in pairs if p[0].speaker == p[1].speaker]
    nontargets = [p for p in pairs if p[0].speaker != p[1].speaker]
    if policy == "sampled":
        rng = np.random.default_rng([seed, 4])
        k = min(len(nontargets), int(round(nontarget_ratio * len(targets))))
        keep = np.sort(rng.choice(len(nontargets), size=k, replace=False))
        nontargets = [nontargets[i] for i in keep]
    elif policy != "exhaustive":
        raise DataError(f"unknown trial policy {policy!r}")
    chosen = sorted(targets + nontargets, key=lambda p: (p[0].utt_id, p[1].utt_id))
    return TrialSet([Trial(a.utt_id, b.utt_id, a.speaker == b.speaker) for a, b in chosen])
