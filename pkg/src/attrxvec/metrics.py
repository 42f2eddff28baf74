"""Trial lists, score files, EER and normalized minimum DCF."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError


@dataclass(frozen=True)
class Trial:
    enroll: str
    test: str
    is_target: bool


@dataclass
class TrialSet:
    trials: list = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for t in self.trials:
            key = (t.enroll, t.test)
            if key in seen:
                raise DataError(f"duplicate trial {t.enroll} {t.test}")
            seen.add(key)

    def __len__(self):
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)

    @property
    def labels(self):
        return np.array([t.is_target for t in self.trials], dtype=bool)


@dataclass
class ScoreSet:
    trials: TrialSet
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.scores) != len(self.trials):
            raise DataError("one score per trial is required")
        if not np.all(np.isfinite(self.scores)):
            raise DataError("scores must be finite")

    def split(self):
        labels = self.trials.labels
        return self.scores[labels], self.scores[~labels]


def parse_trials(lines, source=None) -> TrialSet:
    trials, seen = [], set()
    for lineno, line in enumerate(lines, start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 3 or fields[2] not in ("target", "nontarget"):
            raise ParseError("expected 'enroll test target|nontarget'", source, lineno)
        if (fields[0], fields[1]) in seen:
            raise ParseError(f"duplicate trial {fields[0]} {fields[1]}", source, lineno)
        seen.add((fields[0], fields[1]))
        trials.append(Trial(fields[0], fields[1], fields[2] == "target"))
    return TrialSet(trials)


def load_trials(path) -> TrialSet:
    with open(path, encoding="utf-8") as fh:
        return parse_trials(fh, str(path))


def write_trials(path, trials: TrialSet):
    Path(path).write_text("".join(
        f"{t.enroll} {t.test} {'target' if t.is_target else 'nontarget'}\n" for t in trials),
        encoding="utf-8")


def parse_scores(lines, trials: TrialSet, source=None) -> ScoreSet:
    position = {(t.enroll, t.test): i for i, t in enumerate(trials)}
    scores = np.full(len(trials), np.nan)
    for lineno, line in enumerate(lines, start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 3:
            raise ParseError("expected 'enroll test score'", source, lineno)
        key = (fields[0], fields[1])
        if key not in position:
            raise ParseError(f"orphan score for unknown trial {key[0]} {key[1]}", source, lineno)
        i = position[key]
        if not np.isnan(scores[i]):
            raise ParseError(f"duplicate score for {key[0]} {key[1]}", source, lineno)
        try:
            scores[i] = float(fields[2])
        except ValueError:
            raise ParseError(f"bad score {fields[2]!r}", source, lineno) from None
    if np.isnan(scores).any():
        missing = trials.trials[int(np.flatnonzero(np.isnan(scores))[0])]
        raise DataError(f"no score for trial {missing.enroll} {missing.test}")
    return ScoreSet(trials, scores)


def load_scores(path, trials: TrialSet) -> ScoreSet:
    with open(path, encoding="utf-8") as fh:
        return parse_scores(fh, trials, str(path))


def format_scores(scores: ScoreSet) -> str:
    return "".join(f"{t.enroll} {t.test} {s!r}\n"
                   for t, s in zip(scores.trials, scores.scores.tolist()))


def write_scores(path, scores: ScoreSet):
    Path(path).write_text(format_scores(scores), encoding="utf-8")


def operating_points(target_scores, nontarget_scores):
    """Miss and false-alarm rates at every distinct decision threshold.

    Trials with score > threshold are accepted.  Thresholds run from below the
    lowest score (no misses) to above the highest (no false alarms), placed at
    midpoints between consecutive distinct scores.  Returns (p_miss, p_fa,
    thresholds) with p_miss non-decreasing.
    """
    tar = np.asarray(target_scores, dtype=np.float64)
    non = np.asarray(nontarget_scores, dtype=np.float64)
    if len(tar) == 0 or len(non) == 0:
        raise DataError("need at least one target and one nontarget score")
    values = np.unique(np.concatenate([tar, non]))
    # miss count at a threshold between values[i] and values[i+1] = #targets <= values[i]
    tar_le = np.searchsorted(np.sort(tar), values, side="right")
    non_le = np.searchsorted(np.sort(non), values, side="right")
    misses = np.concatenate([[0], tar_le])
    false_alarms = len(non) - np.concatenate([[0], non_le])
    mids = (values[:-1] + values[1:]) / 2.0
    thresholds = np.concatenate([[-np.inf], mids, [np.inf]])
    return misses / len(tar), false_alarms / len(non), thresholds


def _crossing(p_miss, p_fa):
    diff = p_miss - p_fa
    i = int(np.flatnonzero(diff >= 0)[0])
    if diff[i] == 0 or i == 0:
        return float(p_miss[i]), i
    m0, f0, m1, f1 = p_miss[i - 1], p_fa[i - 1], p_miss[i], p_fa[i]
    t = (f0 - m0) / ((m1 - m0) - (f1 - f0))
    return float(m0 + t * (m1 - m0)), i


def eer(target_scores, nontarget_scores):
    """Equal error rate in percent, linearly interpolated on the ROC."""
    p_miss, p_fa, _ = operating_points(target_scores, nontarget_scores)
    return 100.0 * _crossing(p_miss, p_fa)[0]


def eer_threshold(target_scores, nontarget_scores):
    p_miss, p_fa, thr = operating_points(target_scores, nontarget_scores)
    return float(thr[_crossing(p_miss, p_fa)[1]])


def min_dcf(target_scores, nontarget_scores, p_target=0.001, c_miss=1.0, c_fa=1.0,
            return_threshold=False):
    """Minimum detection cost, normalized by the cost of the best default decision."""
    p_miss, p_fa, thr = operating_points(target_scores, nontarget_scores)
    cost = c_miss * p_miss * p_target + c_fa * p_fa * (1.0 - p_target)
    i = int(np.argmin(cost))
    value = float(cost[i] / min(c_miss * p_target, c_fa * (1.0 - p_target)))
    return (value, float(thr[i])) if return_threshold else value


@dataclass
class MetricReport:
    eer: float
    min_dcf: float
    eer_threshold: float
    dcf_threshold: float
    n_target: int
    n_nontarget: int
    p_target: float = 0.001

    def rows(self):
        return [("eer_percent", f"{self.eer:.6f}"), ("min_dcf", f"{self.min_dcf:.6f}"),
                ("p_target", repr(self.p_target)), ("eer_threshold", f"{self.eer_threshold:.6f}"),
                ("dcf_threshold", f"{self.dcf_threshold:.6f}"), ("n_target", str(self.n_target)),
                ("n_nontarget", str(self.n_nontarget))]

    def to_text(self):
        return "".join(f"{k}\t{v}\n" for k, v in self.rows())


def evaluate(scores: ScoreSet, p_target=0.001, c_miss=1.0, c_fa=1.0) -> MetricReport:
    tar, non = scores.split()
    dcf, dcf_thr = min_dcf(tar, non, p_target, c_miss, c_fa, return_threshold=True)
    return MetricReport(eer(tar, non), dcf, eer_threshold(tar, non), dcf_thr, len(tar), len(non),
                        p_target)
