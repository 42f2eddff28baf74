import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attrxvec.errors import DataError, ParseError
from attrxvec.metrics import (ScoreSet, Trial, TrialSet, eer, evaluate, format_scores, load_scores,
                              load_trials, min_dcf, operating_points, parse_scores, parse_trials,
                              write_scores, write_trials)
from oracles import sweep_eer, sweep_min_dcf


def test_perfect_separation():
    assert eer([0.9, 0.8], [0.2, 0.1]) == 0.0
    assert min_dcf([0.9, 0.8], [0.2, 0.1]) == 0.0


def test_interleaved_scores_give_fifty_percent():
    assert eer([0.9, 0.2], [0.8, 0.1]) == pytest.approx(50.0)


def test_min_dcf_worked_example():
    value, threshold = min_dcf([3, 1], [2, 0], return_threshold=True)
    assert value == pytest.approx(0.5)
    assert 2 < threshold < 3


def test_uninformative_scores():
    assert min_dcf([1.0] * 5, [1.0] * 7) == pytest.approx(1.0)
    assert eer([1.0] * 5, [1.0] * 7) == pytest.approx(50.0)


def test_operating_points_shape():
    p_miss, p_fa, thr = operating_points([1, 3], [2, 0])
    np.testing.assert_array_equal(p_miss, [0, 0, 0.5, 0.5, 1])
    np.testing.assert_array_equal(p_fa, [1, 0.5, 0.5, 0, 0])
    assert thr[0] == -np.inf and thr[-1] == np.inf
    with pytest.raises(DataError):
        operating_points([], [1.0])


scores = st.lists(st.integers(-6, 6).map(float), min_size=1, max_size=5)


@settings(max_examples=300, deadline=None)
@given(scores, scores)
def test_matches_exhaustive_sweep(tar, non):
    assert eer(tar, non) == pytest.approx(sweep_eer(tar, non), abs=1e-9)
    for p in (0.001, 0.01, 0.5):
        assert min_dcf(tar, non, p) == pytest.approx(sweep_min_dcf(tar, non, p), abs=1e-9)
    assert min_dcf(tar, non, 0.2, c_miss=10, c_fa=1) == pytest.approx(
        sweep_min_dcf(tar, non, 0.2, 10, 1), abs=1e-9)


@settings(max_examples=200, deadline=None)
# quarter-integer grids keep every transform strictly increasing in floating point
@given(st.lists(st.integers(-200, 200).map(lambda k: k / 4), min_size=1, max_size=10),
       st.lists(st.integers(-200, 200).map(lambda k: k / 4), min_size=1, max_size=10),
       st.floats(-100, 100), st.floats(0.01, 10))
def test_invariant_under_increasing_transforms(tar, non, shift, scale):
    tar, non = np.array(tar), np.array(non)
    base_eer, base_dcf = eer(tar, non), min_dcf(tar, non)
    assert 0 <= base_dcf <= 1 + 1e-12
    assert 0 <= base_eer <= 100
    for f in (lambda v: v + shift, lambda v: scale * v, np.arctan, lambda v: np.exp(v / 10)):
        assert eer(f(tar), f(non)) == pytest.approx(base_eer, abs=1e-9)
        assert min_dcf(f(tar), f(non)) == pytest.approx(base_dcf, abs=1e-9)


def test_evaluate_report_rows():
    trials = TrialSet([Trial("a", "b", True), Trial("a", "c", False), Trial("b", "c", False)])
    report = evaluate(ScoreSet(trials, [2.0, 1.0, 0.0]))
    rows = dict(report.rows())
    assert rows["eer_percent"] == "0.000000" and rows["n_target"] == "1"
    assert report.to_text().count("\n") == len(report.rows())


def test_trial_parsing():
    trials = parse_trials(["spkA uttB target", "", "spkA uttC nontarget"])
    assert trials.trials[0] == Trial("spkA", "uttB", True)
    assert list(trials.labels) == [True, False]
    with pytest.raises(ParseError, match="2"):
        parse_trials(["a b target", "a c maybe"])
    with pytest.raises(ParseError):
        parse_trials(["a b target", "a b nontarget"])
    with pytest.raises(DataError):
        TrialSet([Trial("a", "b", True), Trial("a", "b", False)])


def test_score_parsing_errors():
    trials = parse_trials(["a b target", "a c nontarget"])
    with pytest.raises(ParseError, match="orphan"):
        parse_scores(["a b 1.0", "a z 2.0"], trials)
    with pytest.raises(DataError, match="no score"):
        parse_scores(["a b 1.0"], trials)
    with pytest.raises(ParseError):
        parse_scores(["a b 1.0", "a b 2.0"], trials)
    with pytest.raises(ParseError):
        parse_scores(["a b x", "a c 1"], trials)
    with pytest.raises(DataError):
        parse_scores(["a b nan", "a c 1"], trials)


def test_round_trips(tmp_path):
    rng = np.random.default_rng(0)
    trials = TrialSet([Trial(f"e{i}", f"t{i}", bool(i % 2)) for i in range(20)])
    write_trials(tmp_path / "trials", trials)
    assert load_trials(tmp_path / "trials").trials == trials.trials
    scores = ScoreSet(trials, rng.normal(size=20))
    write_scores(tmp_path / "scores", scores)
    again = load_scores(tmp_path / "scores", trials)
    np.testing.assert_array_equal(again.scores, scores.scores)
    assert format_scores(again) == format_scores(scores)
