import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attrxvec import tying
from attrxvec.attributes import default_attribute_map, derive_saus
from attrxvec.errors import DataError, FormatError, ParseError
from attrxvec.tying import (
    BOUNDARY,
    GaussianStats,
    Question,
    TriSAUContext,
    accumulate_stats,
    build_tree,
    make_questions,
    merge_stats,
    node_loglik,
    split_gain,
)

from oracles import brute_force_best_split, brute_force_tree, pooled_loglik, random_tying_instance

INVENTORY = derive_saus(default_attribute_map())


def ctx(l, c, r, s=0):
    return TriSAUContext(l, c, r, s)


def stats_from_frames(frames):
    return {TriSAUContext(*c): GaussianStats.from_frames(x) for c, x in frames.items()}


def questions_from(qspec):
    return [Question(f"q{i}", ids, side) for i, (ids, side) in enumerate(qspec)]


@pytest.fixture(scope="module")
def corpus():
    ali, feats = tying.synth_alignment(tying.SynthAlignmentConfig(n_utts=12, saus_per_utt=40, dim=4))
    stats = merge_stats(*[accumulate_stats(ali[u], feats[u]) for u in sorted(ali)])
    return ali, feats, stats


# -- sufficient statistics ----------------------------------------------------------


def test_accumulate_hand_values():
    stats = accumulate_stats([ctx(0, 1, 2)] * 3, np.array([0.0, 2.0, 4.0]))
    st_ = stats[ctx(0, 1, 2)]
    assert st_.count == 3
    np.testing.assert_array_equal(st_.sum, [6.0])
    np.testing.assert_array_equal(st_.sumsq, [20.0])


def test_empty_alignment_gives_empty_map():
    assert accumulate_stats([], np.zeros((0, 3))) == {}


def test_length_mismatch():
    with pytest.raises(DataError):
        accumulate_stats([ctx(0, 1, 2)] * 2, np.zeros((3, 2)))


def test_merge_equals_concatenation():
    rng = np.random.default_rng(0)
    ali_a = [ctx(int(rng.integers(3)), 0, 1) for _ in range(20)]
    ali_b = [ctx(int(rng.integers(3)), 0, 1) for _ in range(15)]
    xa, xb = rng.normal(size=(20, 3)), rng.normal(size=(15, 3))
    merged = merge_stats(accumulate_stats(ali_a, xa), accumulate_stats(ali_b, xb))
    whole = accumulate_stats(ali_a + ali_b, np.vstack([xa, xb]))
    assert merged.keys() == whole.keys()
    for k in whole:
        assert merged[k].count == whole[k].count
        np.testing.assert_allclose(merged[k].sum, whole[k].sum, rtol=1e-12)
        np.testing.assert_allclose(merged[k].sumsq, whole[k].sumsq, rtol=1e-12)


def test_counts_sum_to_frames(corpus):
    ali, _, stats = corpus
    assert sum(s.count for s in stats.values()) == sum(len(a) for a in ali.values())


# -- likelihood criterion -----------------------------------------------------------


def test_node_loglik_hand_value():
    value = node_loglik(GaussianStats.from_frames(np.array([[0.0], [2.0]])))
    assert value == pytest.approx(-(math.log(2 * math.pi) + 1), abs=1e-12)
    assert value == pytest.approx(-2.8379, abs=1e-4)


def test_node_loglik_constant_data_is_floored():
    value = node_loglik(GaussianStats.from_frames(np.full((5, 2), 3.0)))
    assert np.isfinite(value)
    assert value == pytest.approx(-0.5 * 5 * 2 * (math.log(2 * math.pi * 1e-6) + 1))


def test_node_loglik_empty():
    with pytest.raises(DataError):
        node_loglik(GaussianStats.zeros(2))


@given(st.lists(st.integers(-1000, 1000), min_size=2, max_size=30), st.randoms(use_true_random=False))
def test_node_loglik_order_invariant(values, rnd):
    # integer data keeps the sufficient statistics exact, so any difference would be real
    x = np.array(values)[:, None]
    shuffled = x[rnd.sample(range(len(x)), len(x))]
    a = node_loglik(GaussianStats.from_frames(x))
    b = node_loglik(GaussianStats.from_frames(shuffled))
    assert a == b


def test_node_loglik_matches_raw_frame_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = rng.normal(rng.normal(size=3), rng.uniform(0.1, 3), size=(int(rng.integers(2, 50)), 3))
        assert node_loglik(GaussianStats.from_frames(x)) == pytest.approx(pooled_loglik(x), rel=1e-9)


def test_split_gain_hand_value():
    a, b = ctx(0, 5, 1), ctx(2, 5, 1)
    stats = {a: GaussianStats.from_frames(np.array([[0.0], [2.0]])),
             b: GaussianStats.from_frames(np.array([[10.0], [12.0]]))}
    node = stats[a] + stats[b]
    gain = split_gain(node, Question("q", frozenset([0]), "left"), stats)
    assert gain == pytest.approx(2 * math.log(26), abs=1e-9)
    assert gain == pytest.approx(6.52, abs=5e-3)


def test_split_gain_empty_side_sentinel():
    stats = {ctx(0, 5, 1): GaussianStats.from_frames(np.array([[0.0], [2.0]]))}
    node = stats[ctx(0, 5, 1)]
    assert split_gain(node, Question("q", frozenset([3]), "left"), stats) == -math.inf


def test_split_gain_matches_build_tree_first_split(corpus):
    _, _, stats = corpus
    root = min({c.root for c in stats})
    sub = {c: s for c, s in stats.items() if c.root == root}
    qs = make_questions(INVENTORY)
    node = merge_stats(*[{TriSAUContext(0, 0, 0, 0): s} for s in sub.values()])[TriSAUContext(0, 0, 0, 0)]
    gains = [split_gain(node, q, sub) for q in qs]
    tree = build_tree(sub, qs, 2)
    assert tree.roots[root].question == int(np.argmax(gains))


# -- questions ------------------------------------------------------------------------


def test_questions_are_proper_nonempty_subsets():
    qs = make_questions(INVENTORY)
    ids = {s.id for s in INVENTORY}
    assert qs
    for q in qs:
        assert q.sau_set and q.sau_set < ids
        assert q.applies_to in ("left", "right")
    names = [q.name for q in qs]
    assert len(names) == len(set(names))
    for side in ("left", "right"):
        sets = [q.sau_set for q in qs if q.applies_to == side]
        assert len(sets) == len(set(sets))


# -- tree building --------------------------------------------------------------------


def test_oracle_first_split_on_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        frames, qspec = random_tying_instance(rng)
        stats = stats_from_frames(frames)
        roots = sorted({(c[1], c[3]) for c in frames})
        leaves = [(i, [c for c in sorted(frames) if (c[1], c[3]) == r]) for i, r in enumerate(roots)]
        if len(frames) == len(roots):
            continue
        best = brute_force_best_split(leaves, frames, qspec)
        tree = build_tree(stats, questions_from(qspec), len(roots) + 1, n_sau=4)
        split = [(r, n) for r, n in tree.roots.items() if not n.is_leaf]
        if best is None or not best[0] > 0:
            assert not split
            continue
        gain, qi, order, _, _ = best
        assert len(split) == 1
        assert split[0][0] == roots[order]
        assert split[0][1].question == qi


def _partition(tree):
    return {frozenset((l, c, r, s) for l, r in node.members) for (c, s), node in tree._leaves()}


def test_oracle_full_greedy_partitions():
    rng = np.random.default_rng(7)
    for _ in range(100):
        frames, qspec = random_tying_instance(rng)
        stats = stats_from_frames(frames)
        n_roots = len({(c[1], c[3]) for c in frames})
        for target in range(n_roots, len(frames) + 1):
            tree = build_tree(stats, questions_from(qspec), target, n_sau=4)
            assert _partition(tree) == brute_force_tree(frames, qspec, target)


def test_target_equal_to_roots_means_no_split(corpus):
    _, _, stats = corpus
    n_roots = len({c.root for c in stats})
    tree = build_tree(stats, make_questions(INVENTORY), n_roots)
    assert tree.nsa_count == n_roots
    assert all(node.is_leaf for node in tree.roots.values())


def test_target_is_hit_exactly(corpus):
    _, _, stats = corpus
    for target in (80, 150):
        assert build_tree(stats, make_questions(INVENTORY), target).nsa_count == target


def test_infeasible_target_names_maximum(corpus):
    _, _, stats = corpus
    with pytest.raises(DataError, match=f"achievable maximum {len(stats)}"):
        build_tree(stats, make_questions(INVENTORY), len(stats) + 1)


def test_target_below_roots(corpus):
    _, _, stats = corpus
    with pytest.raises(DataError):
        build_tree(stats, make_questions(INVENTORY), 1)


def test_min_gain_stops_early(corpus):
    _, _, stats = corpus
    tree = build_tree(stats, make_questions(INVENTORY), 300, min_gain=1e9)
    assert tree.nsa_count == len({c.root for c in stats})


def test_loglik_non_decreasing(corpus):
    _, _, stats = corpus
    qs = make_questions(INVENTORY)
    n_roots = len({c.root for c in stats})
    values = [tying.total_loglik(build_tree(stats, qs, t), stats)
              for t in range(n_roots, n_roots + 40, 4)]
    assert all(b >= a - 1e-9 for a, b in zip(values, values[1:]))


def test_leaves_partition_contexts_and_ids_dense(corpus):
    _, _, stats = corpus
    tree = build_tree(stats, make_questions(INVENTORY), 120)
    units = tree.nsa_units()
    assert [u.id for u in units] == list(range(120))
    seen = set()
    for u in units:
        assert not (u.member_contexts & seen)
        seen |= u.member_contexts
    assert seen == set(stats)


def test_relabel_reproduces_membership(corpus):
    ali, _, stats = corpus
    tree = build_tree(stats, make_questions(INVENTORY), 100)
    owner = {c: u.id for u in tree.nsa_units() for c in u.member_contexts}
    for utt, a in ali.items():
        np.testing.assert_array_equal(tree.relabel(a), [owner[c] for c in a])


def test_unsplit_root_single_id(corpus):
    _, _, stats = corpus
    n_roots = len({c.root for c in stats})
    tree = build_tree(stats, make_questions(INVENTORY), n_roots)
    root = min(tree.roots)
    ids = {tree.nsa_id_of(TriSAUContext(l, root[0], r, root[1])) for l in (-1, 0, 5) for r in (-1, 3)}
    assert len(ids) == 1


def test_unseen_context_resolves_and_unknown_center_fails(corpus):
    _, _, stats = corpus
    tree = build_tree(stats, make_questions(INVENTORY), 100)
    c, s = min(tree.roots)
    assert 0 <= tree.nsa_id_of(TriSAUContext(22, c, 22, s)) < 100
    with pytest.raises(DataError):
        tree.nsa_id_of(TriSAUContext(0, 99, 0, 0))


def test_build_is_deterministic(corpus):
    _, _, stats = corpus
    qs = make_questions(INVENTORY)
    assert tying.format_tree(build_tree(stats, qs, 90)) == tying.format_tree(build_tree(stats, qs, 90))


# -- formats --------------------------------------------------------------------------


def test_tree_round_trip_bit_exact(corpus, tmp_path):
    _, _, stats = corpus
    tree = build_tree(stats, make_questions(INVENTORY), 90)
    path = tmp_path / "tree.txt"
    tying.save_tree(tree, path)
    again = tying.load_tree(path)
    assert tying.format_tree(again) == path.read_text()
    assert again.nsa_count == 90
    for c in list(stats)[:200]:
        assert again.nsa_id_of(c) == tree.nsa_id_of(c)


def test_tree_version_rejected(corpus):
    _, _, stats = corpus
    text = tying.format_tree(build_tree(stats, make_questions(INVENTORY), 80))
    with pytest.raises(FormatError):
        tying.parse_tree(text.replace("v1", "v2", 1))


def test_alignment_round_trip(corpus):
    ali, _, _ = corpus
    text = tying.format_alignments(ali)
    assert tying.parse_alignments(text.splitlines()) == ali


def test_alignment_symbols_and_errors():
    lines = ["utt a", "0 - m n 0", "1 m n - 1"]
    out = tying.parse_alignments(lines, symbols={"m": 4, "n": 7})
    assert out["a"] == [TriSAUContext(BOUNDARY, 4, 7, 0), TriSAUContext(4, 7, BOUNDARY, 1)]
    with pytest.raises(ParseError):
        tying.parse_alignments(["utt a", "0 - zz n 0"], symbols={"n": 1})
    with pytest.raises(ParseError):
        tying.parse_alignments(["utt a", "1 - 1 2 0"])
    with pytest.raises(ParseError):
        tying.parse_alignments(["0 - 1 2 0"])


def test_stats_container_round_trip(corpus, tmp_path):
    _, _, stats = corpus
    tying.save_stats(tmp_path / "s.bin", stats)
    again = tying.load_stats(tmp_path / "s.bin")
    assert again.keys() == stats.keys()
    for k in stats:
        np.testing.assert_array_equal(again[k].sum, stats[k].sum)


# -- synthetic alignments -------------------------------------------------------------


def test_synth_alignment_deterministic_and_sized():
    cfg = tying.SynthAlignmentConfig(n_utts=3, saus_per_utt=5, frames_per_state=2, dim=3, seed=4)
    a1, f1 = tying.synth_alignment(cfg)
    a2, f2 = tying.synth_alignment(cfg)
    assert a1 == a2
    for u in a1:
        assert len(a1[u]) == 5 * 3 * 2 == len(f1[u])
        np.testing.assert_array_equal(f1[u], f2[u])


def test_synth_alignment_means_converge():
    cfg = tying.SynthAlignmentConfig(n_utts=30, saus_per_utt=40, frames_per_state=4, dim=2,
                                     noise_std=0.5, seed=1)
    ali, feats = tying.synth_alignment(cfg)
    means = tying.ContextMeans(cfg)
    frames = {}
    for u in ali:
        for c, x in zip(ali[u], feats[u]):
            frames.setdefault(c, []).append(x)
    c, xs = max(frames.items(), key=lambda kv: len(kv[1]))
    n = len(xs)
    assert np.all(np.abs(np.mean(xs, axis=0) - means(c)) < 3 * 0.5 / np.sqrt(n) + 1e-5)


def test_synth_alignment_invalid():
    with pytest.raises(DataError):
        tying.synth_alignment(tying.SynthAlignmentConfig(n_utts=0))
