"""Tri-SAU state statistics and likelihood-gain decision-tree state tying.

Each (center SAU, HMM state) pair owns one tree.  Leaves of all trees are the
NSA units.  Splitting is greedy and global across trees so that a single
``target_leaves`` knob controls the final unit count.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .archive import read_container, write_container
from .attributes import SAU
from .errors import DataError, FormatError, ParseError

BOUNDARY = -1
N_STATES = 3
VAR_FLOOR = 1e-6
PRESETS = {"nsa80": 80, "nsa400": 400, "nsa1248": 1248}

_LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, order=True)
class TriSAUContext:
    left: int
    center: int
    right: int
    state_pos: int

    @property
    def root(self):
        return (self.center, self.state_pos)


@dataclass
class GaussianStats:
    count: float
    sum: np.ndarray
    sumsq: np.ndarray

    @classmethod
    def zeros(cls, dim):
        return cls(0.0, np.zeros(dim), np.zeros(dim))

    @classmethod
    def from_frames(cls, frames):
        frames = np.asarray(frames, dtype=np.float64)
        return cls(float(len(frames)), frames.sum(axis=0), (frames * frames).sum(axis=0))

    def __add__(self, other):
        return GaussianStats(self.count + other.count, self.sum + other.sum,
                             self.sumsq + other.sumsq)

    def variance(self, floor=VAR_FLOOR):
        mean = self.sum / self.count
        return np.maximum(self.sumsq / self.count - mean * mean, floor)


def merge_stats(*maps: Mapping[TriSAUContext, GaussianStats]) -> dict:
    out: dict[TriSAUContext, GaussianStats] = {}
    for m in maps:
        for ctx, st in m.items():
            out[ctx] = out[ctx] + st if ctx in out else GaussianStats(st.count, st.sum.copy(),
                                                                      st.sumsq.copy())
    return out


def accumulate_stats(alignment: Sequence[TriSAUContext], features) -> dict:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    if len(alignment) != len(features):
        raise DataError(f"alignment has {len(alignment)} frames, features have {len(features)}")
    groups: dict[TriSAUContext, list[int]] = {}
    for t, ctx in enumerate(alignment):
        groups.setdefault(ctx, []).append(t)
    return {ctx: GaussianStats.from_frames(features[idx]) for ctx, idx in groups.items()}


def node_loglik(stats: GaussianStats, var_floor=VAR_FLOOR) -> float:
    """Log-likelihood of the pooled frames under their own ML diagonal Gaussian."""
    if stats.count < 1:
        raise DataError("log-likelihood of an empty node")
    var = stats.variance(var_floor)
    return float(-0.5 * stats.count * np.sum(np.log(var) + _LOG2PI + 1.0))


@dataclass(frozen=True)
class Question:
    name: str
    sau_set: frozenset
    applies_to: str  # "left" | "right"

    def answers(self, ctx: TriSAUContext) -> bool:
        sau = ctx.left if self.applies_to == "left" else ctx.right
        return sau in self.sau_set


def make_questions(inventory: Sequence[SAU]) -> list[Question]:
    """Attribute-derived questions: per manner, per place, per singleton SAU, each side."""
    all_ids = frozenset(s.id for s in inventory)
    candidates = []
    for manner in sorted({s.manner for s in inventory}):
        candidates.append((f"manner={manner}", frozenset(s.id for s in inventory if s.manner == manner)))
    for place in sorted({s.place for s in inventory}):
        candidates.append((f"place={place}", frozenset(s.id for s in inventory if s.place == place)))
    for s in inventory:
        candidates.append((f"sau={s.name}", frozenset([s.id])))
    questions = []
    for side in ("left", "right"):
        seen = set()
        for name, ids in candidates:
            if not ids or ids == all_ids or ids in seen:
                continue
            seen.add(ids)
            questions.append(Question(f"{side}:{name}", ids, side))
    return questions


def split_gain(node_stats: GaussianStats, question: Question,
               context_stats: Mapping[TriSAUContext, GaussianStats], var_floor=VAR_FLOOR) -> float:
    """L(yes) + L(no) - L(node); -inf when one side receives no contexts."""
    dim = len(node_stats.sum)
    yes, no = GaussianStats.zeros(dim), GaussianStats.zeros(dim)
    n_yes = n_no = 0
    for ctx, st in context_stats.items():
        if question.answers(ctx):
            yes, n_yes = yes + st, n_yes + 1
        else:
            no, n_no = no + st, n_no + 1
    if n_yes == 0 or n_no == 0:
        return -math.inf
    return (node_loglik(yes, var_floor) + node_loglik(no, var_floor)
            - node_loglik(node_stats, var_floor))


@dataclass
class Node:
    question: int | None = None
    yes: "Node | None" = None
    no: "Node | None" = None
    nsa_id: int = -1
    members: tuple = ()  # (left, right) pairs, leaves only

    @property
    def is_leaf(self):
        return self.question is None


@dataclass
class NSAUnit:
    id: int
    member_contexts: frozenset


@dataclass
class TiedStateTree:
    n_sau: int
    questions: list[Question]
    roots: dict = field(default_factory=dict)  # (center, state_pos) -> Node
    n_states: int = N_STATES

    @property
    def nsa_count(self):
        return sum(1 for _ in self._leaves())

    def _leaves(self):
        for key in sorted(self.roots):
            stack = [self.roots[key]]
            while stack:
                node = stack.pop()
                if node.is_leaf:
                    yield key, node
                else:
                    stack.append(node.no)
                    stack.append(node.yes)

    def nsa_units(self) -> list[NSAUnit]:
        units = [
            NSAUnit(node.nsa_id, frozenset(TriSAUContext(l, c, r, s) for l, r in node.members))
            for (c, s), node in self._leaves()
        ]
        return sorted(units, key=lambda u: u.id)

    def nsa_id_of(self, ctx: TriSAUContext) -> int:
        node = self.roots.get(ctx.root)
        if node is None:
            raise DataError(f"no tree for center SAU {ctx.center}, state {ctx.state_pos}")
        while not node.is_leaf:
            node = node.yes if self.questions[node.question].answers(ctx) else node.no
        return node.nsa_id

    def relabel(self, alignment: Iterable[TriSAUContext]) -> np.ndarray:
        cache: dict[TriSAUContext, int] = {}
        out = []
        for ctx in alignment:
            if ctx not in cache:
                cache[ctx] = self.nsa_id_of(ctx)
            out.append(cache[ctx])
        return np.asarray(out, dtype=np.int64)


class _Leaf:
    __slots__ = ("node", "idx", "order", "best_gain", "best_q")

    def __init__(self, node, idx, order):
        self.node, self.idx, self.order = node, idx, order
        self.best_gain, self.best_q = -math.inf, -1


def _loglik_rows(n, s, ss, var_floor):
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = s / n[:, None]
        var = np.maximum(ss / n[:, None] - mean * mean, var_floor)
        return -0.5 * n * np.sum(np.log(var) + _LOG2PI + 1.0, axis=1)


def build_tree(stats: Mapping[TriSAUContext, GaussianStats], questions: Sequence[Question],
               target_leaves: int, min_gain: float = 0.0, n_sau: int | None = None,
               var_floor: float = VAR_FLOOR) -> TiedStateTree:
    if not stats:
        raise DataError("no statistics to tie")
    contexts = sorted(stats)
    roots = sorted({c.root for c in contexts})
    if n_sau is None:
        n_sau = max(max(c.center, c.left, c.right) for c in contexts) + 1
    if target_leaves < len(roots):
        raise DataError(f"target_leaves={target_leaves} is below the number of roots ({len(roots)})")
    if target_leaves > len(contexts):
        raise DataError(f"target_leaves={target_leaves} is infeasible: only {len(contexts)} "
                        f"distinct contexts (achievable maximum {len(contexts)})")

    counts = np.array([stats[c].count for c in contexts], dtype=np.float64)
    sums = np.stack([stats[c].sum for c in contexts]).astype(np.float64)
    sumsq = np.stack([stats[c].sumsq for c in contexts]).astype(np.float64)
    # column 0 is the boundary marker, SAU id k lives in column k + 1
    left = np.array([c.left for c in contexts]) + 1
    right = np.array([c.right for c in contexts]) + 1
    member = np.zeros((len(questions), n_sau + 1), dtype=np.float64)
    for qi, q in enumerate(questions):
        member[qi, [i + 1 for i in q.sau_set]] = 1.0
    on_left = np.array([q.applies_to == "left" for q in questions])

    def evaluate(leaf: _Leaf):
        idx = leaf.idx
        if len(idx) < 2 or not questions:
            return
        yes = np.where(on_left[:, None], member[:, left[idx]], member[:, right[idx]])
        no = 1.0 - yes
        n_y, n_n = yes @ counts[idx], no @ counts[idx]
        k_y, k_n = yes.sum(axis=1), no.sum(axis=1)
        ll_y = _loglik_rows(n_y, yes @ sums[idx], yes @ sumsq[idx], var_floor)
        ll_n = _loglik_rows(n_n, no @ sums[idx], no @ sumsq[idx], var_floor)
        parent = _loglik_rows(counts[idx].sum(keepdims=True), sums[idx].sum(axis=0, keepdims=True),
                              sumsq[idx].sum(axis=0, keepdims=True), var_floor)[0]
        gains = np.where((k_y > 0) & (k_n > 0), ll_y + ll_n - parent, -np.inf)
        q = int(np.argmax(gains))
        leaf.best_gain, leaf.best_q = float(gains[q]), q

    tree = TiedStateTree(n_sau, list(questions))
    heap: list = []
    order = 0
    root_index = {r: i for i, r in enumerate(roots)}
    root_members: list[list[int]] = [[] for _ in roots]
    for i, c in enumerate(contexts):
        root_members[root_index[c.root]].append(i)
    all_leaves = []
    for r, idx in zip(roots, root_members):
        node = Node()
        tree.roots[r] = node
        leaf = _Leaf(node, np.asarray(idx), order)
        order += 1
        evaluate(leaf)
        all_leaves.append(leaf)
        heapq.heappush(heap, (-leaf.best_gain, leaf.best_q, leaf.order, leaf))

    n_leaves = len(roots)
    while n_leaves < target_leaves and heap:
        neg_gain, q, _, leaf = heapq.heappop(heap)
        gain = -neg_gain
        if not gain > min_gain:
            break
        question = questions[q]
        side = left[leaf.idx] if question.applies_to == "left" else right[leaf.idx]
        answer = member[q, side] > 0
        leaf.node.question = q
        leaf.node.yes, leaf.node.no = Node(), Node()
        for child_node, sel in ((leaf.node.yes, answer), (leaf.node.no, ~answer)):
            child = _Leaf(child_node, leaf.idx[sel], order)
            order += 1
            evaluate(child)
            all_leaves.append(child)
            heapq.heappush(heap, (-child.best_gain, child.best_q, child.order, child))
        n_leaves += 1

    for leaf in all_leaves:
        if leaf.node.is_leaf:
            leaf.node.members = tuple((contexts[i].left, contexts[i].right) for i in leaf.idx)
    _assign_ids(tree)
    return tree


def _assign_ids(tree: TiedStateTree):
    for nsa_id, (_, node) in enumerate(tree._leaves()):
        node.nsa_id = nsa_id


def total_loglik(tree: TiedStateTree, stats, var_floor=VAR_FLOOR) -> float:
    """Sum of leaf log-likelihoods; grows with every accepted split."""
    total = 0.0
    for (c, s), node in tree._leaves():
        pooled = None
        for l, r in node.members:
            st = stats[TriSAUContext(l, c, r, s)]
            pooled = st if pooled is None else pooled + st
        total += node_loglik(pooled, var_floor)
    return total


# ---------------------------------------------------------------------------
# text export

TREE_MAGIC = "#attrxvec-tree"
TREE_VERSION = 1


def _ctx_token(v):
    return "-" if v == BOUNDARY else str(v)


def _ctx_value(tok):
    return BOUNDARY if tok == "-" else int(tok)


def format_tree(tree: TiedStateTree) -> str:
    lines = [f"{TREE_MAGIC} v{TREE_VERSION}", f"n_sau {tree.n_sau}", f"n_states {tree.n_states}",
             f"questions {len(tree.questions)}"]
    for qi, q in enumerate(tree.questions):
        ids = " ".join(str(i) for i in sorted(q.sau_set))
        lines.append(f"q {qi} {q.applies_to} {q.name} {ids}")
    lines.append(f"roots {len(tree.roots)}")
    for key in sorted(tree.roots):
        lines.append(f"root {key[0]} {key[1]}")
        stack = [tree.roots[key]]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                members = " ".join(f"{_ctx_token(l)},{_ctx_token(r)}" for l, r in node.members)
                lines.append(f"L {node.nsa_id} {members}".rstrip())
            else:
                lines.append(f"Q {node.question}")
                stack.append(node.no)
                stack.append(node.yes)
    lines.append("end")
    return "\n".join(lines) + "\n"


def parse_tree(text: str) -> TiedStateTree:
    lines = text.splitlines()
    if not lines or lines[0] != f"{TREE_MAGIC} v{TREE_VERSION}":
        raise FormatError("not a version-%d tree export" % TREE_VERSION)
    pos = 1

    def take(prefix):
        nonlocal pos
        if pos >= len(lines):
            raise ParseError("unexpected end of tree file", line=pos + 1)
        fields = lines[pos].split()
        if not fields or fields[0] != prefix:
            raise ParseError(f"expected {prefix!r}", line=pos + 1)
        pos += 1
        return fields

    n_sau = int(take("n_sau")[1])
    n_states = int(take("n_states")[1])
    questions = []
    for _ in range(int(take("questions")[1])):
        f = take("q")
        questions.append(Question(f[3], frozenset(int(i) for i in f[4:]), f[2]))
    tree = TiedStateTree(n_sau, questions, n_states=n_states)

    def read_node():
        nonlocal pos
        if pos >= len(lines):
            raise ParseError("unexpected end of tree file", line=pos + 1)
        fields = lines[pos].split()
        pos += 1
        if fields[0] == "Q":
            node = Node(question=int(fields[1]))
            node.yes = read_node()
            node.no = read_node()
            return node
        if fields[0] == "L":
            members = tuple(tuple(_ctx_value(t) for t in m.split(",")) for m in fields[2:])
            return Node(nsa_id=int(fields[1]), members=members)
        raise ParseError(f"bad tree node {fields[0]!r}", line=pos)

    for _ in range(int(take("roots")[1])):
        f = take("root")
        tree.roots[(int(f[1]), int(f[2]))] = read_node()
    take("end")
    return tree


def save_tree(tree, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_tree(tree))


def load_tree(path) -> TiedStateTree:
    with open(path, encoding="utf-8") as fh:
        return parse_tree(fh.read())


def save_stats(path, stats: Mapping[TriSAUContext, GaussianStats]) -> str:
    """Per-context sufficient statistics as a container, contexts in sorted order."""
    keys = sorted(stats)
    if not keys:
        raise DataError("no statistics to save")
    arrays = {"contexts": np.array([[c.left, c.center, c.right, c.state_pos] for c in keys],
                                   dtype=np.int64),
              "count": np.array([stats[c].count for c in keys]),
              "sum": np.stack([stats[c].sum for c in keys]),
              "sumsq": np.stack([stats[c].sumsq for c in keys])}
    return write_container(path, "tying-stats", {"n_contexts": len(keys)}, arrays)


def load_stats(path) -> dict:
    _, a = read_container(path, "tying-stats")
    return {TriSAUContext(*(int(v) for v in row)): GaussianStats(float(n), s.copy(), ss.copy())
            for row, n, s, ss in zip(a["contexts"], a["count"], a["sum"], a["sumsq"])}


# ---------------------------------------------------------------------------
# alignment text format and synthetic alignments

def format_alignments(alignments: Mapping[str, Sequence[TriSAUContext]]) -> str:
    out = []
    for utt in alignments:
        out.append(f"utt {utt}\n")
        for t, c in enumerate(alignments[utt]):
            out.append(f"{t} {_ctx_token(c.left)} {c.center} {_ctx_token(c.right)} {c.state_pos}\n")
    return "".join(out)


def parse_alignments(lines: Iterable[str], source=None,
                     symbols: Mapping[str, int] | None = None) -> dict[str, list[TriSAUContext]]:
    """Read alignment blocks.  With ``symbols`` the unit columns hold names
    (e.g. phonemes) that are looked up in the mapping instead of integer ids."""
    def unit(tok, lineno, ctx=False):
        if ctx and tok == "-":
            return BOUNDARY
        if symbols is None:
            return int(tok)
        if tok not in symbols:
            raise ParseError(f"unknown unit symbol {tok!r}", source, lineno)
        return symbols[tok]

    out: dict[str, list[TriSAUContext]] = {}
    current = None
    for lineno, raw in enumerate(lines, start=1):
        fields = raw.split()
        if not fields:
            continue
        if fields[0] == "utt":
            if len(fields) != 2 or fields[1] in out:
                raise ParseError("bad or duplicate utterance header", source, lineno)
            current = out.setdefault(fields[1], [])
            continue
        if current is None or len(fields) != 5:
            raise ParseError("expected 'frame_index left center right state_pos'", source, lineno)
        if int(fields[0]) != len(current):
            raise ParseError("non-contiguous frame index", source, lineno)
        try:
            current.append(TriSAUContext(unit(fields[1], lineno, True), unit(fields[2], lineno),
                                         unit(fields[3], lineno, True), int(fields[4])))
        except ValueError:
            raise ParseError("non-integer alignment field", source, lineno) from None
    return out


@dataclass
class SynthAlignmentConfig:
    n_sau: int = 23
    n_utts: int = 20
    saus_per_utt: int = 50
    frames_per_state: int = 3
    dim: int = 30
    n_states: int = N_STATES
    center_scale: float = 3.0
    context_scale: float = 1.0
    noise_std: float = 1.0
    seed: int = 0

    def validate(self):
        for name in ("n_sau", "n_utts", "saus_per_utt", "frames_per_state", "dim", "n_states"):
            if getattr(self, name) < 1:
                raise DataError(f"synthetic alignment config: {name} must be >= 1")
        if self.noise_std < 0:
            raise DataError("synthetic alignment config: noise_std must be >= 0")


class ContextMeans:
    """Per-context Gaussian means: a (center, state) term plus left/right context terms."""

    def __init__(self, cfg: SynthAlignmentConfig):
        rng = np.random.default_rng([cfg.seed, 1])
        self.center = cfg.center_scale * rng.standard_normal((cfg.n_sau, cfg.n_states, cfg.dim))
        ctx = cfg.context_scale * rng.standard_normal((2, cfg.n_sau + 1, cfg.dim))
        ctx[:, 0] = 0.0
        self.left, self.right = ctx[0], ctx[1]

    def __call__(self, c: TriSAUContext):
        return self.center[c.center, c.state_pos] + self.left[c.left + 1] + self.right[c.right + 1]


def synth_alignment(cfg: SynthAlignmentConfig):
    """Seeded framewise tri-SAU labels with features drawn from per-context Gaussians.

    Returns ``(alignments, features)``, both dicts keyed by utterance id.
    """
    cfg.validate()
    means = ContextMeans(cfg)
    rng = np.random.default_rng([cfg.seed, 2])
    alignments, features = {}, {}
    for u in range(cfg.n_utts):
        seq = rng.integers(0, cfg.n_sau, size=cfg.saus_per_utt)
        labels = []
        for i, c in enumerate(seq):
            l = int(seq[i - 1]) if i > 0 else BOUNDARY
            r = int(seq[i + 1]) if i + 1 < len(seq) else BOUNDARY
            for s in range(cfg.n_states):
                labels.extend([TriSAUContext(l, int(c), r, s)] * cfg.frames_per_state)
        mu = np.stack([means(c) for c in labels])
        feats = mu + cfg.noise_std * rng.standard_normal(mu.shape)
        utt = f"nsa{u:05d}"
        alignments[utt] = labels
        features[utt] = feats.astype(np.float32)
    return alignments, features
