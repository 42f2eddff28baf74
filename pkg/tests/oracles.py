"""Independent reference computations used to check the library.

Each oracle works from first principles (raw frames, explicit loops,
exhaustive enumeration) and shares no code with the implementation it checks.
"""

import math

import numpy as np


# -- state tying ------------------------------------------------------------------


def pooled_loglik(frames):
    """ML diagonal Gaussian log-likelihood of raw frames, variance floored at 1e-6."""
    x = np.asarray(frames, dtype=np.float64)
    var = np.maximum(x.var(axis=0), 1e-6)
    return float(np.sum(-0.5 * len(x) * (np.log(2 * math.pi * var) + 1.0)))


def random_tying_instance(rng, max_contexts=4, max_questions=3, n_sau=4, dim=2):
    """Few contexts (possibly under several roots) with raw frames and random questions."""
    n_ctx = int(rng.integers(1, max_contexts + 1))
    contexts = set()
    while len(contexts) < n_ctx:
        contexts.add((int(rng.integers(-1, n_sau)), int(rng.integers(0, 2)),
                      int(rng.integers(-1, n_sau)), int(rng.integers(0, 2))))
    frames = {c: rng.normal(rng.normal(0, 3, dim), 1.0, size=(int(rng.integers(1, 6)), dim))
              for c in sorted(contexts)}
    questions = []
    for _ in range(int(rng.integers(1, max_questions + 1))):
        k = int(rng.integers(1, n_sau))
        ids = frozenset(int(i) for i in rng.choice(n_sau, size=k, replace=False))
        questions.append((ids, "left" if rng.random() < 0.5 else "right"))
    return frames, questions


def _answer(question, ctx):
    ids, side = question
    return (ctx[0] if side == "left" else ctx[2]) in ids


def brute_force_best_split(leaves, frames, questions):
    """Exhaustive search over every (leaf, question) pair.

    ``leaves`` is a list of (creation_order, contexts).  Returns
    (gain, question_index, creation_order) of the best split or None, breaking
    ties by lowest question index then lowest creation order.
    """
    best = None
    for order, ctxs in leaves:
        parent = pooled_loglik(np.concatenate([frames[c] for c in ctxs]))
        for qi, q in enumerate(questions):
            yes = [c for c in ctxs if _answer(q, c)]
            no = [c for c in ctxs if not _answer(q, c)]
            if not yes or not no:
                continue
            gain = (pooled_loglik(np.concatenate([frames[c] for c in yes]))
                    + pooled_loglik(np.concatenate([frames[c] for c in no])) - parent)
            key = (-gain, qi, order)
            if best is None or key < best[0]:
                best = (key, gain, qi, order, yes, no)
    if best is None:
        return None
    return best[1:]


def brute_force_tree(frames, questions, target, min_gain=0.0):
    """Greedy splitting driven by the exhaustive search; returns the final partition."""
    roots = sorted({(c[1], c[3]) for c in frames})
    leaves, order = [], 0
    for r in roots:
        leaves.append((order, [c for c in sorted(frames) if (c[1], c[3]) == r]))
        order += 1
    while len(leaves) < target:
        found = brute_force_best_split(leaves, frames, questions)
        if found is None or not found[0] > min_gain:
            break
        gain, qi, split_order, yes, no = found
        leaves = [l for l in leaves if l[0] != split_order]
        leaves.append((order, yes))
        leaves.append((order + 1, no))
        order += 2
    return {frozenset(ctxs) for _, ctxs in leaves}


# -- detection metrics -------------------------------------------------------------


def sweep_error_rates(target, nontarget):
    """(p_miss, p_fa) at every candidate threshold: each score, ±inf, and midpoints.

    A trial is accepted when its score is strictly above the threshold.
    """
    scores = np.sort(np.concatenate([target, nontarget]))
    cands = [-np.inf, np.inf] + list(scores)
    cands += [(a + b) / 2 for a, b in zip(scores[:-1], scores[1:]) if a != b]
    out = []
    for thr in cands:
        p_miss = sum(1 for s in target if not s > thr) / len(target)
        p_fa = sum(1 for s in nontarget if s > thr) / len(nontarget)
        out.append((p_miss, p_fa))
    return out


def sweep_min_dcf(target, nontarget, p_target=0.001, c_miss=1.0, c_fa=1.0):
    best = min(c_miss * pm * p_target + c_fa * pf * (1 - p_target)
               for pm, pf in sweep_error_rates(target, nontarget))
    return best / min(c_miss * p_target, c_fa * (1 - p_target))


def sweep_eer(target, nontarget):
    """EER in percent: linear interpolation where the miss and false-alarm curves cross.

    The sweep points are ordered by threshold; p_miss rises and p_fa falls.
    """
    pts = sorted(set(sweep_error_rates(target, nontarget)), key=lambda p: (p[0], -p[1]))
    for (m0, f0), (m1, f1) in zip(pts[:-1], pts[1:]):
        if m0 == f0:
            return 100.0 * m0
        d0, d1 = f0 - m0, f1 - m1
        if d0 > 0 >= d1:
            t = d0 / (d0 - d1)
            return 100.0 * (m0 + t * (m1 - m0))
    m, f = pts[-1]
    return 100.0 * (m + f) / 2


# -- front end ---------------------------------------------------------------------


def direct_dft_power(frame, n_fft):
    """|DFT|^2 for bins 0..n_fft/2 by explicit summation."""
    x = np.zeros(n_fft)
    x[:len(frame)] = frame
    n = np.arange(n_fft)
    out = []
    for k in range(n_fft // 2 + 1):
        angle = -2j * math.pi * k * n / n_fft
        out.append(abs(np.sum(x * np.exp(angle))) ** 2)
    return np.array(out)


def direct_dct_ortho(x):
    """Orthonormal DCT-II of the last axis by explicit summation."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[1]
    out = np.zeros_like(x)
    for k in range(n):
        scale = math.sqrt(1.0 / n) if k == 0 else math.sqrt(2.0 / n)
        basis = np.cos(math.pi * k * (2 * np.arange(n) + 1) / (2 * n))
        out[:, k] = scale * x @ basis
    return out


def direct_sliding_cmn(feats, width):
    """Subtract the mean of a ``width``-frame window kept inside the utterance."""
    t_len = len(feats)
    if t_len <= width:
        return feats - feats.mean(axis=0)
    out = np.empty_like(feats, dtype=np.float64)
    for t in range(t_len):
        start = t - width // 2
        start = min(max(start, 0), t_len - width)
        out[t] = feats[t] - feats[start:start + width].mean(axis=0)
    return out


def sample_two_covariance(rng, n_speakers=20, per_speaker=50, dim=5):
    """Draw a random two-covariance model and data from it.

    Returns (x, labels, mean, between, within, latents).
    """
    a = rng.normal(size=(dim, dim))
    between = a @ a.T / dim + 0.5 * np.eye(dim)
    c = rng.normal(size=(dim, dim))
    within = 0.3 * c @ c.T / dim + 0.2 * np.eye(dim)
    mean = rng.normal(size=dim)
    latents = rng.multivariate_normal(mean, between, size=n_speakers)
    x = np.concatenate([rng.multivariate_normal(y, within, size=per_speaker) for y in latents])
    labels = np.repeat(np.arange(n_speakers), per_speaker)
    return x, labels, mean, between, within, latents


def pair_llr(a, b, mean, between, within):
    """log N([a;b]; same speaker) - log N([a;b]; different speakers) via dense joint densities."""
    from scipy.stats import multivariate_normal

    d = len(mean)
    total = between + within
    same = np.block([[total, between], [between, total]])
    diff = np.block([[total, np.zeros((d, d))], [np.zeros((d, d)), total]])
    z = np.concatenate([a, b])
    m = np.concatenate([mean, mean])
    return multivariate_normal(m, same).logpdf(z) - multivariate_normal(m, diff).logpdf(z)


def rel_frobenius(estimate, reference):
    return float(np.linalg.norm(estimate - reference) / np.linalg.norm(reference))
