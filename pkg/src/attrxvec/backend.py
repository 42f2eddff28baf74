"""LDA projection and two-covariance PLDA (EM training, closed-form LLR scoring)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .archive import read_container, write_container
from .errors import DataError

log = logging.getLogger(__name__)

EIG_FLOOR = 1e-8


def _class_index(labels):
    classes, inverse = np.unique(np.asarray(labels), return_inverse=True)
    return classes, inverse


def _sign_fix(vectors, tol=1e-12):
    """Flip each column so that its first non-negligible component is positive."""
    vectors = vectors.copy()
    for j in range(vectors.shape[1]):
        col = vectors[:, j]
        nz = np.flatnonzero(np.abs(col) > tol * max(np.abs(col).max(), 1e-300))
        if nz.size and col[nz[0]] < 0:
            vectors[:, j] = -col
    return vectors


def floor_eigenvalues(cov, floor=EIG_FLOOR):
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    if w.min() >= floor:
        return cov
    return (v * np.maximum(w, floor)) @ v.T


@dataclass
class LdaModel:
    mean: np.ndarray
    projection: np.ndarray  # (out_dim, in_dim)
    eigenvalues: np.ndarray
    ridge: float = 0.0

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.projection.T


def scatter_matrices(x, labels):
    x = np.asarray(x, dtype=np.float64)
    classes, inverse = _class_index(labels)
    mu = x.mean(axis=0)
    n = len(x)
    s_w = np.zeros((x.shape[1], x.shape[1]))
    s_b = np.zeros_like(s_w)
    for k in range(len(classes)):
        xk = x[inverse == k]
        mk = xk.mean(axis=0)
        d = xk - mk
        s_w += d.T @ d
        s_b += len(xk) * np.outer(mk - mu, mk - mu)
    return s_w / n, s_b / n, mu


def lda_fit(x, labels, out_dim=70, ridge=1e-6) -> LdaModel:
    """Directions maximizing between- over within-class scatter.

    When the within-class scatter is singular, a ridge of ``ridge * trace / dim``
    is added and recorded on the model.
    """
    x = np.asarray(x, dtype=np.float64)
    classes, _ = _class_index(labels)
    if len(classes) < 2:
        raise DataError("LDA needs at least two classes")
    limit = min(x.shape[1], len(classes) - 1)
    if not 1 <= out_dim <= limit:
        raise DataError(f"LDA output dimension {out_dim} is infeasible (maximum {limit})")
    s_w, s_b, mu = scatter_matrices(x, labels)
    applied = 0.0
    w_min = np.linalg.eigvalsh(s_w).min()
    if w_min <= 1e-10 * max(np.trace(s_w) / len(s_w), 1e-300):
        applied = ridge * max(np.trace(s_w) / len(s_w), 1.0)
        log.warning("within-class scatter is singular; retrying with ridge %.3g", applied)
        s_w = s_w + applied * np.eye(len(s_w))
    evals, evecs = linalg.eigh(s_b, s_w)
    order = np.argsort(evals, kind="stable")[::-1][:out_dim]
    vecs = _sign_fix(evecs[:, order])
    return LdaModel(mu, vecs.T.copy(), evals[order].copy(), applied)


@dataclass
class PldaModel:
    mean: np.ndarray
    between: np.ndarray
    within: np.ndarray
    loglik_history: list = field(default_factory=list)

    @property
    def dim(self):
        return len(self.mean)


def _group(x, labels):
    classes, inverse = _class_index(labels)
    return [x[inverse == k] for k in range(len(classes))]


def plda_loglik(groups, mean, between, within):
    """Exact marginal log-likelihood of grouped data under the two-covariance model."""
    d = len(mean)
    w_inv = np.linalg.inv(within)
    _, w_logdet = np.linalg.slogdet(within)
    total = 0.0
    for xk in groups:
        n = len(xk)
        xbar = xk.mean(axis=0)
        dev = xk - xbar
        cov = between + within / n
        _, c_logdet = np.linalg.slogdet(cov)
        r = xbar - mean
        total += -0.5 * (d * np.log(2 * np.pi) + c_logdet + r @ np.linalg.solve(cov, r))
        total += -0.5 * ((n - 1) * d * np.log(2 * np.pi) + (n - 1) * w_logdet + d * np.log(n)
                         + np.sum((dev @ w_inv) * dev))
    return float(total)


def plda_init(groups):
    allx = np.concatenate(groups)
    mean = allx.mean(axis=0)
    means = np.stack([g.mean(axis=0) for g in groups])
    between = floor_eigenvalues(np.cov(means.T, bias=True).reshape(len(mean), len(mean)))
    within = sum((g - g.mean(axis=0)).T @ (g - g.mean(axis=0)) for g in groups) / len(allx)
    return mean, between, floor_eigenvalues(within)


def plda_fit(x, labels, em_iters=10) -> PldaModel:
    x = np.asarray(x, dtype=np.float64)
    groups = _group(x, labels)
    if len(groups) < 2 or min(len(g) for g in groups) < 2:
        raise DataError("PLDA needs at least two speakers with at least two utterances each")
    mean, between, within = plda_init(groups)
    history = [plda_loglik(groups, mean, between, within)]
    n_total = len(x)
    for _ in range(em_iters):
        post_means, post_covs = [], []
        for g in groups:
            n = len(g)
            gain = between @ np.linalg.inv(between + within / n)
            post_means.append(mean + gain @ (g.mean(axis=0) - mean))
            post_covs.append(between - gain @ between)
        post_means = np.stack(post_means)
        mean = post_means.mean(axis=0)
        dev = post_means - mean
        between = (dev.T @ dev + sum(post_covs)) / len(groups)
        within = np.zeros_like(within)
        for g, m, c in zip(groups, post_means, post_covs):
            r = g - m
            within += r.T @ r + len(g) * c
        within /= n_total
        between, within = floor_eigenvalues(between), floor_eigenvalues(within)
        history.append(plda_loglik(groups, mean, between, within))
    return PldaModel(mean, between, within, history)


class PldaScorer:
    """Precomputed quadratic form of the same- vs different-speaker LLR."""

    def __init__(self, model: PldaModel):
        self.model = model
        tot = model.between + model.within
        tot_inv = np.linalg.inv(tot)
        schur = tot - model.between @ tot_inv @ model.between
        schur_inv = np.linalg.inv(schur)
        self.Q = tot_inv - schur_inv
        p = schur_inv @ model.between @ tot_inv
        self.P = 0.5 * (p + p.T)
        self.const = 0.5 * (np.linalg.slogdet(tot)[1] - np.linalg.slogdet(schur)[1])

    def score(self, enroll, test):
        a, b = np.asarray(enroll, dtype=np.float64), np.asarray(test, dtype=np.float64)
        if a.shape != (self.model.dim,) or b.shape != (self.model.dim,):
            raise DataError(f"expected {self.model.dim}-dim vectors")
        a, b = a - self.model.mean, b - self.model.mean
        return float(0.5 * (a @ self.Q @ a) + 0.5 * (b @ self.Q @ b) + a @ self.P @ b + self.const)


def plda_score(model: PldaModel, enroll, test) -> float:
    return PldaScorer(model).score(enroll, test)


@dataclass
class Backend:
    """LDA followed by PLDA, with optional length normalization in between."""

    lda: LdaModel
    plda: PldaModel
    length_norm: bool = False
    center: np.ndarray | None = None

    def project(self, x):
        y = self.lda.transform(np.atleast_2d(x))
        if self.length_norm:
            y = y - self.center
            y = y * np.sqrt(y.shape[1]) / np.maximum(np.linalg.norm(y, axis=1, keepdims=True), 1e-12)
        return y

    def scorer(self):
        return _BackendScorer(self)


class _BackendScorer:
    def __init__(self, backend):
        self.backend = backend
        self.plda = PldaScorer(backend.plda)

    def score(self, enroll, test):
        a, b = self.backend.project(np.stack([enroll, test]))
        return self.plda.score(a, b)


def train_backend(embeddings, labels, lda_dim=70, em_iters=10, length_norm=False) -> Backend:
    x = np.asarray(embeddings, dtype=np.float64)
    lda = lda_fit(x, labels, lda_dim)
    y = lda.transform(x)
    center = None
    if length_norm:
        center = y.mean(axis=0)
        y = y - center
        y = y * np.sqrt(y.shape[1]) / np.maximum(np.linalg.norm(y, axis=1, keepdims=True), 1e-12)
    return Backend(lda, plda_fit(y, labels, em_iters), length_norm, center)


def save_backend(path, backend: Backend) -> str:
    arrays = {"lda.mean": backend.lda.mean, "lda.projection": backend.lda.projection,
              "lda.eigenvalues": backend.lda.eigenvalues, "plda.mean": backend.plda.mean,
              "plda.between": backend.plda.between, "plda.within": backend.plda.within,
              "plda.loglik": np.asarray(backend.plda.loglik_history, dtype=np.float64)}
    if backend.center is not None:
        arrays["center"] = backend.center
    meta = {"ridge": backend.lda.ridge, "length_norm": backend.length_norm}
    return write_container(path, "backend", meta, arrays)


def load_backend(path) -> Backend:
    meta, a = read_container(path, "backend")
    lda = LdaModel(a["lda.mean"], a["lda.projection"], a["lda.eigenvalues"], meta["ridge"])
    plda = PldaModel(a["plda.mean"], a["plda.between"], a["plda.within"], list(a["plda.loglik"]))
    return Backend(lda, plda, meta["length_norm"], a.get("center"))
