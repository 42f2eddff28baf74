"""Chunked mini-batch training for the x-vector and multitask networks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .frontend import chunk_bounds
from .mtl import MTLNet
from .nn import tensor as F
from .nn.optim import Adam, lr_schedule
from .xvector import XVector

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 64
    lr_initial: float = 1e-3
    lr_final: float = 1e-4
    lr_shape: str = "exponential"
    weight_decay: float = 1e-4
    chunk_min_s: float = 2.0
    chunk_max_s: float = 4.0
    frame_shift_s: float = 0.010
    schedule: tuple = ("speaker", "nsa")
    seed: int = 0

    def __post_init__(self):
        self.schedule = tuple(self.schedule)
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("epochs >= 1 and batch_size >= 2 are required")
        if not 0 < self.chunk_min_s <= self.chunk_max_s:
            raise ConfigError("chunk lengths need 0 < min <= max")
        if not self.schedule or set(self.schedule) - {"speaker", "nsa"}:
            raise ConfigError("schedule entries must be 'speaker' or 'nsa'")
        if "speaker" not in self.schedule:
            raise ConfigError("the schedule must contain at least one speaker step")

    @property
    def chunk_frames(self):
        return (int(round(self.chunk_min_s / self.frame_shift_s)),
                int(round(self.chunk_max_s / self.frame_shift_s)))


@dataclass
class History:
    steps: list = field(default_factory=list)  # dicts: step, task, loss, accuracy, lr

    def losses(self, task):
        return np.array([s["loss"] for s in self.steps if s["task"] == task])

    def accuracies(self, task):
        return np.array([s["accuracy"] for s in self.steps if s["task"] == task])


def plan_epoch(lengths, cfg: TrainConfig, rng):
    """Random chunks of every utterance, shuffled and grouped into batches.

    Every batch is cropped to its shortest chunk so it stacks into one array.
    Returns a list of batches, each a list of ``(utt, start, end)``.
    """
    lo, hi = cfg.chunk_frames
    chunks = []
    for utt in sorted(lengths):
        for a, b in chunk_bounds(lengths[utt], lo, hi, rng):
            chunks.append((utt, a, b))
    if not chunks:
        raise DataError(f"no utterance is long enough for a {lo}-frame chunk")
    order = rng.permutation(len(chunks))
    batches = []
    for i in range(0, len(order), cfg.batch_size):
        members = [chunks[j] for j in order[i:i + cfg.batch_size]]
        if len(members) < 2:
            continue
        width = min(b - a for _, a, b in members)
        batches.append([(u, a, a + width) for u, a, _ in members])
    return batches


def stack_batch(batch, feats, dtype):
    return np.stack([feats[u][a:b] for u, a, b in batch]).astype(dtype, copy=False)


def _check(loss, task, step):
    if not np.isfinite(loss):
        raise NumericError(f"non-finite {task} loss at step {step}")


def train_xvector(net: XVector, feats, labels, cfg: TrainConfig, optimizer=None, history=None):
    """Single-task speaker training.  ``labels`` maps utt -> speaker index."""
    rng = np.random.default_rng([cfg.seed, 11])
    lengths = {u: len(feats[u]) for u in labels}
    plan = [b for _ in range(cfg.epochs) for b in plan_epoch(lengths, cfg, rng)]
    opt = optimizer or Adam(weight_decay=cfg.weight_decay)
    history = history or History()
    decay = net.decay_names()
    params = net.parameters()
    for k, batch in enumerate(plan):
        lr = lr_schedule(k, len(plan) - 1, cfg.lr_initial, cfg.lr_final, cfg.lr_shape)
        x = stack_batch(batch, feats, net.dtype)
        y = np.array([labels[u] for u, _, _ in batch])
        net.zero_grad()
        logits = net.forward(x, training=True)
        loss = F.softmax_xent(logits, y)
        _check(float(loss.data), "speaker", k)
        loss.backward()
        opt.step(params, lr, decay)
        acc = float(np.mean(np.argmax(logits.data, axis=1) == y))
        history.steps.append({"step": k, "task": "speaker", "loss": float(loss.data),
                              "accuracy": acc, "lr": lr})
    return net, opt, history


class _NsaBatches:
    """Endless stream of NSA batches; reshuffles and re-chunks on every pass."""

    def __init__(self, lengths, cfg, rng):
        self.lengths, self.cfg, self.rng = lengths, cfg, rng
        self.pending = []

    def __next__(self):
        if not self.pending:
            self.pending = plan_epoch(self.lengths, self.cfg, self.rng)
        return self.pending.pop(0)


def interleave(n_speaker_steps, schedule):
    """Task sequence following ``schedule`` cyclically until the speaker batches run out."""
    tasks, done = [], 0
    while done < n_speaker_steps:
        for task in schedule:
            if task == "speaker":
                if done == n_speaker_steps:
                    break
                done += 1
            tasks.append(task)
    return tasks


def alternating_train(net: MTLNet, speaker_data, nsa_data, cfg: TrainConfig, optimizer=None):
    """Alternate speaker and NSA mini-batches.

    ``speaker_data`` is ``(feats, utt -> speaker index)``; ``nsa_data`` is
    ``(feats, utt -> per-frame NSA ids)``.  Each step updates only the groups in
    ``net.update_mask(task)``; the learning rate follows each task's own
    progress through its step budget.
    """
    spk_feats, spk_labels = speaker_data
    nsa_feats, nsa_labels = nsa_data
    if not spk_labels or not nsa_labels:
        raise DataError("both training streams must be non-empty")
    spk_rng = np.random.default_rng([cfg.seed, 11])
    nsa_rng = np.random.default_rng([cfg.seed, 12])
    spk_lengths = {u: len(spk_feats[u]) for u in spk_labels}
    spk_plan = [b for _ in range(cfg.epochs) for b in plan_epoch(spk_lengths, cfg, spk_rng)]
    nsa_stream = _NsaBatches({u: len(nsa_feats[u]) for u in nsa_labels}, cfg, nsa_rng)
    tasks = interleave(len(spk_plan), cfg.schedule)
    budget = {t: tasks.count(t) for t in ("speaker", "nsa")}
    seen = {"speaker": 0, "nsa": 0}
    opt = optimizer or Adam(weight_decay=cfg.weight_decay)
    decay = net.decay_names()
    history = History()
    spk_iter = iter(spk_plan)
    for step, task in enumerate(tasks):
        k = seen[task]
        seen[task] += 1
        lr = lr_schedule(k, budget[task] - 1, cfg.lr_initial, cfg.lr_final, cfg.lr_shape)
        mask = net.update_mask(task)
        net.zero_grad()
        if task == "speaker":
            batch = next(spk_iter)
            x = stack_batch(batch, spk_feats, net.dtype)
            y = np.array([spk_labels[u] for u, _, _ in batch])
            out = net.forward(x, "speaker", training=True, active=mask)
            loss = F.softmax_xent(out, y)
            acc = float(np.mean(np.argmax(out.data, axis=1) == y))
        else:
            batch = next(nsa_stream)
            x = stack_batch(batch, nsa_feats, net.dtype)
            y = net.trim_labels(np.stack([nsa_labels[u][a:b] for u, a, b in batch])).reshape(-1)
            out = net.forward(x, "nsa", training=True, active=mask)
            flat = F.reshape(out, (-1, out.shape[-1]))
            loss = F.softmax_xent(flat, y)
            acc = float(np.mean(np.argmax(flat.data, axis=1) == y))
        _check(float(loss.data), task, step)
        loss.backward()
        opt.step(net.parameters(mask), lr, decay)
        history.steps.append({"step": step, "task": task, "loss": float(loss.data),
                              "accuracy": acc, "lr": lr})
    return net, opt, history


def nsa_frame_accuracy(net: MTLNet, feats, labels):
    """Framewise NSA accuracy over whole utterances in inference mode."""
    correct = total = 0
    for utt in sorted(labels):
        x = feats[utt]
        if len(x) < net.cfg.xvector.receptive_field:
            continue
        pred = np.argmax(net.forward(x, "nsa", training=False).data[0], axis=1)
        ref = net.trim_labels(labels[utt])
        correct += int(np.sum(pred == ref))
        total += len(ref)
    if total == 0:
        raise DataError("no utterance long enough to score NSA accuracy")
    return correct / total
