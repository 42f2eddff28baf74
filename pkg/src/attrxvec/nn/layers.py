"""Parameter groups and the layer set used by the speaker and NSA networks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from . import tensor as F
from .tensor import Tensor


@dataclass
class TDNNLayerCfg:
    in_dim: int
    out_dim: int
    context_offsets: tuple = (0,)
    dilation: int = 1
    nonlinearity: str = "relu"
    batchnorm: bool = True

    def __post_init__(self):
        self.context_offsets = tuple(int(o) for o in self.context_offsets)
        if list(self.context_offsets) != sorted(set(self.context_offsets)):
            raise ConfigError(f"context offsets must be sorted and unique: {self.context_offsets}")
        if self.in_dim < 1 or self.out_dim < 1 or self.dilation < 1:
            raise ConfigError("layer dimensions and dilation must be positive")
        if self.nonlinearity not in ("relu", "none"):
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")

    @property
    def frame_offsets(self):
        return tuple(o * self.dilation for o in self.context_offsets)

    @property
    def left_context(self):
        return -min(self.frame_offsets)

    @property
    def right_context(self):
        return max(self.frame_offsets)

    def to_dict(self):
        return {"in_dim": self.in_dim, "out_dim": self.out_dim,
                "context_offsets": list(self.context_offsets), "dilation": self.dilation,
                "nonlinearity": self.nonlinearity, "batchnorm": self.batchnorm}


@dataclass
class ParamGroup:
    """Unit of selective updating: named tensors plus non-trainable buffers."""

    name: str
    tensors: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    trainable: bool = True
    decay: frozenset = frozenset()

    def qualified(self):
        return {f"{self.name}.{k}": t for k, t in self.tensors.items()}


def he_uniform(rng, fan_in, shape, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Affine:
    """affine -> optional batch norm -> optional ReLU, applied on the last axis."""

    def __init__(self, name, in_dim, out_dim, rng, dtype=np.float32, batchnorm=True,
                 nonlinearity="relu"):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.batchnorm, self.nonlinearity = batchnorm, nonlinearity
        # batch norm's beta already supplies the offset, so no separate bias there
        tensors = {"W": Tensor(he_uniform(rng, in_dim, (in_dim, out_dim), dtype), requires_grad=True)}
        buffers = {}
        if not batchnorm:
            tensors["b"] = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)
        else:
            tensors["gamma"] = Tensor(np.ones(out_dim, dtype=dtype), requires_grad=True)
            tensors["beta"] = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)
            buffers = {"running_mean": np.zeros(out_dim, dtype=dtype),
                       "running_var": np.ones(out_dim, dtype=dtype)}
        for k, t in tensors.items():
            t.name = f"{name}.{k}"
        self.group = ParamGroup(name, tensors, buffers, decay=frozenset({"W"}))

    @property
    def name(self):
        return self.group.name

    def affine(self, x):
        t = self.group.tensors
        h = F.matmul(x, t["W"])
        return F.add(h, t["b"]) if "b" in t else h

    def finish(self, h, training=True, update_running=True):
        t, b = self.group.tensors, self.group.buffers
        if self.batchnorm:
            h = F.batchnorm(h, t["gamma"], t["beta"], b["running_mean"], b["running_var"],
                            training=training, update_running=update_running)
        if self.nonlinearity == "relu":
            h = F.relu(h)
        return h

    def __call__(self, x, training=True, update_running=True):
        return self.finish(self.affine(x), training, update_running)


class TDNNLayer(Affine):
    """Dilated time-delay layer: splice frames at ``t + offset * dilation`` then Affine."""

    def __init__(self, name, cfg: TDNNLayerCfg, rng, dtype=np.float32):
        self.cfg = cfg
        super().__init__(name, cfg.in_dim * len(cfg.context_offsets), cfg.out_dim, rng, dtype,
                         cfg.batchnorm, cfg.nonlinearity)

    def affine(self, x):
        if self.cfg.frame_offsets != (0,):
            x = F.splice(x, self.cfg.frame_offsets)
        return super().affine(x)


def tdnn_forward(x, layer: TDNNLayer, training=True):
    """Run one TDNN layer on a (T, D) or (B, T, D) input."""
    x = F.as_tensor(x)
    squeeze = x.data.ndim == 2
    if squeeze:
        x = F.reshape(x, (1,) + x.shape)
    y = layer(x, training=training)
    return F.reshape(y, y.shape[1:]) if squeeze else y


class Network:
    """Ordered collection of parameter groups with state (de)serialization."""

    groups: list

    def parameters(self, names=None):
        out = {}
        for g in self.groups:
            if names is not None and g.name not in names:
                continue
            if g.trainable:
                out.update(g.qualified())
        return out

    def group_names(self):
        return [g.name for g in self.groups]

    def trainable_group_names(self):
        return [g.name for g in self.groups if g.trainable]

    def group(self, name):
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def decay_names(self):
        return {f"{g.name}.{k}" for g in self.groups for k in g.decay}

    def zero_grad(self):
        for g in self.groups:
            for t in g.tensors.values():
                t.grad = None

    def state_dict(self):
        state = {}
        for g in self.groups:
            for k, t in g.tensors.items():
                state[f"{g.name}.{k}"] = t.data
            for k, b in g.buffers.items():
                state[f"{g.name}.{k}"] = b
        return state

    def load_state_dict(self, state, strict=True):
        own = self.state_dict()
        missing = set(own) - set(state)
        if strict and (missing or set(state) - set(own)):
            raise ConfigError(f"state mismatch: missing={sorted(missing)[:5]} "
                              f"unexpected={sorted(set(state) - set(own))[:5]}")
        for g in self.groups:
            for k, t in g.tensors.items():
                key = f"{g.name}.{k}"
                if key in state:
                    t.data = np.array(state[key], dtype=t.data.dtype).reshape(t.data.shape)
            for k, b in g.buffers.items():
                key = f"{g.name}.{k}"
                if key in state:
                    b[...] = state[key]
