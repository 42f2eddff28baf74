"""Baseline x-vector network: five TDNN layers, statistics pooling, two
segment-level layers and a speaker softmax."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .nn import tensor as F
from .nn.layers import Affine, Network, TDNNLayer, TDNNLayerCfg

POOL_EPS = 1e-10


@dataclass
class XVectorCfg:
    feat_dim: int = 30
    frame_dims: tuple = (512, 512, 512, 512, 1536)
    context_offsets: tuple = ((-2, -1, 0, 1, 2), (-1, 0, 1), (-1, 0, 1), (0,), (0,))
    dilations: tuple = (1, 2, 3, 1, 1)
    segment_dims: tuple = (512, 512)
    n_speakers: int = 2
    dtype: str = "float32"

    def __post_init__(self):
        self.frame_dims = tuple(int(d) for d in self.frame_dims)
        self.context_offsets = tuple(tuple(int(o) for o in offs) for offs in self.context_offsets)
        self.dilations = tuple(int(d) for d in self.dilations)
        self.segment_dims = tuple(int(d) for d in self.segment_dims)
        if not (len(self.frame_dims) == len(self.context_offsets) == len(self.dilations)):
            raise ConfigError("frame_dims, context_offsets and dilations must have equal length")
        if len(self.frame_dims) < 1 or len(self.segment_dims) < 1:
            raise ConfigError("need at least one frame layer and one segment layer")
        if min(self.frame_dims + self.segment_dims) < 1 or self.feat_dim < 1 or self.n_speakers < 1:
            raise ConfigError("all dimensions must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def frame_layer_cfgs(self):
        cfgs, in_dim = [], self.feat_dim
        for dim, offs, dil in zip(self.frame_dims, self.context_offsets, self.dilations):
            cfgs.append(TDNNLayerCfg(in_dim, dim, offs, dil))
            in_dim = dim
        return cfgs

    def context(self, n_layers=None):
        """(left, right) frame context of the first ``n_layers`` frame layers."""
        cfgs = self.frame_layer_cfgs()[:n_layers]
        return sum(c.left_context for c in cfgs), sum(c.right_context for c in cfgs)

    @property
    def receptive_field(self):
        left, right = self.context()
        return left + right + 1

    @property
    def embedding_dim(self):
        return self.segment_dims[0]

    def to_dict(self):
        return {"feat_dim": self.feat_dim, "frame_dims": list(self.frame_dims),
                "context_offsets": [list(o) for o in self.context_offsets],
                "dilations": list(self.dilations), "segment_dims": list(self.segment_dims),
                "n_speakers": self.n_speakers, "dtype": self.dtype}


def stats_pool(frames, eps=POOL_EPS):
    """Mean and floored population std over frames.

    Accepts a (T, D) array (returns a 2D-vector) or a (B, T, D) Tensor.
    """
    if isinstance(frames, F.Tensor):
        return F.stats_pool(frames, eps)
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or len(frames) == 0:
        raise DataError("stats_pool needs a non-empty (T, D) matrix")
    return F.stats_pool(F.Tensor(frames[None]), eps).data[0]


def build_frame_layers(prefix, cfgs, rng, dtype):
    return [TDNNLayer(f"{prefix}tdnn{i + 1}", c, rng, dtype) for i, c in enumerate(cfgs)]


def build_segment_layers(prefix, cfg: XVectorCfg, rng, dtype):
    layers, in_dim = [], 2 * cfg.frame_dims[-1]
    for i, dim in enumerate(cfg.segment_dims):
        layers.append(Affine(f"{prefix}fc{i + 1}", in_dim, dim, rng, dtype))
        in_dim = dim
    out = Affine(f"{prefix}out", in_dim, cfg.n_speakers, rng, dtype, batchnorm=False,
                 nonlinearity="none")
    return layers, out


def segment_head(h, segment_layers, out_layer, training, active=None, embedding=False):
    """stats pooling -> segment layers -> output logits (or the embedding)."""
    h = F.stats_pool(h, POOL_EPS)
    for i, layer in enumerate(segment_layers):
        a = layer.affine(h)
        if embedding and i == 0:
            return a
        h = layer.finish(a, training, _updates(layer, active))
    return out_layer(h, training)


def _updates(layer, active):
    return active is None or layer.name in active


def as_batch(feats, dtype):
    x = np.asarray(feats.data if isinstance(feats, F.Tensor) else feats, dtype=dtype)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise DataError("features must be (T, D) or (B, T, D)")
    return F.Tensor(x)


class XVector(Network):
    def __init__(self, cfg: XVectorCfg, seed=0):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(seed)
        self.frame_layers = build_frame_layers("", cfg.frame_layer_cfgs(), rng, self.dtype)
        self.segment_layers, self.out_layer = build_segment_layers("", cfg, rng, self.dtype)
        self.groups = [l.group for l in self.frame_layers + self.segment_layers + [self.out_layer]]

    def _check(self, x):
        if x.shape[2] != self.cfg.feat_dim:
            raise DataError(f"expected {self.cfg.feat_dim}-dim features, got {x.shape[2]}")
        if x.shape[1] < self.cfg.receptive_field:
            raise DataError(f"input of {x.shape[1]} frames is shorter than the "
                            f"{self.cfg.receptive_field}-frame receptive field")

    def forward(self, feats, training=True, active=None, embedding=False):
        x = as_batch(feats, self.dtype)
        self._check(x)
        h = x
        for layer in self.frame_layers:
            h = layer(h, training, _updates(layer, active))
        return segment_head(h, self.segment_layers, self.out_layer, training, active, embedding)

    def logits(self, feats):
        """Inference-mode speaker logits as an array."""
        return self.forward(feats, training=False).data

    def extract_embedding(self, feats):
        """Pre-nonlinearity output of the first segment layer for one whole utterance."""
        return self.forward(feats, training=False, embedding=True).data[0]
