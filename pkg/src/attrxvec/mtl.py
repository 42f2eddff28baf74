"""Dual-branch multitask network joined by cross-stitch units.

The speaker branch is the x-vector network; the NSA branch is a framewise
TDNN classifier whose first four layers mirror the speaker branch.  After
each listed layer ``l`` the activation maps are exchanged::

    x_S <- a_SS * x_S + a_NS * x_N
    x_N <- a_NN * x_N + a_SN * x_S

In ``improved`` mode a_SS = a_NN = 1 are constants and only the two cross
coefficients are learned.  ``original`` learns all four; ``shared`` replaces
the exchange by a single hard-shared trunk.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .nn import tensor as F
from .nn.layers import Affine, Network, ParamGroup
from .nn.tensor import Tensor
from .xvector import (XVectorCfg, _updates, as_batch, build_frame_layers, build_segment_layers,
                      segment_head)

MODES = ("improved", "original", "shared")
NSA_LAYERS = 4


@dataclass
class MTLCfg:
    xvector: XVectorCfg = field(default_factory=XVectorCfg)
    n_nsa: int = 400
    nsa_fc_dim: int = 128
    cross_stitch_layers: tuple = (1, 2)
    alpha_init: float = 0.1
    mode: str = "improved"
    alpha_granularity: str = "scalar"
    freeze_alpha: bool = False

    def __post_init__(self):
        self.cross_stitch_layers = tuple(sorted(int(l) for l in self.cross_stitch_layers))
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.alpha_granularity not in ("scalar", "channel"):
            raise ConfigError("alpha_granularity must be 'scalar' or 'channel'")
        if not self.cross_stitch_layers or len(set(self.cross_stitch_layers)) != len(self.cross_stitch_layers):
            raise ConfigError("cross_stitch_layers must be a non-empty list of distinct layers")
        if self.cross_stitch_layers[0] < 1 or self.cross_stitch_layers[-1] > NSA_LAYERS:
            raise ConfigError(f"cross-stitch layers must lie in 1..{NSA_LAYERS}")
        if len(self.xvector.frame_dims) < NSA_LAYERS + 1:
            raise ConfigError("the speaker branch needs at least five frame layers")
        if self.n_nsa < 1 or self.nsa_fc_dim < 1:
            raise ConfigError("n_nsa and nsa_fc_dim must be positive")

    @property
    def depth(self):
        """Number of bottom layers whose outputs feed both tasks."""
        return self.cross_stitch_layers[-1]

    def nsa_context(self):
        return self.xvector.context(NSA_LAYERS)

    def to_dict(self):
        return {"xvector": self.xvector.to_dict(), "n_nsa": self.n_nsa, "nsa_fc_dim": self.nsa_fc_dim,
                "cross_stitch_layers": list(self.cross_stitch_layers), "alpha_init": self.alpha_init,
                "mode": self.mode, "alpha_granularity": self.alpha_granularity,
                "freeze_alpha": self.freeze_alpha}


class CrossStitchUnit:
    """Coefficients at one layer.  Same-task coefficients are plain floats (1.0)
    unless the unit is in ``original`` mode, where they become parameters."""

    def __init__(self, layer_index, width, cfg: MTLCfg, dtype):
        self.layer_index = layer_index
        shape = (width,) if cfg.alpha_granularity == "channel" else (1,)
        self.groups = {}

        def param(label, value):
            group = ParamGroup(f"cs{layer_index}.{label}",
                               {"value": Tensor(np.full(shape, value, dtype=dtype), requires_grad=True,
                                                name=f"cs{layer_index}.{label}.value")},
                               trainable=not cfg.freeze_alpha)
            self.groups[label] = group
            return group.tensors["value"]

        self.alpha_NS = param("alpha_NS", cfg.alpha_init)
        self.alpha_SN = param("alpha_SN", cfg.alpha_init)
        if cfg.mode == "original":
            self.alpha_SS = param("alpha_SS", 1.0)
            self.alpha_NN = param("alpha_NN", 1.0)
        else:
            self.alpha_SS = self.alpha_NN = 1.0


def cross_stitch(x_s, x_n, unit: CrossStitchUnit):
    """Linear exchange of two equally shaped activation maps."""
    x_s, x_n = F.as_tensor(x_s), F.as_tensor(x_n)
    if x_s.shape != x_n.shape:
        raise DataError(f"cross-stitch shape mismatch: {x_s.shape} vs {x_n.shape}")
    own_s = x_s if isinstance(unit.alpha_SS, float) and unit.alpha_SS == 1.0 else F.mul(unit.alpha_SS, x_s)
    own_n = x_n if isinstance(unit.alpha_NN, float) and unit.alpha_NN == 1.0 else F.mul(unit.alpha_NN, x_n)
    new_s = F.add(own_s, F.mul(unit.alpha_NS, x_n))
    new_n = F.add(own_n, F.mul(unit.alpha_SN, x_s))
    return new_s, new_n


class MTLNet(Network):
    def __init__(self, cfg: MTLCfg, seed=0):
        self.cfg = cfg
        xcfg = cfg.xvector
        self.dtype = np.dtype(xcfg.dtype)
        rng = np.random.default_rng(seed)
        frame_cfgs = xcfg.frame_layer_cfgs()
        depth = cfg.depth
        if cfg.mode == "shared":
            self.shared = build_frame_layers("shared.", frame_cfgs[:depth], rng, self.dtype)
        else:
            self.shared = []
        spk = build_frame_layers("spk.", frame_cfgs, rng, self.dtype)
        nsa = build_frame_layers("nsa.", frame_cfgs[:NSA_LAYERS], rng, self.dtype)
        if cfg.mode == "shared":
            spk = spk[depth:]
            nsa = nsa[depth:]
        self.spk_frame, self.nsa_frame = spk, nsa
        self.spk_segment, self.spk_out = build_segment_layers("spk.", xcfg, rng, self.dtype)
        self.nsa_fc = Affine("nsa.fc", frame_cfgs[NSA_LAYERS - 1].out_dim, cfg.nsa_fc_dim, rng,
                             self.dtype)
        self.nsa_out = Affine("nsa.out", cfg.nsa_fc_dim, cfg.n_nsa, rng, self.dtype,
                              batchnorm=False, nonlinearity="none")
        self.units = {}
        if cfg.mode != "shared":
            for l in cfg.cross_stitch_layers:
                self.units[l] = CrossStitchUnit(l, frame_cfgs[l - 1].out_dim, cfg, self.dtype)
        layers = self.shared + self.spk_frame + self.spk_segment + [self.spk_out] + self.nsa_frame
        layers += [self.nsa_fc, self.nsa_out]
        self.groups = [l.group for l in layers]
        for unit in self.units.values():
            self.groups.extend(unit.groups.values())

    # -- update groups --------------------------------------------------------

    def _coupled(self, label):
        """Whether the other branch can influence this task through ``label`` coefficients."""
        for unit in self.units.values():
            group = unit.groups[label]
            if group.trainable or np.any(group.tensors["value"].data != 0):
                return True
        return False

    def update_mask(self, task):
        """Names of the parameter groups a step on ``task`` may change."""
        if task not in ("speaker", "nsa"):
            raise DataError(f"unknown task {task!r}")
        own, other = ("spk.", "nsa.") if task == "speaker" else ("nsa.", "spk.")
        cross, same = ("alpha_NS", "alpha_SS") if task == "speaker" else ("alpha_SN", "alpha_NN")
        names = set()
        for g in self.groups:
            if not g.trainable:
                continue
            if g.name.startswith(own) or g.name.startswith("shared."):
                names.add(g.name)
            elif g.name.endswith("." + cross) or g.name.endswith("." + same):
                names.add(g.name)
        if self.cfg.mode != "shared" and self._coupled(cross):
            for l in range(1, self.cfg.depth + 1):
                names.add(f"{other}tdnn{l}")
        return names

    # -- forward -------------------------------------------------------------

    def _bottom(self, x, training, active):
        depth = self.cfg.depth
        if self.cfg.mode == "shared":
            h = x
            for layer in self.shared:
                h = layer(h, training, _updates(layer, active))
            return h, h
        x_s = x_n = x
        for l in range(1, depth + 1):
            s_layer, n_layer = self.spk_frame[l - 1], self.nsa_frame[l - 1]
            x_s = s_layer(x_s, training, _updates(s_layer, active))
            x_n = n_layer(x_n, training, _updates(n_layer, active))
            if l in self.units:
                x_s, x_n = cross_stitch(x_s, x_n, self.units[l])
        return x_s, x_n

    def _top_layers(self, layers):
        return layers if self.cfg.mode == "shared" else layers[self.cfg.depth:]

    def forward(self, feats, task="speaker", training=True, active=None, embedding=False):
        x = as_batch(feats, self.dtype)
        xcfg = self.cfg.xvector
        if x.shape[2] != xcfg.feat_dim:
            raise DataError(f"expected {xcfg.feat_dim}-dim features, got {x.shape[2]}")
        if x.shape[1] < xcfg.receptive_field:
            raise DataError(f"input of {x.shape[1]} frames is shorter than the "
                            f"{xcfg.receptive_field}-frame receptive field")
        x_s, x_n = self._bottom(x, training, active)
        if task == "speaker":
            h = x_s
            for layer in self._top_layers(self.spk_frame):
                h = layer(h, training, _updates(layer, active))
            return segment_head(h, self.spk_segment, self.spk_out, training, active, embedding)
        if task == "nsa":
            h = x_n
            for layer in self._top_layers(self.nsa_frame) + [self.nsa_fc, self.nsa_out]:
                h = layer(h, training, _updates(layer, active))
            return h
        raise DataError(f"unknown task {task!r}")

    def nsa_output_frames(self, num_frames):
        left, right = self.cfg.nsa_context()
        return num_frames - left - right

    def trim_labels(self, labels):
        """Align per-frame labels (..., T) with the NSA branch output frames."""
        labels = np.asarray(labels)
        left, right = self.cfg.nsa_context()
        return labels[..., left: labels.shape[-1] - right]

    def extract_embedding(self, feats):
        return self.forward(feats, "speaker", training=False, embedding=True).data[0]

    def nsa_posteriors(self, feats):
        return F.softmax(self.forward(feats, "nsa", training=False).data, axis=-1)

    def alphas(self):
        out = {}
        for l, unit in self.units.items():
            for label, group in unit.groups.items():
                out[f"cs{l}.{label}"] = group.tensors["value"].data.copy()
        return out

    def load_speaker_branch(self, xvec):
        """Copy baseline x-vector weights into the speaker branch (improved/original modes)."""
        if self.cfg.mode == "shared":
            raise ConfigError("the shared trunk has no separate speaker branch to load")
        state = {f"spk.{k}": v for k, v in xvec.state_dict().items()}
        self.load_state_dict(state, strict=False)
