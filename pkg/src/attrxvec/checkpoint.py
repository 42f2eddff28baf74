"""Model checkpoints: named tensors, layer configuration and optimizer state."""

from __future__ import annotations

from .archive import read_container, write_container
from .errors import FormatError
from .mtl import MTLCfg, MTLNet
from .nn.optim import Adam
from .xvector import XVector, XVectorCfg


def save_checkpoint(path, net, optimizer: Adam | None = None) -> str:
    if isinstance(net, MTLNet):
        meta = {"model": "mtl", "cfg": net.cfg.to_dict()}
    elif isinstance(net, XVector):
        meta = {"model": "xvector", "cfg": net.cfg.to_dict()}
    else:
        raise TypeError(f"cannot checkpoint {type(net).__name__}")
    arrays = {f"param/{k}": v for k, v in net.state_dict().items()}
    if optimizer is not None:
        meta["optimizer"] = {"beta1": optimizer.beta1, "beta2": optimizer.beta2,
                             "eps": optimizer.eps, "weight_decay": optimizer.weight_decay,
                             "steps": optimizer.steps()}
        arrays.update({f"opt/{k}": v for k, v in optimizer.arrays().items()})
    return write_container(path, "checkpoint", meta, arrays)


def load_checkpoint(path):
    """Returns ``(net, optimizer_or_None)``."""
    meta, arrays = read_container(path, "checkpoint")
    cfg = meta["cfg"]
    if meta["model"] == "xvector":
        net = XVector(XVectorCfg(**cfg))
    elif meta["model"] == "mtl":
        net = MTLNet(MTLCfg(**{**cfg, "xvector": XVectorCfg(**cfg["xvector"])}))
    else:
        raise FormatError(f"{path}: unknown model type {meta['model']!r}")
    net.load_state_dict({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    opt = None
    if "optimizer" in meta:
        o = meta["optimizer"]
        opt = Adam(o["beta1"], o["beta2"], o["eps"], o["weight_decay"])
        opt.load({k[len("opt/"):]: v for k, v in arrays.items() if k.startswith("opt/")}, o["steps"])
    return net, opt
