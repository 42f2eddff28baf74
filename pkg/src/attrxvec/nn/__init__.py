from .gradcheck import GradCheckReport, grad_check
from .layers import Affine, Network, ParamGroup, TDNNLayer, TDNNLayerCfg, tdnn_forward
from .optim import Adam, adam_step, lr_schedule
from .tensor import Tensor, softmax, softmax_cross_entropy

__all__ = [
    "Adam", "Affine", "GradCheckReport", "Network", "ParamGroup", "TDNNLayer", "TDNNLayerCfg",
    "Tensor", "adam_step", "grad_check", "lr_schedule", "softmax", "softmax_cross_entropy",
    "tdnn_forward",
]
