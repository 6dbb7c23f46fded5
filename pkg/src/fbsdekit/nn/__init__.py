from .autodiff import Tensor, grad, no_grad
from .network import (
    Architecture,
    Network,
    apply_with_jacobian,
    default_architecture,
    grad_params,
    init_glorot,
    input_jacobian,
    layer_norm,
)
from .optim import AdamState, adam_init, adam_step, make_lr_schedule
from .checkpoint import (
    load_network,
    load_network_file,
    save_network,
    save_network_file,
)

__all__ = [
    "Tensor", "grad", "no_grad",
    "Architecture", "Network", "default_architecture", "init_glorot",
    "input_jacobian", "apply_with_jacobian", "grad_params", "layer_norm",
    "AdamState", "adam_init", "adam_step", "make_lr_schedule",
    "save_network", "load_network", "save_network_file", "load_network_file",
]
