from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckError, GradCheckReport, grad_check
from .layers import (LayerSpec, ShapeError, conv2d, dense, flatten, maxout,
                     maxpool2d, relu)
from .network import (ForwardTrace, Network, backward, features, forward,
                      init_network, predict)
from .optim import OptimizerState, optimizer_step

__all__ = [
    "CheckpointError", "ForwardTrace", "GradCheckError", "GradCheckReport",
    "LayerSpec", "Network", "OptimizerState", "ShapeError", "backward",
    "conv2d", "dense", "features", "flatten", "forward", "grad_check",
    "init_network", "load_checkpoint", "maxout", "maxpool2d",
    "optimizer_step", "predict", "relu", "save_checkpoint",
]
