from tspf.autodiff.io import load_checkpoint, save_checkpoint
from tspf.autodiff.nn import MlpParams, init_mlp, mlp_forward
from tspf.autodiff.optim import Adam, OptimState, optimizer_step
from tspf.autodiff.tensor import Tensor, no_grad

__all__ = [
    "Adam",
    "MlpParams",
    "OptimState",
    "Tensor",
    "init_mlp",
    "load_checkpoint",
    "mlp_forward",
    "no_grad",
    "optimizer_step",
    "save_checkpoint",
]
