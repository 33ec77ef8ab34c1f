from .tensor import (
    Parameter,
    Tensor,
    add,
    concat,
    conv2d,
    default_dtype,
    getitem,
    linear,
    matmul,
    mul,
    no_grad,
    power,
    relu,
    reshape,
    set_default_dtype,
    softmax,
    swapaxes,
    texp,
    tmean,
    tsum,
)
from .nn import MLP, Conv2d, Linear, glorot_uniform, mlp_forward
from .optim import Adam, SGD, make_optimizer
from .checkpoint import load_archive, save_archive

__all__ = [
    "Tensor", "Parameter", "no_grad", "set_default_dtype", "default_dtype",
    "add", "mul", "power", "texp", "relu", "matmul", "linear", "tsum",
    "tmean", "softmax", "reshape", "swapaxes", "concat", "getitem", "conv2d",
    "Linear", "MLP", "Conv2d", "glorot_uniform", "mlp_forward",
    "SGD", "Adam", "make_optimizer",
    "save_archive", "load_archive",
]
