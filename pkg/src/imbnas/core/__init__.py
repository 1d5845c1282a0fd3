from .gradcheck import finite_diff_grad, max_rel_error, rel_error
from .ops import BNStats, ShapeError, count_macs, forward_op
from .optim import SGD, LrSchedule, lr_at_epoch, sgd_momentum_step
from .params import BACKBONE, CLASSIFIER, ParamSet
from .tensor import Tensor, TapeError, backward, grad_map, no_grad

__all__ = [
    "BACKBONE",
    "CLASSIFIER",
    "BNStats",
    "LrSchedule",
    "ParamSet",
    "SGD",
    "ShapeError",
    "TapeError",
    "Tensor",
    "backward",
    "count_macs",
    "finite_diff_grad",
    "forward_op",
    "grad_map",
    "lr_at_epoch",
    "max_rel_error",
    "rel_error",
    "no_grad",
    "sgd_momentum_step",
]
