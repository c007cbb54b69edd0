from . import ops
from .gradcheck import gradient_check, numerical_gradients, relative_error
from .optim import AdamState, adam_step, clip_gradients, make_rng, xavier_init
from .tape import NonFiniteError, Node, Op, ShapeError, Tape, TapeError

__all__ = [
    "AdamState",
    "Node",
    "NonFiniteError",
    "Op",
    "ShapeError",
    "Tape",
    "TapeError",
    "adam_step",
    "clip_gradients",
    "gradient_check",
    "make_rng",
    "numerical_gradients",
    "ops",
    "relative_error",
    "xavier_init",
]
