from . import autograd, kernels
from .autograd import Var, no_grad
from .gradcheck import finite_diff_check
from .nn import AttentionWeights, LstmWeights, lstm_cell, self_attention_layer
from .optim import AdamState, adam_step

__all__ = [
    "AdamState",
    "AttentionWeights",
    "LstmWeights",
    "Var",
    "adam_step",
    "autograd",
    "finite_diff_check",
    "kernels",
    "lstm_cell",
    "no_grad",
    "self_attention_layer",
]
