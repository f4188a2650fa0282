from .tensor import (AllMaskedRowError, ShapeError, Tensor, add, as_tensor, bce_with_logits,
                     concat, div, dropout, embedding, exp, getitem, grad_enabled, layer_norm,
                     linear, log, matmul, mean, mul, no_grad, parameter, relu, reshape, sigmoid,
                     softmax_lastdim, square, stop_gradient, sub, tabs, tanh, transpose, tsum)
from .optim import AdamState, TrainingDivergenceError, adam_step
from .gradcheck import grad_check
