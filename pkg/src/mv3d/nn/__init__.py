from .gradcheck import GradCheckReport, grad_check
from .layers import (LN_EPS, MLP, LayerNorm, Linear, PatchConv, TransposedConv2x,
                     identity_conv1x1, sinusoid_features)
from .params import INIT_STD, ParamStore
from .tensor import (NonFiniteError, Tensor, as_tensor, backward, bilinear_sample,
                     concat, maximum, minimum, softmax, stack, where)

__all__ = [
    "GradCheckReport", "grad_check", "LN_EPS", "MLP", "LayerNorm", "Linear",
    "PatchConv", "TransposedConv2x", "identity_conv1x1", "sinusoid_features",
    "INIT_STD", "ParamStore", "NonFiniteError", "Tensor", "as_tensor", "backward",
    "bilinear_sample", "concat", "maximum", "minimum", "softmax", "stack", "where",
]
