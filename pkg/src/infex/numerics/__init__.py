"""Dense float32 layers with hand-written backward passes, Adam, and gradient checks."""

from .checkpoint import load_arrays, load_state_dict, save_arrays, state_dict
from .gradcheck import float64_params, grad_check, input_grad_check
from .layers import (
    DTYPE,
    Conv2d,
    ConvTranspose2d,
    Dense,
    Flatten,
    Layer,
    MaxPool2,
    MultiplicativeFusion,
    Param,
    ReLU,
    Reshape,
    Sequential,
    Sigmoid,
    check_one_hot,
    conv_output_size,
    maxpool2,
    one_hot,
    relu,
    sigmoid,
)
from .losses import bce_loss, l2_distance, mse_loss, rowwise_l2
from .optim import Adam, OptimConfig


def conv2d(x, layer, stride=None):
    """Functional form over a single ``(C, H, W)`` input using ``layer``'s parameters."""
    if stride is not None:
        layer.stride = stride
    return layer.forward(x[None].astype(DTYPE))[0]


def deconv2d(x, layer, stride=None):
    if stride is not None:
        layer.stride = stride
    return layer.forward(x[None].astype(DTYPE))[0]


def dense(x, layer):
    return layer.forward(x.reshape(1, -1).astype(DTYPE))[0]


def multiplicative_fusion(h_s, a_onehot, fusion):
    return fusion.forward(h_s.reshape(1, -1).astype(DTYPE), a_onehot.reshape(1, -1))[0]
