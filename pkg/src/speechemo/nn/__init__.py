"""Minimal numpy neural network stack: layers, optimizers, architectures, training."""

from .layers import (
    conv1d_backward,
    conv1d_forward,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    global_avg_pool_backward,
    global_avg_pool_forward,
    maxpool2d_backward,
    maxpool2d_forward,
    relu_backward,
    relu_forward,
    softmax,
    softmax_cross_entropy,
)
from .model import (
    ModelSpec,
    Network,
    SpecError,
    build_champion_cnn,
    build_cnn1d,
    build_cnn2d,
    build_dnn,
    load_network,
    save_network,
)
from .optim import SGD, Adam, adam_step, sgd_step
from .train import History, TrainConfig, TrainingError, grad_check, predict, train

__all__ = [name for name in dir() if not name.startswith("_")]
