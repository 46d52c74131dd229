"""Minimal numpy neural-network engine used for all local training."""

from .graph import (ModelGraph, cross_entropy, load_state_dict, loss_and_grads, param_count,
                    parameters, softmax, state_dict, zero_grad)
from .layers import (AdaptiveAvgPool, BatchNorm2d, Conv2d, Dense, Flatten, GlobalAvgPool,
                     InvertedResidual, MaxPool, Module, Parameter, ReLU, ReLU6, ResidualBlock,
                     Sequential, ShapeError)
from .optim import SGD, lr_at

__all__ = [
    "AdaptiveAvgPool", "BatchNorm2d", "Conv2d", "Dense", "Flatten", "GlobalAvgPool",
    "InvertedResidual", "MaxPool", "ModelGraph", "Module", "Parameter", "ReLU", "ReLU6",
    "ResidualBlock", "SGD", "Sequential", "ShapeError", "cross_entropy", "load_state_dict",
    "loss_and_grads", "lr_at", "param_count", "parameters", "softmax", "state_dict", "zero_grad",
]
