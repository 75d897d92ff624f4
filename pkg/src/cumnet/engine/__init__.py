from .checkpoint import load_checkpoint, save_checkpoint
from .layers import BatchNorm2D, Conv2D, Dense, Flatten, Layer, MaxPool2D, ReLU
from .network import (ForwardCache, Network, accuracy, backward, build_vgg, cross_entropy, forward,
                      forward_with_cache, input_gradient, predict, reinitialize, softmax)
from .optim import SGD, sgd_step

__all__ = [
    "BatchNorm2D", "Conv2D", "Dense", "Flatten", "ForwardCache", "Layer", "MaxPool2D", "Network",
    "ReLU", "SGD", "accuracy", "backward", "build_vgg", "cross_entropy", "forward",
    "forward_with_cache", "input_gradient", "load_checkpoint", "predict", "reinitialize",
    "save_checkpoint", "sgd_step", "softmax",
]
