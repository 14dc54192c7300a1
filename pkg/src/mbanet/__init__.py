"""Multi-bias activation networks in plain numpy with hand-written backprop."""

from .activations import (apl_backward, apl_forward, maxout_backward, maxout_forward,
                          mba_backward, mba_forward, relu_backward, relu_forward)
from .analysis import count_params, extract_mapping, activation_histogram
from .checkpoint import load as load_checkpoint, save as save_checkpoint
from .config import RunConfig, load_config, parse_config
from .data import AugmentConfig, Dataset, load_cifar10, load_mnist
from .estimator import MBANetClassifier
from .network import Network, NetworkSpec, StackSpec, build_network, init_params
from .optim import OptState, TrainConfig, evaluate, lr_at_epoch, sgd_step, train

__version__ = "0.1.0"

__all__ = [
    "relu_forward", "relu_backward", "mba_forward", "mba_backward",
    "apl_forward", "apl_backward", "maxout_forward", "maxout_backward",
    "count_params", "extract_mapping", "activation_histogram",
    "load_checkpoint", "save_checkpoint",
    "RunConfig", "load_config", "parse_config",
    "AugmentConfig", "Dataset", "load_cifar10", "load_mnist",
    "MBANetClassifier",
    "Network", "NetworkSpec", "StackSpec", "build_network", "init_params",
    "OptState", "TrainConfig", "evaluate", "lr_at_epoch", "sgd_step", "train",
]
