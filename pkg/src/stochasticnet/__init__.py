"""Sparse StochasticNet convolutional networks and convolutional-layer transfer."""
from .connectivity import (
    ConnectivityMask,
    GaussianConnectivityModel,
    ProbabilityMap,
    probability_map,
    realize_conv_mask,
    realize_dense_mask,
)
from .data import Dataset, generate_synthetic_domains, load_cifar10, load_stl10
from .network import Network, build_network, build_paper_architecture
from .training import SGDConfig, TrainingLog, evaluate, freeze_report, train
from .transfer import load, run_paper_protocol, save, transfer_conv

__version__ = "0.1.0"
