"""Heterogeneous federated learning by model partition and reassembly, in numpy.

Prototype models of different sizes are each cut into a feature-extraction block
and a device-adaptation block at the boundary where their representations agree
best (linear CKA). The feature-extraction block of one prototype is then joined to
every prototype's device-adaptation block through small convolutional adapters,
giving a group of models that share a trunk and can be trained together by clients
with very different memory budgets.
"""

from .zoo import build, default_zoo
from .similarity import linear_cka, partition_search
from .reassembly import build_group, make_adapter, reassemble
from .data import dirichlet_split, iid_split, load_cifar, synthetic_dataset
from .fl import aggregate, assign_levels, local_train, run_adapterfl, select_and_dispatch
from .config import ExperimentConfig
from .experiment import run_training

__version__ = "0.1.0"
__all__ = [
    "ExperimentConfig", "aggregate", "assign_levels", "build", "build_group", "default_zoo",
    "dirichlet_split", "iid_split", "linear_cka", "load_cifar", "local_train", "make_adapter",
    "partition_search", "reassemble", "run_adapterfl", "run_training", "select_and_dispatch",
    "synthetic_dataset",
]
