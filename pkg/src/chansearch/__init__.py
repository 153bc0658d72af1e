"""Desk-scale differentiable architecture search with adaptive channel allocation."""

from .autodiff import Tensor, ParamStore, backward
from .spaces import (OperationKind, SearchSpace, ops_for_space, get_space,
                     build_topology, network_layout, apply_operation)
from .supernet import ArchParams, SuperNet, build_supernet
from .search import SearchConfig, SearchTrace, run_search, alternating_step
from .genotype import (Genotype, ChannelAllocation, derive_genotype,
                       allocate_channels, darts_s_allocation, skip_fraction,
                       serialize_genotype, deserialize_genotype, export_dot)
from .targetnet import (TargetNet, TrainConfig, build_target, train_target,
                        evaluate, count_params_flops)
from .data import Dataset, generate_synthetic, load_raw, save_raw, split

__version__ = "0.1.0"
