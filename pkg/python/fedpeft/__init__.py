"""
fedpeft - Federated parameter-efficient fine-tuning with attention-head pruning

Simulates federated LoRA fine-tuning of a miniature transformer classifier:
clients score their attention heads, prune the least confident ones, train
and upload only the surviving head blocks, and the server merges them
weighted by importance. A cost model reports training OPs and upload bytes.

Example:
    >>> from fedpeft import ExperimentConfig, apply_overrides, run_experiment
    >>>
    >>> config = apply_overrides(ExperimentConfig(), {
    ...     "experiment.rounds": 20,
    ...     "training.learning_rate": 0.1,
    ...     "pruning.mode": "importance",
    ...     "pruning.sparsity": 0.5,
    ...     "aggregation.mode": "weighted",
    ... })
    >>> result = run_experiment(config, run_dir="runs/demo")
    >>> print(f"accuracy {result.final_accuracy:.3f}, {result.total_bytes} bytes uploaded")
"""

from .aggregation import GlobalState, aggregate, fedavg_merge, weighted_head_merge
from .checkpoint import Checkpoint, CheckpointManager
from .config import ExperimentConfig, apply_overrides, load_config
from .costs import PRESETS, ArchSpec, CostReport, PeftMethod, comm_for, ops_for
from .data import Dataset, Partition, SyntheticTask, generate, partition_dirichlet, partition_iid
from .errors import ConfigError, FedPeftError, InputError, NumericalError, ProtocolError, ShapeError
from .importance import ImportanceMatrix, compute_importance, prune_by_sparsity
from .lora import LoraAdapter, PruneMask, apply_lora, freeze_pruned, head_slice
from .model import MiniTransformer, ModelConfig
from .orchestrator import ExperimentResult, FederatedSimulation, RoundMetrics, run_experiment
from .selection import ClientLedger, select_random, select_top_k
from .tensor import GradTape, Tensor
from .wire import ClientUpdate, decode_update, encode_update

__all__ = [
    # Model
    "ModelConfig",
    "MiniTransformer",
    "Tensor",
    "GradTape",
    # Adapters and pruning
    "LoraAdapter",
    "PruneMask",
    "apply_lora",
    "head_slice",
    "freeze_pruned",
    "ImportanceMatrix",
    "compute_importance",
    "prune_by_sparsity",
    # Federation
    "ClientUpdate",
    "encode_update",
    "decode_update",
    "GlobalState",
    "aggregate",
    "fedavg_merge",
    "weighted_head_merge",
    "ClientLedger",
    "select_top_k",
    "select_random",
    "FederatedSimulation",
    "RoundMetrics",
    "ExperimentResult",
    "run_experiment",
    # Data
    "SyntheticTask",
    "Dataset",
    "Partition",
    "generate",
    "partition_iid",
    "partition_dirichlet",
    # Config and checkpoints
    "ExperimentConfig",
    "load_config",
    "apply_overrides",
    "Checkpoint",
    "CheckpointManager",
    # Costs
    "ArchSpec",
    "CostReport",
    "PeftMethod",
    "PRESETS",
    "ops_for",
    "comm_for",
    # Errors
    "FedPeftError",
    "ShapeError",
    "InputError",
    "ConfigError",
    "ProtocolError",
    "NumericalError",
]

__version__ = "0.1.0"
