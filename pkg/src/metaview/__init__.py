"""Few-shot active object recognition on synthetic view grids.

A recurrent agent picks a short sequence of viewpoints on an object's view
grid, and its parameters are meta-learned so that one gradient step on a
handful of labelled episodes adapts it to new classes.
"""

from .agent import (AgentDims, EpisodeBatch, EpisodeConfig, Trajectory, init_params,
                    load_checkpoint, rollout, rollout_batch, save_checkpoint)
from .env import (ActionSet, Dataset, GeneratorConfig, GridGeometry, ViewPointer, apply_action,
                  generate_dataset, load_dataset, save_dataset)
from .errors import (ConfigError, ContractError, FormatError, MetaViewError, NumericError,
                     SamplingError, SizeError, VersionError)
from .losses import LossWeights, batch_loss, total_loss
from .meta import (MetaConfig, SplitSpec, Task, inner_adapt, make_splits, outer_step,
                   run_meta_test, run_meta_training, sample_task)

__version__ = "0.1.0"

__all__ = [
    "ActionSet", "AgentDims", "ConfigError", "ContractError", "Dataset", "EpisodeBatch",
    "EpisodeConfig", "FormatError", "GeneratorConfig", "GridGeometry", "LossWeights",
    "MetaConfig", "MetaViewError", "NumericError", "SamplingError", "SizeError", "SplitSpec",
    "Task", "Trajectory", "VersionError", "ViewPointer", "apply_action", "batch_loss",
    "generate_dataset", "init_params", "inner_adapt", "load_checkpoint", "load_dataset",
    "make_splits", "outer_step", "rollout", "rollout_batch", "run_meta_test",
    "run_meta_training", "sample_task", "save_checkpoint", "save_dataset", "total_loss",
]
