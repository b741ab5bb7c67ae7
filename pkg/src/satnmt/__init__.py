"""Semi-autoregressive Transformer at desk scale."""

from satnmt.masks import (partition_groups, relaxed_causal_mask, shift_targets,
                          strict_causal_mask)
from satnmt.model import HyperParams, ModelParams, SATModel, init_params

__all__ = ["HyperParams", "ModelParams", "SATModel", "init_params", "partition_groups",
           "relaxed_causal_mask", "shift_targets", "strict_causal_mask"]
