"""Federated training of a semantic-communication image codec.

Loss-weighted (FedLol) aggregation, partial channel-codec synchronization,
a fading channel with zero-forcing equalization and an exact byte ledger.
"""

from .fl import RunConfig, run_training
from .model import ModelSpec, SemComModel
from .params import GROUPS, GroupLayout, ParamVector

__all__ = ["GROUPS", "GroupLayout", "ModelSpec", "ParamVector", "RunConfig", "SemComModel", "run_training"]
__version__ = "0.1.0"
