"""Simulator and finite-key engine for three-state time-bin BB84 with one decoy."""
from .model import (LinkModel, ProtocolConfig, SyncMode, ValidationError, load_config,
                    default_setup, save_config, validate)
from .channel import (BlockCounts, BlockUnreachable, DriftProfile, GroundTruth,
                      expected_observables, simulate_block)
from .finite_key import KeyLengthReport, secret_key_length

__version__ = "0.1.0"

__all__ = [
    "LinkModel", "ProtocolConfig", "SyncMode", "ValidationError", "load_config",
    "default_setup", "save_config", "validate", "BlockCounts", "BlockUnreachable",
    "DriftProfile", "GroundTruth", "expected_observables", "simulate_block",
    "KeyLengthReport", "secret_key_length",
]
