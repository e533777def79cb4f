"""Invertible blocks and (conditional) normalizing flows."""
from .blocks import MLP, ActNorm, AffineCoupling, Block, LUMix, Permutation, Squeeze
from .checkpoint import load_model, save_model
from .flow import (Conditioner, ConditionalFlowModel, FlowModel, build_conditional_flow,
                   build_flow, default_coupling_count, model_from_descriptor)

__all__ = [
    "MLP",
    "ActNorm",
    "AffineCoupling",
    "Block",
    "Conditioner",
    "ConditionalFlowModel",
    "FlowModel",
    "LUMix",
    "Permutation",
    "Squeeze",
    "build_conditional_flow",
    "build_flow",
    "default_coupling_count",
    "load_model",
    "model_from_descriptor",
    "save_model",
]
