"""Multi-party secure neural network inference over Shamir secret shares."""

from .engine import simulate_inference, simulate_schedule
from .field import DEFAULT_PRIME, FieldElement, PrimeField
from .layers import comm_estimate, full_layer_formula, plan_schedule
from .model import (ModelGraph, build_reference_model, load_model,
                    plaintext_infer, random_input, save_model)
from .sss import ShareTensor, SssScheme, share_add, share_mul, share_sub

__all__ = [
    "DEFAULT_PRIME",
    "FieldElement",
    "ModelGraph",
    "PrimeField",
    "ShareTensor",
    "SssScheme",
    "build_reference_model",
    "comm_estimate",
    "full_layer_formula",
    "load_model",
    "plaintext_infer",
    "plan_schedule",
    "random_input",
    "save_model",
    "share_add",
    "share_mul",
    "share_sub",
    "simulate_inference",
    "simulate_schedule",
]
