"""Causal probability models over token grids."""

from .base import (
    PROB_FLOOR,
    ScoringSession,
    TokenModel,
    accuracy,
    floor_distribution,
    load_model,
    save_model,
)
from .context_model import DEFAULT_ORDER, ContextModel, train_context_model
from .flatten import (
    ROLE_COARSE,
    ROLE_FINE,
    SymbolContext,
    coarse_layout,
    flatten_coarse,
    flatten_full,
    full_layout,
    role_layout,
    unflatten_coarse,
    validate_context,
)
from .transformer import TransformerConfig, TransformerModel, train_transformer
