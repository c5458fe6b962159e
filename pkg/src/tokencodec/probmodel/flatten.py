"""Serialization of token grids into causal symbol sequences.

Grids flatten layer-major within a frame, frames in time order.  The
coarse order contains only the transmitted layers (1..n_coarse); the
full order interleaves coarse and fine layers per frame and is what the
receiver-side synthesis model walks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContextError, ShapeError
from ..rvq import CodecConfig, TokenGrid

ROLE_COARSE = "coarse"
ROLE_FINE = "fine"


def coarse_layout(n_frames: int, n_coarse: int) -> np.ndarray:
    """(position, 2) array of (frame, layer) pairs for the coarse order.

    Layers are 1-based; position (n, k) precedes (n, k') iff k < k', and
    every position of frame n precedes frame n+1.
    """
    frames = np.repeat(np.arange(n_frames), n_coarse)
    layers = np.tile(np.arange(1, n_coarse + 1), n_frames)
    return np.stack([frames, layers], axis=1).astype(np.int32)


def full_layout(n_frames: int, n_coarse: int, n_fine: int) -> np.ndarray:
    """(position, 2) array of (frame, layer) pairs over all layers."""
    n_layers = n_coarse + n_fine
    frames = np.repeat(np.arange(n_frames), n_layers)
    layers = np.tile(np.arange(1, n_layers + 1), n_frames)
    return np.stack([frames, layers], axis=1).astype(np.int32)


def role_layout(n_frames: int, cfg: CodecConfig, role: str) -> np.ndarray:
    if role == ROLE_COARSE:
        return coarse_layout(n_frames, cfg.n_coarse)
    if role == ROLE_FINE:
        return full_layout(n_frames, cfg.n_coarse, cfg.n_fine)
    raise ContextError(f"unknown role {role!r}")


def flatten_coarse(g: TokenGrid) -> np.ndarray:
    """Coarse symbols of a grid in coarse flattening order."""
    return g.codes[:, : g.config.n_coarse].reshape(-1).copy()


def unflatten_coarse(symbols, n_frames: int, cfg: CodecConfig) -> TokenGrid:
    """Inverse of :func:`flatten_coarse`."""
    symbols = np.asarray(symbols, dtype=np.int32)
    if symbols.size != n_frames * cfg.n_coarse:
        raise ShapeError(
            f"{symbols.size} symbols do not fill {n_frames} frames x {cfg.n_coarse} layers"
        )
    return TokenGrid(symbols.reshape(n_frames, cfg.n_coarse), cfg)


def flatten_full(g: TokenGrid) -> list[tuple[int, str]]:
    """All symbols of a full grid, each labeled 'coarse' or 'fine'."""
    if g.is_coarse_only and g.config.n_fine > 0:
        raise ShapeError("grid has no fine layers to flatten")
    n_coarse = g.config.n_coarse
    out = []
    for row in g.codes:
        for k, code in enumerate(row, start=1):
            out.append((int(code), ROLE_COARSE if k <= n_coarse else ROLE_FINE))
    return out


@dataclass(frozen=True)
class SymbolContext:
    """The symbols preceding one prediction target, in flattening order.

    ``triples`` is an ordered sequence of (frame, layer, code); the
    target position is where the model's next distribution applies.
    Layers are 1-based.
    """

    triples: tuple
    target_frame: int
    target_layer: int

    @classmethod
    def from_grid(cls, g: TokenGrid, role: str, position: int) -> "SymbolContext":
        """Context for the flattening position ``position`` of a grid."""
        layout = role_layout(g.n_frames, g.config, role)
        if not 0 <= position < layout.shape[0]:
            raise ContextError(f"position {position} outside layout of {layout.shape[0]}")
        triples = tuple(
            (int(f), int(l), int(g.codes[f, l - 1])) for f, l in layout[:position]
        )
        f, l = layout[position]
        return cls(triples, int(f), int(l))


def validate_context(ctx: SymbolContext, role: str, cfg: CodecConfig) -> None:
    """Reject contexts inconsistent with a role's flattening order."""
    if role == ROLE_COARSE:
        max_layer, per_frame = cfg.n_coarse, cfg.n_coarse
        if not 1 <= ctx.target_layer <= cfg.n_coarse:
            raise ContextError(
                f"coarse model cannot predict layer {ctx.target_layer}"
            )
    elif role == ROLE_FINE:
        max_layer, per_frame = cfg.n_layers, cfg.n_layers
        if not cfg.n_coarse < ctx.target_layer <= cfg.n_layers:
            raise ContextError(
                f"fine model only predicts layers in ({cfg.n_coarse}, {cfg.n_layers}]"
            )
    else:
        raise ContextError(f"unknown role {role!r}")
    last = -1
    for frame, layer, code in ctx.triples:
        if not 1 <= layer <= max_layer:
            raise ContextError(f"layer {layer} outside role {role!r}")
        if not 0 <= code < cfg.codebook_size:
            raise ContextError(f"code {code} out of range")
        index = frame * per_frame + (layer - 1)
        if index <= last:
            raise ContextError("context not strictly increasing in flattening order")
        last = index
    target_index = ctx.target_frame * per_frame + (ctx.target_layer - 1)
    if target_index <= last:
        raise ContextError("target does not follow the context")
