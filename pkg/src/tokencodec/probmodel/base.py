"""Shared machinery for causal token models.

A model predicts a distribution over the next code given the symbols so
far in its role's flattening order.  Scoring sessions walk one stream
incrementally; ``next_distribution`` is the pure-function view and is
defined as a fresh-session replay of the context, so both paths produce
identical numbers by construction.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from ..errors import ContextError, CorruptStream, ShapeError
from ..rvq import CodecConfig, TokenGrid
from .flatten import ROLE_COARSE, ROLE_FINE, SymbolContext, role_layout, validate_context

PROB_FLOOR = 2.0 ** -16

_MODEL_MAGIC = b"TCM1"
_ROLE_BYTES = {ROLE_COARSE: 0, ROLE_FINE: 1}
_ROLE_NAMES = {v: k for k, v in _ROLE_BYTES.items()}
_KIND_BYTES = {"context-model": 0, "transformer": 1}
_KIND_NAMES = {v: k for k, v in _KIND_BYTES.items()}
_LOADERS: dict[str, object] = {}


def floor_distribution(p: np.ndarray, eps: float = PROB_FLOOR) -> np.ndarray:
    """Mix a distribution with eps of uniform mass per symbol.

    Every entry ends up >= eps and the total stays 1, which keeps all
    code lengths finite without an iterative renormalization.
    """
    p = np.asarray(p, dtype=np.float64)
    return (1.0 - p.size * eps) * p + eps


class ScoringSession:
    """Incremental walk over one symbol stream.

    ``predict`` returns the model's distribution for the next position;
    ``push`` appends the symbol that actually occupies it.  Positions a
    model never predicts (coarse slots under a fine model) are pushed
    without a prior predict.
    """

    def predict(self, frame: int, layer: int) -> np.ndarray:
        raise NotImplementedError

    def push(self, frame: int, layer: int, code: int) -> None:
        raise NotImplementedError

    def cache_key(self, frame: int, layer: int):
        """Hashable identifier of the next prediction's distribution, or
        None when the distribution is not a function of a small key."""
        return None


class TokenModel:
    """Immutable trained model: role, configuration, parameters."""

    kind: str = ""

    def __init__(self, role: str, cfg: CodecConfig):
        if role not in (ROLE_COARSE, ROLE_FINE):
            raise ContextError(f"unknown role {role!r}")
        if role == ROLE_FINE and cfg.n_fine == 0:
            raise ContextError("fine model requires n_fine >= 1")
        self.role = role
        self.cfg = cfg
        self._model_id: bytes | None = None

    @property
    def nc(self) -> int:
        return self.cfg.codebook_size

    @property
    def model_id(self) -> bytes:
        """32-byte content hash binding bitstreams to this exact model."""
        if self._model_id is None:
            h = hashlib.sha256()
            h.update(_MODEL_MAGIC)
            h.update(bytes([_ROLE_BYTES[self.role], _KIND_BYTES[self.kind]]))
            h.update(json.dumps(self._config_dict(), sort_keys=True).encode())
            h.update(self._param_blob())
            self._model_id = h.digest()
        return self._model_id

    def session(self) -> ScoringSession:
        raise NotImplementedError

    def next_distribution(self, ctx: SymbolContext) -> np.ndarray:
        """Distribution at the target of ``ctx``: a fresh-session replay."""
        validate_context(ctx, self.role, self.cfg)
        sess = self.session()
        for frame, layer, code in ctx.triples:
            sess.push(frame, layer, code)
        return sess.predict(ctx.target_frame, ctx.target_layer)

    def predicts(self, layer: int) -> bool:
        """Whether positions at this layer are this model's to predict."""
        if self.role == ROLE_COARSE:
            return layer <= self.cfg.n_coarse
        return layer > self.cfg.n_coarse

    def _config_dict(self) -> dict:
        raise NotImplementedError

    def _param_blob(self) -> bytes:
        raise NotImplementedError


def accuracy(model: TokenModel, grids) -> float:
    """Fraction of the model's role positions where the argmax of the
    predicted distribution equals the true code."""
    hits = 0
    total = 0
    for grid in grids:
        _check_grid_role(model, grid)
        sess = model.session()
        layout = role_layout(grid.n_frames, grid.config, model.role)
        for frame, layer in layout:
            code = int(grid.codes[frame, layer - 1])
            if model.predicts(layer):
                probs = sess.predict(int(frame), int(layer))
                hits += int(np.argmax(probs)) == code
                total += 1
            sess.push(int(frame), int(layer), code)
    if total == 0:
        raise ShapeError("no predictable positions in the supplied grids")
    return hits / total


def _check_grid_role(model: TokenModel, grid: TokenGrid) -> None:
    if grid.config.codebook_size != model.nc:
        raise ContextError(
            f"grid codebook size {grid.config.codebook_size} != model's {model.nc}"
        )
    if model.role == ROLE_FINE and grid.is_coarse_only and model.cfg.n_fine > 0:
        raise ShapeError("fine model needs grids with fine layers")


def register_kind(kind: str):
    def wrap(loader):
        _LOADERS[kind] = loader
        return loader
    return wrap


def save_model(path, model: TokenModel) -> None:
    """Write the binary model container (magic TCM1, id trailer)."""
    config = json.dumps(model._config_dict(), sort_keys=True).encode()
    blob = model._param_blob()
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(bytes([_ROLE_BYTES[model.role], _KIND_BYTES[model.kind]]))
        fh.write(struct.pack("<I", len(config)))
        fh.write(config)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(model.model_id)


def load_model(path) -> TokenModel:
    """Read a TCM1 container and verify its embedded model id."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 10 or data[: 4] != _MODEL_MAGIC:
        raise CorruptStream(f"{path}: not a model file")
    role_b, kind_b = data[4], data[5]
    if role_b not in _ROLE_NAMES or kind_b not in _KIND_NAMES:
        raise CorruptStream(f"{path}: unknown role/kind bytes")
    (config_len,) = struct.unpack_from("<I", data, 6)
    off = 10
    config = json.loads(data[off : off + config_len])
    off += config_len
    (blob_len,) = struct.unpack_from("<Q", data, off)
    off += 8
    blob = data[off : off + blob_len]
    off += blob_len
    trailer = data[off : off + 32]
    if len(blob) != blob_len or len(trailer) != 32:
        raise CorruptStream(f"{path}: truncated model file")
    loader = _LOADERS.get(_KIND_NAMES[kind_b])
    if loader is None:
        raise CorruptStream(f"{path}: no loader for kind {_KIND_NAMES[kind_b]!r}")
    model = loader(_ROLE_NAMES[role_b], config, blob)
    if model.model_id != trailer:
        raise CorruptStream(f"{path}: model id mismatch (corrupt parameters)")
    return model
