"""Count-based causal token model.

A cheap deterministic predictor: per (target layer, last N symbols)
count tables with add-1 smoothing.  It implements the same interfaces
as the transformer and is the fast default for entropy-coding work.
"""

from __future__ import annotations

import struct
from collections import deque

import numpy as np

from ..errors import InsufficientData
from ..rvq import CodecConfig
from .base import ScoringSession, TokenModel, floor_distribution, register_kind, _check_grid_role
from .flatten import role_layout

DEFAULT_ORDER = 4


class ContextModelSession(ScoringSession):
    def __init__(self, model: "ContextModel"):
        self._model = model
        self._window: deque[int] = deque(maxlen=model.order)

    def _key(self, layer: int):
        return (layer, tuple(self._window))

    def predict(self, frame: int, layer: int) -> np.ndarray:
        return self._model._distribution(self._key(layer))

    def push(self, frame: int, layer: int, code: int) -> None:
        self._window.append(int(code))

    def cache_key(self, frame: int, layer: int):
        return self._key(layer)


class ContextModel(TokenModel):
    kind = "context-model"

    def __init__(self, role: str, cfg: CodecConfig, order: int,
                 counts: dict, totals: dict):
        super().__init__(role, cfg)
        if order < 1:
            raise ValueError(f"order must be >= 1, got {order}")
        self.order = order
        self.counts = counts    # (layer, ctx tuple) -> {code: count}
        self.totals = totals    # (layer, ctx tuple) -> total count

    def session(self) -> ContextModelSession:
        return ContextModelSession(self)

    def _distribution(self, key) -> np.ndarray:
        # Laplace add-1 posterior; unseen contexts fall back to uniform.
        probs = np.ones(self.nc, dtype=np.float64)
        total = self.totals.get(key, 0)
        if total:
            for code, count in self.counts[key].items():
                probs[code] += count
        probs /= total + self.nc
        return floor_distribution(probs)

    def _config_dict(self) -> dict:
        return {
            "codebook_size": self.cfg.codebook_size,
            "n_coarse": self.cfg.n_coarse,
            "n_fine": self.cfg.n_fine,
            "embed_dim": self.cfg.embed_dim,
            "order": self.order,
        }

    def _param_blob(self) -> bytes:
        parts = [struct.pack("<Q", len(self.counts))]
        for key in sorted(self.counts, key=lambda k: (k[0], len(k[1]), k[1])):
            layer, ctx = key
            table = self.counts[key]
            parts.append(struct.pack("<HB", layer, len(ctx)))
            parts.append(struct.pack(f"<{len(ctx)}I", *ctx) if ctx else b"")
            parts.append(struct.pack("<I", len(table)))
            for code in sorted(table):
                parts.append(struct.pack("<IQ", code, table[code]))
        return b"".join(parts)


@register_kind("context-model")
def _load(role: str, config: dict, blob: bytes) -> ContextModel:
    cfg = CodecConfig(
        codebook_size=config["codebook_size"],
        n_coarse=config["n_coarse"],
        n_fine=config["n_fine"],
        embed_dim=config["embed_dim"],
    )
    counts: dict = {}
    totals: dict = {}
    (n_entries,) = struct.unpack_from("<Q", blob, 0)
    off = 8
    for _ in range(n_entries):
        layer, ctx_len = struct.unpack_from("<HB", blob, off)
        off += 3
        ctx = struct.unpack_from(f"<{ctx_len}I", blob, off) if ctx_len else ()
        off += 4 * ctx_len
        (n_codes,) = struct.unpack_from("<I", blob, off)
        off += 4
        table = {}
        total = 0
        for _ in range(n_codes):
            code, count = struct.unpack_from("<IQ", blob, off)
            off += 12
            table[code] = count
            total += count
        key = (layer, tuple(int(c) for c in ctx))
        counts[key] = table
        totals[key] = total
    return ContextModel(role, cfg, config["order"], counts, totals)


def train_context_model(grids, role: str, order: int = DEFAULT_ORDER,
                        cfg: CodecConfig | None = None) -> ContextModel:
    """Count (layer, recent-symbols) -> next-code statistics over grids.

    The window covers the last ``order`` symbols of the role's
    flattening; shorter windows near the stream start are distinct
    contexts of their own.  Deterministic.
    """
    grids = list(grids)
    if not grids:
        raise InsufficientData("no training grids supplied")
    if cfg is None:
        cfg = grids[0].config
    counts: dict = {}
    totals: dict = {}
    model = ContextModel(role, cfg, order, counts, totals)
    for grid in grids:
        _check_grid_role(model, grid)
        window: deque[int] = deque(maxlen=order)
        layout = role_layout(grid.n_frames, cfg, role)
        for frame, layer in layout:
            code = int(grid.codes[frame, layer - 1])
            if model.predicts(int(layer)):
                key = (int(layer), tuple(window))
                table = counts.get(key)
                if table is None:
                    counts[key] = {code: 1}
                    totals[key] = 1
                else:
                    table[code] = table.get(code, 0) + 1
                    totals[key] += 1
            window.append(code)
    model._model_id = None
    return model
