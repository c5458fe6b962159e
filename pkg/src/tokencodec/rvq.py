"""Residual vector quantizer: codebook fitting, encoding, decoding.

Each layer quantizes the residual left by the layers above it, so codes
form a coarse-to-fine hierarchy and any prefix of a code vector is a
valid lower-rate description.  Codebooks are fit offline with residual
k-means (k-means++ seeding, fixed iteration cap) and are immutable
afterwards.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import CorruptStream, InsufficientData, InvalidCode, ShapeError

KMEANS_MAX_ITER = 50
KMEANS_REL_SHIFT_STOP = 1e-4

_CODEBOOK_MAGIC = b"TCQ1"
_CODEBOOK_VERSION = 1


@dataclass(frozen=True)
class CodecConfig:
    """Token-grid geometry: codebook size and layer split.

    ``n_coarse`` layers are transmitted; ``n_fine`` layers are synthesized
    at the receiver.  ``codebook_size`` must stay below 2**16 so per-symbol
    probability floors and frequency tables are representable.
    """

    codebook_size: int = 1024
    n_coarse: int = 4
    n_fine: int = 8
    embed_dim: int = 320

    def __post_init__(self) -> None:
        if self.codebook_size < 2 or self.codebook_size >= 1 << 16:
            raise ValueError(f"codebook_size must be in [2, 65535], got {self.codebook_size}")
        if self.n_coarse < 1:
            raise ValueError(f"n_coarse must be >= 1, got {self.n_coarse}")
        if self.n_fine < 0:
            raise ValueError(f"n_fine must be >= 0, got {self.n_fine}")
        if self.embed_dim < 1:
            raise ValueError(f"embed_dim must be >= 1, got {self.embed_dim}")

    @property
    def n_layers(self) -> int:
        return self.n_coarse + self.n_fine

    @property
    def bits_per_code(self) -> int:
        return int(np.ceil(np.log2(self.codebook_size)))


@dataclass
class Codebooks:
    """One (codebook_size, embed_dim) float32 table per quantizer layer."""

    layers: list[np.ndarray]
    layer_rmse: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.layers:
            raise ShapeError("codebooks need at least one layer")
        shape = self.layers[0].shape
        for i, table in enumerate(self.layers):
            table = np.ascontiguousarray(table, dtype=np.float32)
            if table.ndim != 2 or table.shape != shape:
                raise ShapeError(f"layer {i} table shape {table.shape} != {shape}")
            if not np.isfinite(table).all():
                raise ShapeError(f"layer {i} table contains non-finite entries")
            self.layers[i] = table

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def codebook_size(self) -> int:
        return self.layers[0].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.layers[0].shape[1]


@dataclass
class TokenGrid:
    """(frames, layers) integer code matrix plus its configuration.

    A grid may carry only the coarse layers (width n_coarse) or the full
    stack (width n_coarse + n_fine).
    """

    codes: np.ndarray
    config: CodecConfig

    def __post_init__(self) -> None:
        arr = np.asarray(self.codes)
        if arr.ndim != 2:
            raise ShapeError(f"token grid must be 2-D, got shape {arr.shape}")
        if arr.shape[1] not in (self.config.n_coarse, self.config.n_layers):
            raise ShapeError(
                f"grid has {arr.shape[1]} layers; expected {self.config.n_coarse} "
                f"(coarse only) or {self.config.n_layers} (full)"
            )
        if arr.size:
            if arr.min() < 0 or arr.max() >= self.config.codebook_size:
                raise InvalidCode(
                    f"codes must lie in [0, {self.config.codebook_size})"
                )
        self.codes = arr.astype(np.int32)

    @property
    def n_frames(self) -> int:
        return self.codes.shape[0]

    @property
    def n_layers(self) -> int:
        return self.codes.shape[1]

    @property
    def is_coarse_only(self) -> bool:
        return self.codes.shape[1] == self.config.n_coarse

    def coarse_part(self) -> "TokenGrid":
        return TokenGrid(self.codes[:, : self.config.n_coarse].copy(), self.config)


def _nearest(residuals: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Index of the nearest codeword per row, squared Euclidean, lowest
    index on ties.

    Uses ||c||^2 - 2 r.c, which drops the per-row constant ||r||^2; the
    identical expression is used for single vectors and batches so both
    paths agree exactly.
    """
    table64 = table.astype(np.float64)
    scores = np.sum(table64 * table64, axis=1)[None, :] - 2.0 * (residuals @ table64.T)
    return np.argmin(scores, axis=1)


def quantize(v: np.ndarray, cb: Codebooks, n_layers: int | None = None) -> np.ndarray:
    """Greedy residual quantization of one embedding vector.

    Layer l picks the codeword nearest to the residual after layers < l;
    a prefix of the result is always a valid shallower encoding.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (cb.embed_dim,):
        raise ShapeError(f"vector shape {v.shape} != ({cb.embed_dim},)")
    if n_layers is None:
        n_layers = cb.n_layers
    if not 1 <= n_layers <= cb.n_layers:
        raise ShapeError(f"n_layers must be in [1, {cb.n_layers}], got {n_layers}")
    codes = np.empty(n_layers, dtype=np.int32)
    residual = v.copy()
    for layer in range(n_layers):
        idx = int(_nearest(residual[None, :], cb.layers[layer])[0])
        codes[layer] = idx
        residual -= cb.layers[layer][idx].astype(np.float64)
    return codes


def dequantize(codes: Sequence[int] | np.ndarray, cb: Codebooks) -> np.ndarray:
    """Sum of the selected codewords; a prefix of codes is legal."""
    codes = np.asarray(codes, dtype=np.int64).reshape(-1)
    if codes.size > cb.n_layers:
        raise InvalidCode(f"{codes.size} codes for {cb.n_layers} layers")
    out = np.zeros(cb.embed_dim, dtype=np.float64)
    for layer, code in enumerate(codes):
        if not 0 <= code < cb.codebook_size:
            raise InvalidCode(f"code {code} at layer {layer} out of range")
        out += cb.layers[layer][code].astype(np.float64)
    return out


def quantize_grid(e, cb: Codebooks, cfg: CodecConfig, n_layers: int | None = None) -> TokenGrid:
    """Quantize every frame of an embedding sequence into a token grid."""
    frames = np.asarray(e.frames if hasattr(e, "frames") else e, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != cb.embed_dim:
        raise ShapeError(f"frames shape {frames.shape} incompatible with dim {cb.embed_dim}")
    if n_layers is None:
        n_layers = cfg.n_layers
    codes = np.empty((frames.shape[0], n_layers), dtype=np.int32)
    for t in range(frames.shape[0]):
        codes[t] = quantize(frames[t], cb, n_layers)
    return TokenGrid(codes, cfg)


def dequantize_grid(g: TokenGrid, cb: Codebooks) -> np.ndarray:
    """Per-frame dequantization back to a (frames, embed_dim) matrix."""
    out = np.empty((g.n_frames, cb.embed_dim), dtype=np.float64)
    for t in range(g.n_frames):
        out[t] = dequantize(g.codes[t], cb)
    return out


def _kmeans_pp_seed(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ centers; falls back to ascending unchosen indices once
    all remaining points coincide with a chosen center."""
    n = data.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    d2 = np.sum((data - data[chosen[0]]) ** 2, axis=1)
    taken = np.zeros(n, dtype=bool)
    taken[chosen[0]] = True
    for i in range(1, k):
        total = d2.sum()
        if total > 0.0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(np.flatnonzero(~taken)[0])
        chosen[i] = idx
        taken[idx] = True
        d2 = np.minimum(d2, np.sum((data - data[idx]) ** 2, axis=1))
    return data[chosen].copy()


def _kmeans(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Lloyd iterations with deterministic empty-cluster reseeding."""
    centers = _kmeans_pp_seed(data, k, rng)
    sq = np.sum(data * data, axis=1)
    for _ in range(KMEANS_MAX_ITER):
        scores = np.sum(centers * centers, axis=1)[None, :] - 2.0 * (data @ centers.T)
        assign = np.argmin(scores, axis=1)
        dist = sq + scores[np.arange(data.shape[0]), assign]
        new_centers = np.zeros_like(centers)
        counts = np.bincount(assign, minlength=k).astype(np.float64)
        np.add.at(new_centers, assign, data)
        nonempty = counts > 0
        new_centers[nonempty] /= counts[nonempty, None]
        # Empty clusters restart from the currently worst-covered point.
        for dead in np.flatnonzero(~nonempty):
            far = int(np.argmax(dist))
            new_centers[dead] = data[far]
            dist[far] = -1.0
        shift = np.linalg.norm(new_centers - centers)
        scale = np.linalg.norm(centers)
        centers = new_centers
        if shift <= KMEANS_REL_SHIFT_STOP * max(scale, 1e-12):
            break
    return centers


def fit_codebooks(
    embeddings: Iterable, cfg: CodecConfig, seed: int
) -> Codebooks:
    """Fit per-layer codebooks by k-means on successive residuals.

    Layer l is fit on the residuals left after greedy quantization
    through layers < l.  Deterministic for a fixed seed.
    """
    mats = []
    for e in embeddings:
        mats.append(np.asarray(e.frames if hasattr(e, "frames") else e, dtype=np.float64))
    if not mats:
        raise InsufficientData("no training embeddings supplied")
    data = np.vstack(mats)
    if data.shape[1] != cfg.embed_dim:
        raise ShapeError(f"training dim {data.shape[1]} != configured {cfg.embed_dim}")
    if data.shape[0] < cfg.codebook_size:
        raise InsufficientData(
            f"need at least {cfg.codebook_size} vectors, got {data.shape[0]}"
        )
    rng = np.random.default_rng(seed)
    residual = data.copy()
    layers = []
    layer_rmse = []
    for layer in range(cfg.n_layers):
        centers = _kmeans(residual, cfg.codebook_size, rng)
        if layer > 0:
            # Pin an exact-zero codeword below the first layer so a deeper
            # quantization can never be worse than stopping early: the
            # refinement error is then non-increasing for every input.
            centers[int(np.argmin(np.sum(centers * centers, axis=1)))] = 0.0
        table = centers.astype(np.float32)
        layers.append(table)
        idx = _nearest(residual, table)
        residual = residual - table.astype(np.float64)[idx]
        layer_rmse.append(float(np.sqrt(np.mean(residual * residual))))
    return Codebooks(layers, layer_rmse)


def save_codebooks(path, cb: Codebooks) -> None:
    """Write the binary codebook container (magic TCQ1, CRC32 trailer)."""
    head = _CODEBOOK_MAGIC + struct.pack(
        "<HIHH", _CODEBOOK_VERSION, cb.codebook_size, cb.n_layers, cb.embed_dim
    )
    body = b"".join(
        table.astype("<f4").tobytes(order="C") for table in cb.layers
    )
    payload = head + body
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_codebooks(path) -> Codebooks:
    """Read and verify a TCQ1 codebook container."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 18 or blob[:4] != _CODEBOOK_MAGIC:
        raise CorruptStream(f"{path}: not a codebook file")
    payload, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CorruptStream(f"{path}: checksum mismatch")
    version, size, n_layers, dim = struct.unpack("<HIHH", payload[4:14])
    if version != _CODEBOOK_VERSION:
        raise CorruptStream(f"{path}: unsupported codebook version {version}")
    expected = 14 + 4 * size * n_layers * dim
    if len(payload) != expected:
        raise CorruptStream(f"{path}: truncated codebook payload")
    flat = np.frombuffer(payload[14:], dtype="<f4")
    layers = [
        flat[i * size * dim : (i + 1) * size * dim].reshape(size, dim).copy()
        for i in range(n_layers)
    ]
    return Codebooks(layers)
