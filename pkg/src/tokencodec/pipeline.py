"""End-to-end sender and receiver.

The sender analyzes audio, quantizes each frame's coarse codes, and
entropy-codes them under the coarse model.  The receiver reconstructs
the coarse codes losslessly, synthesizes fine codes frame by frame with
the fine model, and inverts the quantizer and transform.  Both sides
run frame-synchronously: the whole-file calls wrap the streaming
sessions, so outputs are identical either way.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .entropy import (
    Bitstream,
    MODE_RANGE,
    SymbolDecoder,
    SymbolEncoder,
    ZERO_MODEL_ID,
)
from .errors import ContextError, ModelMismatch, ShapeError
from .frontend import FrontendConfig, Waveform, analyze_frame, synthesize_frame
from .probmodel.base import TokenModel
from .probmodel.flatten import ROLE_COARSE, ROLE_FINE
from .rvq import Codebooks, CodecConfig, TokenGrid, dequantize, quantize


@dataclass(frozen=True)
class SamplerConfig:
    """How the receiver draws fine tokens from the fine model."""

    strategy: str = "temperature"      # greedy | temperature | topk
    temperature: float = 1.0
    k: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.strategy not in ("greedy", "temperature", "topk"):
            raise ValueError(f"unknown sampler strategy {self.strategy!r}")
        if not (np.isfinite(self.temperature) and self.temperature > 0):
            raise ValueError(f"temperature must be positive and finite")
        if self.k < 1:
            raise ValueError(f"top-k needs k >= 1, got {self.k}")


def _sample_code(probs: np.ndarray, sampler: SamplerConfig, rng: np.random.Generator) -> int:
    if sampler.strategy == "greedy":
        return int(np.argmax(probs))
    if sampler.strategy == "topk":
        if sampler.k > probs.size:
            raise ValueError(f"k={sampler.k} exceeds alphabet of {probs.size}")
        keep = np.argsort(-probs, kind="stable")[: sampler.k]
        p = probs[keep]
        p = p / p.sum()
        return int(keep[np.searchsorted(np.cumsum(p), rng.random(), side="right")])
    p = probs ** (1.0 / sampler.temperature)
    p = p / p.sum()
    idx = np.searchsorted(np.cumsum(p), rng.random(), side="right")
    return int(min(idx, probs.size - 1))


def _check_codebooks(cb: Codebooks, cfg: CodecConfig, need_layers: int) -> None:
    if cb.embed_dim != cfg.embed_dim:
        raise ShapeError(f"codebook dim {cb.embed_dim} != config {cfg.embed_dim}")
    if cb.codebook_size != cfg.codebook_size:
        raise ShapeError(
            f"codebook size {cb.codebook_size} != config {cfg.codebook_size}"
        )
    if cb.n_layers < need_layers:
        raise ShapeError(f"codebooks have {cb.n_layers} layers, need {need_layers}")


class StreamEncoder:
    """Push-samples sender: emits coarse symbols as soon as each frame's
    window is complete (one hop of lookahead)."""

    def __init__(
        self,
        cb: Codebooks,
        coarse_model: TokenModel,
        mode: str = MODE_RANGE,
        *,
        sample_rate: int = 16000,
        fine_model_id: bytes = ZERO_MODEL_ID,
        cache: bool = True,
    ):
        if coarse_model.role != ROLE_COARSE:
            raise ContextError("encoder needs the coarse-role model")
        cfg = coarse_model.cfg
        _check_codebooks(cb, cfg, cfg.n_coarse)
        self.cfg = cfg
        self._cb = cb
        self._frontend = FrontendConfig(
            hop=cfg.embed_dim, embed_dim=cfg.embed_dim, sample_rate=sample_rate
        )
        self._symbols = SymbolEncoder(coarse_model, mode, cache=cache)
        self._sample_rate = sample_rate
        self._fine_model_id = fine_model_id
        self._prev_hop = np.zeros(cfg.embed_dim)
        self._pending = np.empty(0)
        self._rows: list[np.ndarray] = []

    def push_samples(self, samples: np.ndarray) -> int:
        """Feed PCM samples; returns the number of frames completed."""
        hop = self._frontend.hop
        buf = np.concatenate([self._pending, np.asarray(samples, dtype=np.float64)])
        done = 0
        while buf.size >= hop:
            chunk, buf = buf[:hop], buf[hop:]
            window = np.concatenate([self._prev_hop, np.clip(chunk, -1.0, 1.0)])
            coeffs = analyze_frame(window, self._frontend)
            codes = quantize(coeffs, self._cb, self.cfg.n_coarse)
            for code in codes:
                self._symbols.push(int(code))
            self._rows.append(codes)
            self._prev_hop = window[hop:]
            done += 1
        self._pending = buf
        return done

    def finish(self) -> tuple[TokenGrid, Bitstream]:
        """Flush the coder; trailing samples short of a hop are dropped."""
        codes = (
            np.stack(self._rows)
            if self._rows
            else np.empty((0, self.cfg.n_coarse), dtype=np.int32)
        )
        grid = TokenGrid(codes, self.cfg)
        bitstream = self._symbols.finish(
            sample_rate=self._sample_rate,
            hop=self._frontend.hop,
            fine_model_id=self._fine_model_id,
        )
        return grid, bitstream


class StreamDecoder:
    """Frame-by-frame receiver.

    Each :meth:`next_frame` decodes one frame's coarse codes, samples
    its fine codes, and returns the hop of output samples that just
    became final (one frame of latency; the first call returns an empty
    chunk and :meth:`flush` returns the last one).
    """

    def __init__(
        self,
        b: Bitstream,
        cb: Codebooks,
        coarse_model: TokenModel,
        fine_model: TokenModel | None = None,
        sampler: SamplerConfig | None = None,
        *,
        cache: bool = True,
    ):
        self._b = b
        self._symbols = SymbolDecoder(b, coarse_model, cache=cache)
        cfg = coarse_model.cfg
        if fine_model is not None:
            if fine_model.role != ROLE_FINE:
                raise ContextError("fine synthesis needs the fine-role model")
            if b.fine_model_id != ZERO_MODEL_ID and b.fine_model_id != fine_model.model_id:
                raise ModelMismatch(
                    f"bitstream fine model {b.fine_model_id.hex()} != supplied "
                    f"{fine_model.model_id.hex()}"
                )
            if (
                fine_model.nc != cfg.codebook_size
                or fine_model.cfg.n_coarse != cfg.n_coarse
            ):
                raise ModelMismatch("fine model geometry differs from the coarse model's")
            if fine_model.cfg.n_fine != b.n_fine:
                raise ModelMismatch(
                    f"fine model synthesizes {fine_model.cfg.n_fine} layers, "
                    f"stream declares {b.n_fine}"
                )
        # Without a fine model the decoder reconstructs from the coarse
        # prefix alone (degraded mode).
        self._fine_model = fine_model if b.n_fine > 0 else None
        self._n_fine = b.n_fine if self._fine_model is not None else 0
        self.cfg = CodecConfig(
            codebook_size=cfg.codebook_size,
            n_coarse=cfg.n_coarse,
            n_fine=b.n_fine,
            embed_dim=cfg.embed_dim,
        )
        _check_codebooks(cb, cfg, cfg.n_coarse + self._n_fine)
        if b.hop != cfg.embed_dim:
            raise ShapeError(f"stream hop {b.hop} != codec frame size {cfg.embed_dim}")
        self._cb = cb
        self._frontend = FrontendConfig(
            hop=b.hop, embed_dim=cfg.embed_dim, sample_rate=b.sample_rate
        )
        sampler = sampler or SamplerConfig()
        self._sampler = sampler
        self._rng = np.random.default_rng(sampler.seed)
        self._fine_session = self._fine_model.session() if self._fine_model else None
        self._frame_index = 0
        self._pending: np.ndarray | None = None
        self._rows: list[np.ndarray] = []

    @property
    def frames_remaining(self) -> int:
        return self._b.frame_count - self._frame_index

    def next_frame(self) -> tuple[np.ndarray, np.ndarray]:
        """Decode one frame; returns (codes_row, finalized_samples)."""
        if self.frames_remaining <= 0:
            raise ShapeError("stream fully decoded")
        cfg = self.cfg
        n = self._frame_index
        coarse = np.array(
            [self._symbols.next_symbol() for _ in range(cfg.n_coarse)], dtype=np.int32
        )
        if self._fine_session is not None:
            row = np.empty(cfg.n_coarse + self._n_fine, dtype=np.int32)
            row[: cfg.n_coarse] = coarse
            for layer in range(1, cfg.n_coarse + 1):
                self._fine_session.push(n, layer, int(coarse[layer - 1]))
            for layer in range(cfg.n_coarse + 1, cfg.n_coarse + self._n_fine + 1):
                probs = self._fine_session.predict(n, layer)
                code = _sample_code(probs, self._sampler, self._rng)
                self._fine_session.push(n, layer, code)
                row[layer - 1] = code
        else:
            row = coarse
        self._rows.append(row)
        chunk = synthesize_frame(dequantize(row, self._cb), self._frontend)
        hop = self._frontend.hop
        if self._pending is None:
            out = np.empty(0)
        else:
            out = self._pending + chunk[:hop]
        self._pending = chunk[hop:].copy()
        self._frame_index += 1
        return row, out

    def flush(self) -> np.ndarray:
        """Samples of the final frame region."""
        if self.frames_remaining:
            raise ShapeError(f"{self.frames_remaining} frames still undecoded")
        return np.empty(0) if self._pending is None else self._pending

    def run(self) -> tuple[TokenGrid, Waveform]:
        """Decode everything and assemble the output waveform."""
        chunks = []
        while self.frames_remaining:
            _, out = self.next_frame()
            chunks.append(out)
        chunks.append(self.flush())
        samples = np.concatenate(chunks)
        codes = (
            np.stack(self._rows)
            if self._rows
            else np.empty((0, self.cfg.n_coarse + self._n_fine), dtype=np.int32)
        )
        return TokenGrid(codes, self.cfg), Waveform(samples, self._b.sample_rate)


def encode(
    w: Waveform,
    cb: Codebooks,
    coarse_model: TokenModel,
    mode: str = MODE_RANGE,
    *,
    fine_model_id: bytes = ZERO_MODEL_ID,
    cache: bool = True,
) -> Bitstream:
    """Whole-file sender: audio in, coarse-token bitstream out."""
    session = StreamEncoder(
        cb,
        coarse_model,
        mode,
        sample_rate=w.sample_rate,
        fine_model_id=fine_model_id,
        cache=cache,
    )
    session.push_samples(w.samples)
    _, bitstream = session.finish()
    return bitstream


def decode(
    b: Bitstream,
    cb: Codebooks,
    coarse_model: TokenModel,
    fine_model: TokenModel | None = None,
    sampler: SamplerConfig | None = None,
    *,
    cache: bool = True,
) -> tuple[TokenGrid, Waveform]:
    """Whole-file receiver: bitstream in, (token grid, audio) out.

    The coarse sub-grid always equals the sender's exactly; fine layers
    are sampled from the fine model, or skipped when it is absent.
    """
    return StreamDecoder(b, cb, coarse_model, fine_model, sampler, cache=cache).run()


def sample_fine(
    coarse: TokenGrid,
    fine_model: TokenModel | None = None,
    sampler: SamplerConfig | None = None,
) -> TokenGrid:
    """Fill fine layers autoregressively below a coarse grid.

    Walks the full flattening order frame by frame; coarse entries pass
    through unchanged.  With no fine layers this is the identity and no
    model is needed.
    """
    if (fine_model.cfg if fine_model is not None else coarse.config).n_fine == 0:
        return TokenGrid(coarse.codes.copy(), coarse.config)
    if fine_model is None:
        raise ContextError("fine synthesis needs the fine-role model")
    if fine_model.role != ROLE_FINE:
        raise ContextError("fine synthesis needs the fine-role model")
    cfg = fine_model.cfg
    if coarse.config.codebook_size != cfg.codebook_size or coarse.config.n_coarse != cfg.n_coarse:
        raise ContextError("grid geometry differs from the fine model's")
    sampler = sampler or SamplerConfig()
    rng = np.random.default_rng(sampler.seed)
    session = fine_model.session()
    out = np.empty((coarse.n_frames, cfg.n_layers), dtype=np.int32)
    out[:, : cfg.n_coarse] = coarse.codes[:, : cfg.n_coarse]
    for n in range(coarse.n_frames):
        for layer in range(1, cfg.n_coarse + 1):
            session.push(n, layer, int(out[n, layer - 1]))
        for layer in range(cfg.n_coarse + 1, cfg.n_layers + 1):
            probs = session.predict(n, layer)
            code = _sample_code(probs, sampler, rng)
            session.push(n, layer, code)
            out[n, layer - 1] = code
    return TokenGrid(out, cfg)
