"""Analysis/synthesis frontend: PCM waveforms to frame embeddings and back.

The transform is a lapped orthogonal MDCT with a sine window of length
2*hop, so 16 kHz audio at hop 320 yields 50 frames per second with 320
coefficients per frame.  Windowed overlap-add inverts it exactly on the
interior of the stream; the first and last half-window suffer the usual
lapped-transform boundary attenuation.  Each analysis frame depends only
on samples up to its window end, so the frontend is causal with one hop
of lookahead.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, InvalidSample, ShapeError, UnsupportedFormat

DEFAULT_SAMPLE_RATE = 16000
DEFAULT_HOP = 320


@dataclass(frozen=True)
class FrontendConfig:
    """Frame geometry of the analysis transform.

    The window is always two hops long and the transform emits one
    coefficient per hop sample, so ``embed_dim`` must equal ``hop`` for
    the transform to stay invertible.
    """

    hop: int = DEFAULT_HOP
    embed_dim: int = DEFAULT_HOP
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self) -> None:
        if self.hop <= 0:
            raise ValueError(f"hop must be positive, got {self.hop}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.embed_dim != self.hop:
            raise ValueError(
                f"embed_dim must equal hop for the lapped transform "
                f"(got embed_dim={self.embed_dim}, hop={self.hop})"
            )

    @property
    def window(self) -> int:
        return 2 * self.hop

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop


@dataclass
class Waveform:
    """Mono waveform with samples clamped to [-1, 1].

    Out-of-range samples are clamped on construction (never rescaled);
    non-finite samples are rejected.
    """

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self) -> None:
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 1:
            raise ShapeError(f"waveform must be 1-D, got shape {arr.shape}")
        if arr.size and not np.isfinite(arr).all():
            raise InvalidSample("waveform contains NaN or infinite samples")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.samples = np.clip(arr, -1.0, 1.0)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class EmbeddingSequence:
    """Per-frame transform coefficients: a (frames, embed_dim) matrix."""

    frames: np.ndarray
    config: FrontendConfig = field(default_factory=FrontendConfig)

    def __post_init__(self) -> None:
        arr = np.asarray(self.frames, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"embeddings must be 2-D, got shape {arr.shape}")
        if arr.shape[1] != self.config.embed_dim:
            raise ShapeError(
                f"embedding dim {arr.shape[1]} != configured {self.config.embed_dim}"
            )
        if arr.size and not np.isfinite(arr).all():
            raise InvalidSample("embeddings contain NaN or infinite values")
        self.frames = arr

    def __len__(self) -> int:
        return self.frames.shape[0]


_BASIS_CACHE: dict[int, np.ndarray] = {}


def _basis(hop: int) -> np.ndarray:
    """(window, hop) orthogonal MDCT basis with the sine window folded in."""
    cached = _BASIS_CACHE.get(hop)
    if cached is not None:
        return cached
    n = np.arange(2 * hop, dtype=np.float64)[:, None]
    k = np.arange(hop, dtype=np.float64)[None, :]
    window = np.sin(np.pi * (n + 0.5) / (2 * hop))
    basis = np.sqrt(2.0 / hop) * window * np.cos(
        np.pi / hop * (n + 0.5 + hop / 2.0) * (k + 0.5)
    )
    _BASIS_CACHE[hop] = basis
    return basis


def frame_count(n_samples: int, hop: int) -> int:
    """Frames produced for a signal of ``n_samples``: floor(n / hop)."""
    return n_samples // hop


def analyze_frame(window_samples: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    """Transform one window (2*hop samples) into one embedding row.

    This is the single kernel used by both the whole-file and the
    streaming paths, so their outputs are bit-identical.
    """
    if window_samples.shape != (cfg.window,):
        raise ShapeError(
            f"expected window of {cfg.window} samples, got {window_samples.shape}"
        )
    return window_samples @ _basis(cfg.hop)


def synthesize_frame(coeffs: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    """Inverse-transform one embedding row into one windowed chunk (2*hop)."""
    if coeffs.shape != (cfg.embed_dim,):
        raise ShapeError(f"expected {cfg.embed_dim} coefficients, got {coeffs.shape}")
    return coeffs @ _basis(cfg.hop).T


def analyze(w: Waveform, cfg: FrontendConfig | None = None) -> EmbeddingSequence:
    """Split a waveform into lapped frames and transform each one.

    The stream is zero-padded by one hop on the left so frame i covers
    samples [(i-1)*hop, (i+1)*hop); exactly floor(len / hop) frames come
    out.
    """
    cfg = cfg or FrontendConfig()
    if w.sample_rate != cfg.sample_rate:
        raise UnsupportedFormat(
            f"waveform rate {w.sample_rate} != configured {cfg.sample_rate}"
        )
    samples = w.samples
    if samples.size == 0:
        raise EmptyInput("cannot analyze an empty waveform")
    n_frames = frame_count(samples.size, cfg.hop)
    padded = np.concatenate([np.zeros(cfg.hop), samples])
    frames = np.empty((n_frames, cfg.embed_dim))
    for i in range(n_frames):
        frames[i] = analyze_frame(padded[i * cfg.hop : i * cfg.hop + cfg.window], cfg)
    return EmbeddingSequence(frames, cfg)


def synthesize(e: EmbeddingSequence) -> Waveform:
    """Overlap-add inverse of :func:`analyze`.

    Produces frames * hop samples.  Interior samples (everything except
    the first and last hop) reconstruct the analyzed signal exactly up
    to float rounding.
    """
    cfg = e.config
    n_frames = len(e)
    out = np.zeros(n_frames * cfg.hop + cfg.hop)
    for i in range(n_frames):
        out[i * cfg.hop : i * cfg.hop + cfg.window] += synthesize_frame(e.frames[i], cfg)
    return Waveform(out[cfg.hop : cfg.hop + n_frames * cfg.hop], cfg.sample_rate)


def read_wav(path) -> Waveform:
    """Read mono 16-bit 16 kHz PCM WAV; anything else is rejected."""
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise UnsupportedFormat(f"{path}: expected mono, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise UnsupportedFormat(f"{path}: expected 16-bit PCM, got {8 * fh.getsampwidth()}-bit")
        if fh.getframerate() != DEFAULT_SAMPLE_RATE:
            raise UnsupportedFormat(
                f"{path}: expected {DEFAULT_SAMPLE_RATE} Hz, got {fh.getframerate()} Hz"
            )
        raw = fh.readframes(fh.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, DEFAULT_SAMPLE_RATE)


def write_wav(path, w: Waveform) -> None:
    """Write a waveform as mono 16-bit PCM at its sample rate."""
    pcm = np.floor(np.clip(w.samples, -1.0, 1.0) * 32767.0 + 0.5).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())
