"""Voice-activity gating and rate reporting.

Voice activity is estimated from per-10 ms RMS energy through a
logistic curve (a deliberately simple stand-in for a learned detector);
a 20 ms codec frame is voiced when both of its 10 ms windows clear the
probability threshold.  Reports aggregate per-step model entropy,
realized Huffman bits, realized range bits, and the raw (uncoded) rate,
plus the two gated-transmission scenarios: (i) transmitting only the
voiced frames, and (ii) transmitting everything but charging zero bits
for unvoiced frames.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .entropy import MODE_RANGE, encode_stream, entropy_bits, score_stream
from .errors import ShapeError
from .frontend import Waveform
from .probmodel.base import TokenModel, accuracy
from .probmodel.flatten import coarse_layout, flatten_coarse, role_layout
from .rvq import TokenGrid

VAD_WINDOW_SECONDS = 0.01
DEFAULT_THRESHOLD_DB = -40.0
DEFAULT_SLOPE_DB = 5.0
VOICE_PROB_THRESHOLD = 0.8
SILENCE_FLOOR_DB = -120.0


@dataclass
class VadTrack:
    """Per-10 ms voice probabilities and the derived per-frame flags."""

    probs_10ms: np.ndarray
    voiced_20ms: np.ndarray

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs_10ms, dtype=np.float64)
        voiced = np.asarray(self.voiced_20ms, dtype=bool)
        if probs.size and (probs.min() < 0.0 or probs.max() > 1.0):
            raise ShapeError("voice probabilities must lie in [0, 1]")
        if voiced.size != probs.size // 2:
            raise ShapeError(
                f"{voiced.size} frame flags for {probs.size} probability windows"
            )
        self.probs_10ms = probs
        self.voiced_20ms = voiced


def vad_probs(
    w: Waveform,
    threshold_db: float = DEFAULT_THRESHOLD_DB,
    slope_db: float = DEFAULT_SLOPE_DB,
) -> np.ndarray:
    """Per-10 ms voice probability: logistic((rms_dBFS - threshold)/slope)."""
    window = int(round(w.sample_rate * VAD_WINDOW_SECONDS))
    n = w.samples.size // window
    out = np.empty(n)
    for i in range(n):
        chunk = w.samples[i * window : (i + 1) * window]
        rms = np.sqrt(np.mean(chunk * chunk))
        db = 20.0 * np.log10(rms) if rms > 0.0 else SILENCE_FLOOR_DB
        db = max(db, SILENCE_FLOOR_DB)
        out[i] = 1.0 / (1.0 + np.exp(-(db - threshold_db) / slope_db))
    return out


def frame_voicing(
    probs: np.ndarray,
    threshold: float = VOICE_PROB_THRESHOLD,
    rule: str = "min",
) -> np.ndarray:
    """Collapse 10 ms probabilities into per-20 ms voiced flags.

    ``min`` (default) requires both windows strictly above the
    threshold; ``mean`` compares their average instead.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.size // 2
    pairs = probs[: 2 * n].reshape(n, 2)
    if rule == "min":
        return pairs.min(axis=1) > threshold
    if rule == "mean":
        return pairs.mean(axis=1) > threshold
    raise ValueError(f"unknown voicing rule {rule!r}")


def vad_track(
    w: Waveform,
    threshold_db: float = DEFAULT_THRESHOLD_DB,
    slope_db: float = DEFAULT_SLOPE_DB,
    prob_threshold: float = VOICE_PROB_THRESHOLD,
    rule: str = "min",
) -> VadTrack:
    probs = vad_probs(w, threshold_db, slope_db)
    return VadTrack(probs, frame_voicing(probs, prob_threshold, rule))


@dataclass
class RateReport:
    """One row of codec rate accounting.

    The VAD scenario fields are None unless the report was gated:
    ``voiced_only_*`` divides the voiced frames' bits by the voiced
    duration; ``zero_nonvoice_*`` divides the same class of bits,
    recomputed with full context, by the total duration.
    """

    n_coarse: int
    n_fine: int
    frames: int
    duration_s: float
    entropy_bps: float
    huffman_bps: float
    raw_bps: float
    range_bps: float | None = None
    accuracy_coarse: float | None = None
    accuracy_fine: float | None = None
    voiced_frames: int | None = None
    voiced_only_entropy_bps: float | None = None
    voiced_only_huffman_bps: float | None = None
    zero_nonvoice_entropy_bps: float | None = None
    zero_nonvoice_huffman_bps: float | None = None


CSV_COLUMNS = [
    "n_coarse", "n_fine", "frames", "duration_s",
    "accuracy_coarse", "accuracy_fine",
    "entropy_bps", "huffman_bps", "range_bps", "raw_bps",
    "voiced_frames",
    "voiced_only_entropy_bps", "voiced_only_huffman_bps",
    "zero_nonvoice_entropy_bps", "zero_nonvoice_huffman_bps",
]


def raw_bps(n_coarse: int, bits_per_code: int, frame_rate: float) -> float:
    """Uncoded rate of the transmitted layers."""
    return n_coarse * frame_rate * bits_per_code


def rate_report(
    grids,
    coarse_model: TokenModel,
    fine_model: TokenModel | None = None,
    *,
    sample_rate: int = 16000,
    hop: int = 320,
    with_range: bool = True,
    with_accuracy: bool = True,
) -> RateReport:
    """Aggregate rate columns over a corpus of token grids."""
    grids = list(grids)
    if not grids:
        raise ShapeError("no grids to report on")
    cfg = grids[0].config
    frame_rate = sample_rate / hop
    total_frames = 0
    ent_bits = 0.0
    huff_bits = 0.0
    range_bits = 0
    for grid in grids:
        symbols = flatten_coarse(grid)
        layout = coarse_layout(grid.n_frames, cfg.n_coarse)
        h_model, h_huff, _ = score_stream(coarse_model, symbols, layout)
        ent_bits += float(h_model.sum())
        huff_bits += float(h_huff.sum())
        if with_range:
            range_bits += encode_stream(
                symbols, coarse_model, layout, MODE_RANGE,
                sample_rate=sample_rate, hop=hop,
            ).payload_bits
        total_frames += grid.n_frames
    duration = total_frames / frame_rate
    return RateReport(
        n_coarse=cfg.n_coarse,
        n_fine=cfg.n_fine,
        frames=total_frames,
        duration_s=duration,
        entropy_bps=ent_bits / duration,
        huffman_bps=huff_bits / duration,
        range_bps=range_bits / duration if with_range else None,
        raw_bps=raw_bps(cfg.n_coarse, cfg.bits_per_code, frame_rate),
        accuracy_coarse=accuracy(coarse_model, grids) if with_accuracy else None,
        accuracy_fine=(
            accuracy(fine_model, grids)
            if with_accuracy and fine_model is not None
            else None
        ),
    )


def vad_rate_report(
    g: TokenGrid,
    coarse_model: TokenModel,
    vad: VadTrack,
    *,
    sample_rate: int = 16000,
    hop: int = 320,
) -> RateReport:
    """Rate report for one grid under the two gated scenarios.

    Scenario (i) codes only the voiced frames: the receiver never sees
    unvoiced frames, so the model context is the compacted voiced
    stream.  Scenario (ii) codes the full stream but counts zero bits
    for unvoiced frames, against the total duration.  With no voiced
    frames the scenario rates are defined as 0.
    """
    voiced = np.asarray(vad.voiced_20ms, dtype=bool)
    if voiced.size != g.n_frames:
        raise ShapeError(f"{voiced.size} VAD flags for {g.n_frames} frames")
    cfg = g.config
    frame_rate = sample_rate / hop
    frame_seconds = 1.0 / frame_rate
    n_voiced = int(voiced.sum())

    # Ungated columns, full stream.
    symbols = flatten_coarse(g)
    layout = coarse_layout(g.n_frames, cfg.n_coarse)
    h_model, h_huff, _ = score_stream(coarse_model, symbols, layout)
    duration = g.n_frames * frame_seconds

    # Scenario (i): compacted voiced-only stream.
    voiced_grid = TokenGrid(g.codes[voiced][:, : cfg.n_coarse], cfg)
    if n_voiced:
        vi_model, vi_huff, _ = score_stream(
            coarse_model,
            flatten_coarse(voiced_grid),
            coarse_layout(n_voiced, cfg.n_coarse),
        )
        voiced_duration = n_voiced * frame_seconds
        scenario_i_entropy = float(vi_model.sum()) / voiced_duration
        scenario_i_huffman = float(vi_huff.sum()) / voiced_duration
    else:
        scenario_i_entropy = 0.0
        scenario_i_huffman = 0.0

    # Scenario (ii): full context, voiced frames' bits over total time.
    frame_of_position = layout[:, 0]
    voiced_positions = voiced[frame_of_position]
    scenario_ii_entropy = float(h_model[voiced_positions].sum()) / duration
    scenario_ii_huffman = float(h_huff[voiced_positions].sum()) / duration

    return RateReport(
        n_coarse=cfg.n_coarse,
        n_fine=cfg.n_fine,
        frames=g.n_frames,
        duration_s=duration,
        entropy_bps=float(h_model.sum()) / duration,
        huffman_bps=float(h_huff.sum()) / duration,
        range_bps=None,
        raw_bps=raw_bps(cfg.n_coarse, cfg.bits_per_code, frame_rate),
        voiced_frames=n_voiced,
        voiced_only_entropy_bps=scenario_i_entropy,
        voiced_only_huffman_bps=scenario_i_huffman,
        zero_nonvoice_entropy_bps=scenario_ii_entropy,
        zero_nonvoice_huffman_bps=scenario_ii_huffman,
    )


def confidence_profile(model: TokenModel, g: TokenGrid, vad: VadTrack | None = None):
    """Per-frame mean entropy of the model's next-code distributions.

    Returns (frame_index, mean_entropy_bits, voiced_flag) rows; without
    a VAD track every frame is flagged voiced.
    """
    layout = role_layout(g.n_frames, g.config, model.role)
    session = model.session()
    sums = np.zeros(g.n_frames)
    counts = np.zeros(g.n_frames, dtype=np.int64)
    for frame, layer in layout:
        code = int(g.codes[frame, layer - 1])
        if model.predicts(int(layer)):
            probs = session.predict(int(frame), int(layer))
            sums[frame] += entropy_bits(probs)
            counts[frame] += 1
        session.push(int(frame), int(layer), code)
    voiced = (
        np.asarray(vad.voiced_20ms, dtype=bool)
        if vad is not None
        else np.ones(g.n_frames, dtype=bool)
    )
    if voiced.size != g.n_frames:
        raise ShapeError(f"{voiced.size} VAD flags for {g.n_frames} frames")
    return [
        (int(n), float(sums[n] / max(counts[n], 1)), int(voiced[n]))
        for n in range(g.n_frames)
    ]


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def report_csv(reports) -> str:
    """Deterministic CSV rendering of report rows."""
    lines = [",".join(CSV_COLUMNS)]
    for report in reports:
        row = asdict(report)
        lines.append(",".join(_format_cell(row[c]) for c in CSV_COLUMNS))
    return "\n".join(lines) + "\n"


def report_json(reports) -> str:
    return json.dumps([asdict(r) for r in reports], indent=2, sort_keys=True) + "\n"


def confidence_csv(rows) -> str:
    lines = ["frame_index,mean_entropy_bits,voiced_flag"]
    for frame, entropy, voiced in rows:
        lines.append(f"{frame},{entropy:.6f},{voiced}")
    return "\n".join(lines) + "\n"
