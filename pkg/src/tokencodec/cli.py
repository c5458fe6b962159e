"""Batch command-line driver: fit, train, encode, decode, report.

Config precedence is CLI flags > config file > defaults, the effective
configuration is echoed to stderr as JSON, and all randomness flows
from the single --seed flag.  Exit codes: 0 success, 2 usage/input
error, 3 compatibility error, 4 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .entropy import Bitstream, cross_entropy_bits
from .errors import (
    CodecError,
    CorruptStream,
    EmptyInput,
    InsufficientData,
    InvalidSample,
    ModelMismatch,
    ShapeError,
    UnsupportedFormat,
)
from .frontend import FrontendConfig, analyze, read_wav, write_wav
from .pipeline import SamplerConfig, decode, encode
from .probmodel import (
    ROLE_COARSE,
    ROLE_FINE,
    TransformerConfig,
    coarse_layout,
    flatten_coarse,
    load_model,
    save_model,
    train_context_model,
    train_transformer,
)
from .rvq import CodecConfig, fit_codebooks, load_codebooks, quantize_grid, save_codebooks
from .vad import (
    confidence_csv,
    confidence_profile,
    rate_report,
    report_csv,
    report_json,
    vad_rate_report,
    vad_track,
)

log = logging.getLogger("tokencodec")

EXIT_USAGE = 2
EXIT_COMPAT = 3
EXIT_INTERNAL = 4

DEFAULTS = {
    "codebook_size": 1024,
    "nc": 4,
    "nf": 8,
    "layers": None,
    "embed_dim": 320,
    "mode": "range",
    "sampler": "temperature",
    "temperature": 1.0,
    "topk": 1,
    "seed": 0,
    "order": 4,
    "model_kind": "context",
    "train_steps": 200,
    "train_batch": 8,
    "train_lr": 3e-4,
    "arch_blocks": 2,
    "arch_heads": 4,
    "arch_width": 128,
    "context_cap": 1024,
    "max_frames": 4096,
    "vad_threshold_db": -40.0,
    "vad_slope_db": 5.0,
    "vad_prob_threshold": 0.8,
    "vad_rule": "min",
}


def _resolve_config(args: argparse.Namespace) -> dict:
    """Merge defaults, config file, and explicit CLI flags."""
    cfg = dict(DEFAULTS)
    explicit: set[str] = set()
    if getattr(args, "config", None):
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
        explicit |= set(file_cfg)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
            explicit.add(key)
    if cfg["layers"] is not None:
        if "nf" in explicit and cfg["nc"] + cfg["nf"] != cfg["layers"]:
            raise ValueError(
                f"--layers {cfg['layers']} != --nc {cfg['nc']} + --nf {cfg['nf']}"
            )
        cfg["nf"] = cfg["layers"] - cfg["nc"]
        if cfg["nf"] < 0:
            raise ValueError(f"--layers {cfg['layers']} smaller than --nc {cfg['nc']}")
    cfg["layers"] = cfg["nc"] + cfg["nf"]
    return cfg


def _codec_config(cfg: dict) -> CodecConfig:
    return CodecConfig(
        codebook_size=cfg["codebook_size"],
        n_coarse=cfg["nc"],
        n_fine=cfg["nf"],
        embed_dim=cfg["embed_dim"],
    )


def _sampler_config(cfg: dict) -> SamplerConfig:
    return SamplerConfig(
        strategy={"topk": "topk", "greedy": "greedy", "temperature": "temperature"}[
            cfg["sampler"]
        ],
        temperature=cfg["temperature"],
        k=cfg["topk"],
        seed=cfg["seed"],
    )


def _echo_config(cfg: dict) -> None:
    print(json.dumps({"effective_config": cfg}, sort_keys=True), file=sys.stderr)


def _corpus_paths(directory: str) -> list[Path]:
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"training directory not found: {directory}")
    paths = sorted(root.glob("*.wav"))
    if not paths:
        raise InsufficientData(f"no .wav files in {directory}")
    return paths


def _load_corpus(directory: str, embed_dim: int):
    frontend = FrontendConfig(hop=embed_dim, embed_dim=embed_dim)
    waves = [read_wav(p) for p in _corpus_paths(directory)]
    return waves, [analyze(w, frontend) for w in waves]


def cmd_fit_codebooks(args) -> int:
    cfg = _resolve_config(args)
    _echo_config(cfg)
    _, embeddings = _load_corpus(args.input_dir, cfg["embed_dim"])
    codebooks = fit_codebooks(embeddings, _codec_config(cfg), seed=cfg["seed"])
    save_codebooks(args.output, codebooks)
    for i, rmse in enumerate(codebooks.layer_rmse, start=1):
        print(f"layer {i} residual_rmse={rmse:.6f}")
    log.info("wrote codebooks to %s", args.output)
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    _echo_config(cfg)
    role = args.role
    codebooks = load_codebooks(args.codebook)
    codec_cfg = _codec_config(cfg)
    _, embeddings = _load_corpus(args.input_dir, cfg["embed_dim"])
    grids = [quantize_grid(e, codebooks, codec_cfg) for e in embeddings]

    loss_rows: list[str] = ["step,loss"]
    if cfg["model_kind"] == "context":
        model = train_context_model(grids, role, order=cfg["order"], cfg=codec_cfg)
        total_bits = 0.0
        total_positions = 0
        from .probmodel.flatten import role_layout

        for grid in grids:
            layout = role_layout(grid.n_frames, codec_cfg, role)
            symbols = np.array([grid.codes[f, l - 1] for f, l in layout])
            total_bits += cross_entropy_bits(model, symbols, layout)
            total_positions += sum(1 for _, l in layout if model.predicts(int(l)))
        loss_rows.append(f"0,{total_bits / max(total_positions, 1):.6f}")
    elif cfg["model_kind"] == "transformer":
        arch = TransformerConfig(
            n_blocks=cfg["arch_blocks"],
            n_heads=cfg["arch_heads"],
            d_model=cfg["arch_width"],
            context_cap=cfg["context_cap"],
            max_frames=cfg["max_frames"],
            learning_rate=cfg["train_lr"],
            n_steps=cfg["train_steps"],
            batch_size=cfg["train_batch"],
        )
        losses: list[float] = []
        model = train_transformer(
            grids, role, codec_cfg, arch, seed=cfg["seed"], loss_log=losses
        )
        loss_rows.extend(f"{i},{loss:.6f}" for i, loss in enumerate(losses))
    else:
        raise ValueError(f"unknown model kind {cfg['model_kind']!r}")

    save_model(args.output, model)
    loss_csv = args.loss_csv or str(Path(args.output).with_suffix(".loss.csv"))
    Path(loss_csv).write_text("\n".join(loss_rows) + "\n")
    print(f"model_id={model.model_id.hex()}")
    log.info("wrote %s model to %s", role, args.output)
    return 0


def cmd_encode(args) -> int:
    cfg = _resolve_config(args)
    _echo_config(cfg)
    codebooks = load_codebooks(args.codebook)
    coarse_model = load_model(args.coarse_model)
    if coarse_model.role != ROLE_COARSE:
        raise ModelMismatch(f"{args.coarse_model} holds a {coarse_model.role} model")
    wave = read_wav(args.input)
    bitstream = encode(wave, codebooks, coarse_model, cfg["mode"])
    Path(args.output).write_bytes(bitstream.to_bytes())
    duration = bitstream.frame_count * bitstream.hop / bitstream.sample_rate
    print(
        f"frames={bitstream.frame_count} payload_bits={bitstream.payload_bits} "
        f"duration_s={duration:.3f} bps={bitstream.bits_per_second():.3f}"
    )
    return 0


def cmd_decode(args) -> int:
    cfg = _resolve_config(args)
    _echo_config(cfg)
    codebooks = load_codebooks(args.codebook)
    coarse_model = load_model(args.coarse_model)
    fine_model = load_model(args.fine_model) if args.fine_model else None
    bitstream = Bitstream.from_bytes(Path(args.input).read_bytes())
    grid, wave = decode(
        bitstream, codebooks, coarse_model, fine_model, _sampler_config(cfg)
    )
    write_wav(args.output, wave)
    if args.dump_grid:
        header = "frame," + ",".join(f"layer{k}" for k in range(1, grid.n_layers + 1))
        rows = [header]
        rows.extend(
            f"{n}," + ",".join(str(int(c)) for c in grid.codes[n])
            for n in range(grid.n_frames)
        )
        Path(args.dump_grid).write_text("\n".join(rows) + "\n")
    print(f"frames={grid.n_frames} samples={len(wave)}")
    return 0


def cmd_report(args) -> int:
    cfg = _resolve_config(args)
    _echo_config(cfg)
    codebooks = load_codebooks(args.codebook)
    coarse_model = load_model(args.coarse_model)
    fine_model = load_model(args.fine_model) if args.fine_model else None
    codec_cfg = coarse_model.cfg
    _, embeddings = _load_corpus(args.input_dir, codec_cfg.embed_dim)
    grids = [quantize_grid(e, codebooks, codec_cfg) for e in embeddings]
    report = rate_report(grids, coarse_model, fine_model)
    Path(args.output_prefix + ".csv").write_text(report_csv([report]))
    Path(args.output_prefix + ".json").write_text(report_json([report]))
    if args.confidence_csv:
        rows = []
        for grid in grids:
            rows.extend(confidence_profile(coarse_model, grid))
        Path(args.confidence_csv).write_text(confidence_csv(rows))
    print(
        f"entropy_bps={report.entropy_bps:.3f} huffman_bps={report.huffman_bps:.3f} "
        f"range_bps={report.range_bps:.3f} raw_bps={report.raw_bps:.3f}"
    )
    return 0


def cmd_vad_report(args) -> int:
    cfg = _resolve_config(args)
    _echo_config(cfg)
    codebooks = load_codebooks(args.codebook)
    coarse_model = load_model(args.coarse_model)
    codec_cfg = coarse_model.cfg
    waves, embeddings = _load_corpus(args.input_dir, codec_cfg.embed_dim)
    reports = []
    for wave, emb in zip(waves, embeddings):
        grid = quantize_grid(emb, codebooks, codec_cfg, n_layers=codec_cfg.n_coarse)
        track = vad_track(
            wave,
            cfg["vad_threshold_db"],
            cfg["vad_slope_db"],
            cfg["vad_prob_threshold"],
            cfg["vad_rule"],
        )
        reports.append(vad_rate_report(grid, coarse_model, track))
    Path(args.output_prefix + ".csv").write_text(report_csv(reports))
    Path(args.output_prefix + ".json").write_text(report_json(reports))
    for report in reports:
        print(
            f"voiced={report.voiced_frames}/{report.frames} "
            f"voices_only_bps={report.voiced_only_entropy_bps:.3f} "
            f"zero_nonvoice_bps={report.zero_nonvoice_entropy_bps:.3f}"
        )
    return 0


def _add_shared_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--nc", type=int, help="coarse (transmitted) layers")
    p.add_argument("--nf", type=int, help="fine (synthesized) layers")
    p.add_argument("--layers", type=int, help="total quantizer layers")
    p.add_argument("--codebook-size", dest="codebook_size", type=int)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--mode", choices=["huffman", "range"])
    p.add_argument("--sampler", choices=["greedy", "temperature", "topk"])
    p.add_argument("--temperature", type=float)
    p.add_argument("--topk", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--order", type=int, help="context-model window length")
    p.add_argument("--model-kind", dest="model_kind", choices=["context", "transformer"])
    p.add_argument("--train-steps", dest="train_steps", type=int)
    p.add_argument("--train-batch", dest="train_batch", type=int)
    p.add_argument("--train-lr", dest="train_lr", type=float)
    p.add_argument("--arch-blocks", dest="arch_blocks", type=int)
    p.add_argument("--arch-heads", dest="arch_heads", type=int)
    p.add_argument("--arch-width", dest="arch_width", type=int)
    p.add_argument("--context-cap", dest="context_cap", type=int)
    p.add_argument("--max-frames", dest="max_frames", type=int)
    p.add_argument("--vad-threshold-db", dest="vad_threshold_db", type=float)
    p.add_argument("--vad-slope-db", dest="vad_slope_db", type=float)
    p.add_argument("--vad-prob-threshold", dest="vad_prob_threshold", type=float)
    p.add_argument("--vad-rule", dest="vad_rule", choices=["min", "mean"])
    p.add_argument("--config", help="JSON config file (flags override it)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tokencodec",
        description="Hierarchical token speech codec with model-driven entropy coding",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-codebooks", help="fit residual VQ codebooks on a WAV corpus")
    p.add_argument("--input-dir", required=True)
    p.add_argument("--output", required=True)
    _add_shared_flags(p)
    p.set_defaults(func=cmd_fit_codebooks)

    p = sub.add_parser("train", help="train a token model on frozen codebooks")
    p.add_argument("--role", choices=[ROLE_COARSE, ROLE_FINE], required=True)
    p.add_argument("--input-dir", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--loss-csv", dest="loss_csv")
    _add_shared_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode a WAV into a token bitstream")
    p.add_argument("--input", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--coarse-model", dest="coarse_model", required=True)
    p.add_argument("--output", required=True)
    _add_shared_flags(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a bitstream back into audio")
    p.add_argument("--input", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--coarse-model", dest="coarse_model", required=True)
    p.add_argument("--fine-model", dest="fine_model")
    p.add_argument("--output", required=True)
    p.add_argument("--dump-grid", dest="dump_grid")
    _add_shared_flags(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("report", help="rate/accuracy report over a corpus")
    p.add_argument("--input-dir", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--coarse-model", dest="coarse_model", required=True)
    p.add_argument("--fine-model", dest="fine_model")
    p.add_argument("--output-prefix", dest="output_prefix", required=True)
    p.add_argument("--confidence-csv", dest="confidence_csv")
    _add_shared_flags(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("vad-report", help="gated-transmission rate report per file")
    p.add_argument("--input-dir", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--coarse-model", dest="coarse_model", required=True)
    p.add_argument("--output-prefix", dest="output_prefix", required=True)
    _add_shared_flags(p)
    p.set_defaults(func=cmd_vad_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("TOKENCODEC_LOG", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ModelMismatch, CorruptStream) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except (
        FileNotFoundError,
        NotADirectoryError,
        IsADirectoryError,
        PermissionError,
        json.JSONDecodeError,
        ValueError,
        UnsupportedFormat,
        InsufficientData,
        EmptyInput,
        InvalidSample,
        ShapeError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CodecError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - map anything else to exit 4
        log.exception("unhandled failure")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
