"""Command-line driver tests (subprocess level)."""

import json
import re
import subprocess
import sys

import numpy as np
import pytest

from tokencodec import read_wav, write_wav
from tokencodec.probmodel import load_model

COMMON = ["--codebook-size", "64", "--nc", "2", "--nf", "1", "--seed", "7"]


def run_cli(*args, expect=0):
    result = subprocess.run(
        [sys.executable, "-m", "tokencodec.cli", *args],
        capture_output=True,
        text=True,
    )
    assert result.returncode == expect, (
        f"exit {result.returncode} != {expect}\nstdout: {result.stdout}\n"
        f"stderr: {result.stderr[-2000:]}"
    )
    return result


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, wav_corpus):
    """Fitted codebooks and trained models shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cb = root / "cb.tcq"
    coarse = root / "coarse.tcm"
    fine = root / "fine.tcm"
    run_cli("fit-codebooks", "--input-dir", str(wav_corpus), "--output", str(cb), *COMMON)
    run_cli(
        "train", "--role", "coarse", "--input-dir", str(wav_corpus),
        "--codebook", str(cb), "--output", str(coarse), *COMMON,
    )
    run_cli(
        "train", "--role", "fine", "--input-dir", str(wav_corpus),
        "--codebook", str(cb), "--output", str(fine), *COMMON,
    )
    return {"root": root, "corpus": wav_corpus, "cb": cb, "coarse": coarse, "fine": fine}


class TestFitCodebooks:
    def test_deterministic_output(self, workspace, tmp_path):
        out1 = tmp_path / "a.tcq"
        out2 = tmp_path / "b.tcq"
        for out in (out1, out2):
            run_cli(
                "fit-codebooks", "--input-dir", str(workspace["corpus"]),
                "--output", str(out), *COMMON,
            )
        assert out1.read_bytes() == out2.read_bytes()

    def test_per_layer_error_decreasing(self, workspace, tmp_path):
        result = run_cli(
            "fit-codebooks", "--input-dir", str(workspace["corpus"]),
            "--output", str(tmp_path / "toy.tcq"),
            "--codebook-size", "4", "--nc", "2", "--nf", "0", "--seed", "1",
        )
        errors = [
            float(m.group(1))
            for m in re.finditer(r"residual_rmse=([0-9.]+)", result.stdout)
        ]
        assert len(errors) == 2
        assert errors[0] > errors[1]

    def test_missing_directory_exit_2(self, tmp_path):
        result = run_cli(
            "fit-codebooks", "--input-dir", str(tmp_path / "nope"),
            "--output", str(tmp_path / "cb.tcq"), expect=2,
        )
        assert "nope" in result.stderr

    def test_effective_config_on_stderr(self, workspace, tmp_path):
        result = run_cli(
            "fit-codebooks", "--input-dir", str(workspace["corpus"]),
            "--output", str(tmp_path / "cb.tcq"), *COMMON,
        )
        echoed = json.loads(result.stderr.splitlines()[0])
        assert echoed["effective_config"]["codebook_size"] == 64
        assert echoed["effective_config"]["nc"] == 2

    def test_config_file_precedence(self, workspace, tmp_path):
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({"codebook_size": 8, "nc": 1, "nf": 0}))
        result = run_cli(
            "fit-codebooks", "--input-dir", str(workspace["corpus"]),
            "--output", str(tmp_path / "cb.tcq"),
            "--config", str(config), "--nc", "2",   # flag beats file
        )
        echoed = json.loads(result.stderr.splitlines()[0])
        assert echoed["effective_config"]["codebook_size"] == 8
        assert echoed["effective_config"]["nc"] == 2

    def test_unknown_config_key_exit_2(self, workspace, tmp_path):
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({"bogus": 1}))
        run_cli(
            "fit-codebooks", "--input-dir", str(workspace["corpus"]),
            "--output", str(tmp_path / "cb.tcq"), "--config", str(config),
            expect=2,
        )


class TestTrain:
    def test_fine_model_role_byte(self, workspace):
        assert load_model(workspace["fine"]).role == "fine"
        assert load_model(workspace["coarse"]).role == "coarse"

    def test_codebook_untouched_by_training(self, workspace, tmp_path):
        before = workspace["cb"].read_bytes()
        run_cli(
            "train", "--role", "coarse", "--input-dir", str(workspace["corpus"]),
            "--codebook", str(workspace["cb"]),
            "--output", str(tmp_path / "again.tcm"), *COMMON,
        )
        assert workspace["cb"].read_bytes() == before

    def test_transformer_loss_curve_decreases(self, workspace, tmp_path):
        out = tmp_path / "trans.tcm"
        run_cli(
            "train", "--role", "coarse", "--input-dir", str(workspace["corpus"]),
            "--codebook", str(workspace["cb"]), "--output", str(out),
            "--model-kind", "transformer", "--train-steps", "60",
            "--arch-blocks", "1", "--arch-heads", "2", "--arch-width", "32",
            "--train-lr", "0.003", *COMMON,
        )
        rows = (tmp_path / "trans.loss.csv").read_text().splitlines()[1:]
        losses = [float(r.split(",")[1]) for r in rows]
        assert len(losses) == 60
        assert np.mean(losses[-10:]) < np.mean(losses[:10])

    def test_training_deterministic(self, workspace, tmp_path):
        outs = []
        for name in ("m1.tcm", "m2.tcm"):
            out = tmp_path / name
            run_cli(
                "train", "--role", "coarse", "--input-dir", str(workspace["corpus"]),
                "--codebook", str(workspace["cb"]), "--output", str(out), *COMMON,
            )
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


class TestEncodeDecode:
    def test_roundtrip_and_bps_accounting(self, workspace, tmp_path):
        corpus = workspace["corpus"]
        wav = next(iter(sorted(corpus.glob("*.wav"))))
        stream = tmp_path / "x.tcb"
        result = run_cli(
            "encode", "--input", str(wav), "--codebook", str(workspace["cb"]),
            "--coarse-model", str(workspace["coarse"]), "--output", str(stream),
            "--mode", "range", *COMMON,
        )
        fields = dict(kv.split("=") for kv in result.stdout.split())
        bps = float(fields["bps"])
        assert abs(bps - int(fields["payload_bits"]) / float(fields["duration_s"])) < 0.1
        out_wav = tmp_path / "x.wav"
        grid_csv = tmp_path / "grid.csv"
        run_cli(
            "decode", "--input", str(stream), "--codebook", str(workspace["cb"]),
            "--coarse-model", str(workspace["coarse"]),
            "--fine-model", str(workspace["fine"]),
            "--output", str(out_wav), "--dump-grid", str(grid_csv), *COMMON,
        )
        decoded = read_wav(out_wav)
        assert len(decoded) == int(fields["frames"]) * 320
        lines = grid_csv.read_text().splitlines()
        assert lines[0] == "frame,layer1,layer2,layer3"
        assert len(lines) == 1 + int(fields["frames"])

    def test_range_payload_within_32_bits_of_huffman(self, workspace, tmp_path):
        for wav in sorted(workspace["corpus"].glob("*.wav")):
            sizes = {}
            for mode in ("huffman", "range"):
                out = tmp_path / f"{wav.stem}.{mode}.tcb"
                result = run_cli(
                    "encode", "--input", str(wav), "--codebook", str(workspace["cb"]),
                    "--coarse-model", str(workspace["coarse"]), "--output", str(out),
                    "--mode", mode, *COMMON,
                )
                fields = dict(kv.split("=") for kv in result.stdout.split())
                sizes[mode] = int(fields["payload_bits"])
            assert sizes["range"] <= sizes["huffman"] + 32

    def test_nf_zero_decode_equals_direct_path(self, workspace, tmp_path):
        flags = ["--codebook-size", "64", "--nc", "3", "--nf", "0", "--seed", "7"]
        cb = tmp_path / "cb0.tcq"
        model = tmp_path / "coarse0.tcm"
        corpus = workspace["corpus"]
        run_cli("fit-codebooks", "--input-dir", str(corpus), "--output", str(cb), *flags)
        run_cli(
            "train", "--role", "coarse", "--input-dir", str(corpus),
            "--codebook", str(cb), "--output", str(model), *flags,
        )
        wav = sorted(corpus.glob("*.wav"))[0]
        stream = tmp_path / "s.tcb"
        out_wav = tmp_path / "out.wav"
        run_cli("encode", "--input", str(wav), "--codebook", str(cb),
                "--coarse-model", str(model), "--output", str(stream), *flags)
        run_cli("decode", "--input", str(stream), "--codebook", str(cb),
                "--coarse-model", str(model), "--output", str(out_wav), *flags)
        # direct quantize-dequantize path
        from tokencodec import Waveform, analyze, synthesize, EmbeddingSequence
        from tokencodec.frontend import FrontendConfig
        from tokencodec.rvq import load_codebooks, quantize_grid, dequantize_grid
        from tokencodec.probmodel import load_model as load_tcm

        cfg = load_tcm(model).cfg
        fc = FrontendConfig()
        w = read_wav(wav)
        grid = quantize_grid(analyze(w, fc), load_codebooks(cb), cfg)
        direct = synthesize(EmbeddingSequence(dequantize_grid(grid, load_codebooks(cb)), fc))
        direct_path = tmp_path / "direct.wav"
        write_wav(direct_path, direct)
        assert out_wav.read_bytes() == direct_path.read_bytes()

    def test_model_mismatch_exit_3(self, workspace, tmp_path):
        corpus = workspace["corpus"]
        wav = sorted(corpus.glob("*.wav"))[0]
        stream = tmp_path / "m.tcb"
        run_cli(
            "encode", "--input", str(wav), "--codebook", str(workspace["cb"]),
            "--coarse-model", str(workspace["coarse"]), "--output", str(stream), *COMMON,
        )
        other = tmp_path / "other.tcm"
        run_cli(
            "train", "--role", "coarse", "--input-dir", str(corpus),
            "--codebook", str(workspace["cb"]), "--output", str(other),
            "--order", "1", *COMMON,
        )
        result = run_cli(
            "decode", "--input", str(stream), "--codebook", str(workspace["cb"]),
            "--coarse-model", str(other), "--output", str(tmp_path / "no.wav"),
            *COMMON, expect=3,
        )
        hexes = re.findall(r"[0-9a-f]{64}", result.stderr)
        assert len(set(hexes)) == 2           # both model ids printed


class TestReports:
    def test_report_columns_and_determinism(self, workspace, tmp_path):
        prefixes = [tmp_path / "r1", tmp_path / "r2"]
        for prefix in prefixes:
            run_cli(
                "report", "--input-dir", str(workspace["corpus"]),
                "--codebook", str(workspace["cb"]),
                "--coarse-model", str(workspace["coarse"]),
                "--fine-model", str(workspace["fine"]),
                "--output-prefix", str(prefix),
                "--confidence-csv", str(prefix) + ".conf.csv", *COMMON,
            )
        assert (tmp_path / "r1.csv").read_bytes() == (tmp_path / "r2.csv").read_bytes()
        assert (tmp_path / "r1.conf.csv").read_bytes() == (tmp_path / "r2.conf.csv").read_bytes()
        rows = (tmp_path / "r1.csv").read_text().splitlines()
        header = rows[0].split(",")
        data = dict(zip(header, rows[1].split(",")))
        assert float(data["raw_bps"]) == 2 * 50 * 6    # nc=2 layers, 6 bits/code
        assert float(data["entropy_bps"]) > 0
        conf = (tmp_path / "r1.conf.csv").read_text().splitlines()
        assert conf[0] == "frame_index,mean_entropy_bits,voiced_flag"

    def test_vad_report_scenario_ordering(self, workspace, tmp_path):
        prefix = tmp_path / "vrep"
        run_cli(
            "vad-report", "--input-dir", str(workspace["corpus"]),
            "--codebook", str(workspace["cb"]),
            "--coarse-model", str(workspace["coarse"]),
            "--output-prefix", str(prefix), *COMMON,
        )
        rows = (tmp_path / "vrep.csv").read_text().splitlines()
        header = rows[0].split(",")
        for line in rows[1:]:
            data = dict(zip(header, line.split(",")))
            voiced_only = float(data["voiced_only_entropy_bps"])
            gated = float(data["zero_nonvoice_entropy_bps"])
            if int(data["voiced_frames"]) < int(data["frames"]):
                assert gated <= voiced_only
            assert float(data["raw_bps"]) == 2 * 50 * 6


class TestUsageErrors:
    def test_layers_inconsistent_exit_2(self, workspace, tmp_path):
        run_cli(
            "fit-codebooks", "--input-dir", str(workspace["corpus"]),
            "--output", str(tmp_path / "cb.tcq"),
            "--nc", "2", "--nf", "2", "--layers", "3", expect=2,
        )

    def test_bad_config_json_exit_2(self, workspace, tmp_path):
        config = tmp_path / "broken.json"
        config.write_text("{not json")
        run_cli(
            "fit-codebooks", "--input-dir", str(workspace["corpus"]),
            "--output", str(tmp_path / "cb.tcq"), "--config", str(config),
            expect=2,
        )
