"""Entropy-coding tests: apportionment, Huffman, range coder, streams."""

import dataclasses
import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokencodec.entropy import (
    BitReader,
    BitWriter,
    Bitstream,
    FREQ_TOTAL,
    QuantizedDistribution,
    RangeDecoder,
    RangeEncoder,
    canonical_codes,
    cross_entropy_bits,
    decode_stream,
    encode_stream,
    entropy_bits,
    huffman_code_lengths,
    quantize_distribution,
    score_stream,
)
from tokencodec.errors import ContextError, CorruptStream, InvalidSymbol, ModelMismatch
from tokencodec.probmodel import ROLE_COARSE, coarse_layout, flatten_coarse, train_context_model
from tokencodec.probmodel.base import floor_distribution
from tokencodec.probmodel.context_model import ContextModel
from tokencodec.rvq import CodecConfig, TokenGrid


def random_probs(rng, n):
    p = rng.gamma(0.4, size=n) + 1e-12
    return floor_distribution(p / p.sum())


def uniform_model(nc, n_coarse=1):
    cfg = CodecConfig(codebook_size=nc, n_coarse=n_coarse, n_fine=0, embed_dim=2)
    return ContextModel(ROLE_COARSE, cfg, order=1, counts={}, totals={})


class TestQuantizeDistribution:
    def test_uniform_1024(self):
        q = quantize_distribution(np.full(1024, 1 / 1024))
        assert np.all(q.freqs == 64)

    def test_point_mass_after_floor(self):
        p = np.zeros(1024)
        p[0] = 1.0
        q = quantize_distribution(floor_distribution(p))
        assert q.freqs[0] == FREQ_TOTAL - 1023
        assert np.all(q.freqs[1:] == 1)

    def test_apportionment_oracle(self):
        p = floor_distribution(np.array([0.5, 0.3, 0.2, 0.0]))
        q = quantize_distribution(p)
        assert int(q.freqs.sum()) == FREQ_TOTAL
        # Largest-remainder oracle, recomputed from first principles.
        scaled = p * FREQ_TOTAL
        base = np.maximum(np.floor(scaled).astype(int), 1)
        need = FREQ_TOTAL - base.sum()
        order = sorted(range(4), key=lambda i: (-(scaled[i] - np.floor(scaled[i])), i))
        for i in order[:need]:
            base[i] += 1
        np.testing.assert_array_equal(q.freqs, base)

    @given(seed=st.integers(0, 10_000), n=st.sampled_from([2, 3, 16, 1024]))
    @settings(max_examples=80, deadline=None)
    def test_always_valid(self, seed, n):
        rng = np.random.default_rng(seed)
        q = quantize_distribution(random_probs(rng, n))
        assert int(q.freqs.sum()) == FREQ_TOTAL
        assert q.freqs.min() >= 1


class TestHuffman:
    def test_spot_example(self):
        q = quantize_distribution(np.array([0.4, 0.3, 0.2, 0.1]))
        lengths = huffman_code_lengths(q)
        assert lengths.tolist() == [1, 2, 3, 3]
        p = np.array([0.4, 0.3, 0.2, 0.1])
        expected_length = float((p * lengths).sum())
        assert abs(expected_length - 1.9) < 1e-12
        assert abs(entropy_bits(p) - 1.8465) < 1e-4

    def test_uniform_power_of_two(self):
        for k in (1, 3, 5):
            q = quantize_distribution(np.full(2 ** k, 2.0 ** -k))
            assert np.all(huffman_code_lengths(q) == k)

    def test_two_symbols_any_split(self):
        for p0 in (0.01, 0.4, 0.93):
            q = quantize_distribution(floor_distribution(np.array([p0, 1 - p0])))
            assert huffman_code_lengths(q).tolist() == [1, 1]

    def test_matches_brute_force_optimum(self):
        # Enumerate all monotone length vectors with Kraft sum <= 1 for
        # small alphabets; the Huffman expected length must match the
        # optimum.
        rng = np.random.default_rng(1)
        for n in (3, 4, 5):
            for _ in range(8):
                q = quantize_distribution(random_probs(rng, n))
                lengths = huffman_code_lengths(q)
                got = int((q.freqs * lengths).sum())
                best = None
                for combo in itertools.product(range(1, 8), repeat=n):
                    if sum(Fraction(1, 2 ** l) for l in combo) <= 1:
                        cost = int(sum(f * l for f, l in zip(q.freqs, combo)))
                        best = cost if best is None else min(best, cost)
                assert got == best

    @given(seed=st.integers(0, 10_000), n=st.sampled_from([2, 5, 64]))
    @settings(max_examples=60, deadline=None)
    def test_kraft_equality_and_entropy_bound(self, seed, n):
        rng = np.random.default_rng(seed)
        q = quantize_distribution(random_probs(rng, n))
        lengths = huffman_code_lengths(q)
        max_len = int(lengths.max())
        assert sum(1 << (max_len - int(l)) for l in lengths) == 1 << max_len
        expected = float((q.freqs / FREQ_TOTAL * lengths).sum())
        h = q.entropy_bits()
        assert h - 1e-9 <= expected < h + 1.0

    def test_canonical_codes_are_prefix_free(self):
        rng = np.random.default_rng(3)
        q = quantize_distribution(random_probs(rng, 20))
        lengths = huffman_code_lengths(q)
        codes = canonical_codes(lengths)
        words = [format(int(c), f"0{int(l)}b") for c, l in zip(codes, lengths)]
        for a, b in itertools.permutations(words, 2):
            assert not b.startswith(a)


class TestRangeCoder:
    def test_half_probability_bound(self):
        q = QuantizedDistribution(np.array([32768, 32768]))
        rng = np.random.default_rng(0)
        symbols = rng.integers(0, 2, 1000)
        writer = BitWriter()
        encoder = RangeEncoder(writer)
        for s in symbols:
            encoder.encode(q, int(s))
        encoder.finish()
        assert writer.bit_count <= 1032
        reader = BitReader(writer.getvalue(), writer.bit_count)
        decoder = RangeDecoder(reader)
        assert [decoder.decode(q) for _ in range(1000)] == symbols.tolist()
        assert reader.bits_read == writer.bit_count

    def test_against_exact_rational_oracle(self):
        # The payload must sit within the coder's +32 bound of the exact
        # interval width computed in unbounded rational arithmetic.
        rng = np.random.default_rng(5)
        for trial in range(10):
            n_sym = int(rng.integers(2, 30))
            qs = []
            symbols = []
            width = Fraction(1)
            writer = BitWriter()
            encoder = RangeEncoder(writer)
            for _ in range(n_sym):
                q = quantize_distribution(random_probs(rng, int(rng.integers(2, 20))))
                s = int(rng.integers(q.freqs.size))
                width *= Fraction(int(q.freqs[s]), FREQ_TOTAL)
                encoder.encode(q, s)
                qs.append(q)
                symbols.append(s)
            encoder.finish()
            ideal = -math.log2(width)   # exact cross-entropy of the stream
            assert writer.bit_count <= ideal + 32
            reader = BitReader(writer.getvalue(), writer.bit_count)
            decoder = RangeDecoder(reader)
            assert [decoder.decode(q) for q in qs] == symbols


@pytest.fixture(scope="module")
def trained_setup():
    rng = np.random.default_rng(42)
    cfg = CodecConfig(codebook_size=16, n_coarse=2, n_fine=0, embed_dim=2)
    grids = [TokenGrid(rng.integers(0, 16, (25, 2)), cfg) for _ in range(3)]
    model = train_context_model(grids, ROLE_COARSE, order=2)
    return cfg, model


class TestStreams:
    def test_roundtrip_both_modes(self, trained_setup):
        cfg, model = trained_setup
        rng = np.random.default_rng(7)
        for mode in ("huffman", "range"):
            for _ in range(10):
                frames = int(rng.integers(1, 40))
                grid = TokenGrid(rng.integers(0, 16, (frames, 2)), cfg)
                symbols = flatten_coarse(grid)
                layout = coarse_layout(frames, 2)
                b = encode_stream(symbols, model, layout, mode)
                np.testing.assert_array_equal(decode_stream(b, model), symbols)

    def test_empty_stream(self, trained_setup):
        cfg, model = trained_setup
        b = encode_stream([], model, np.zeros((0, 2), dtype=np.int32), "range")
        assert b.payload_bits == 0
        assert decode_stream(b, model).size == 0

    def test_huffman_floor_on_constant_stream(self):
        # Near-point-mass model: huffman cannot go below 1 bit/symbol, and
        # only the first symbol (empty-window context) costs more.
        cfg = CodecConfig(codebook_size=16, n_coarse=1, n_fine=0, embed_dim=2)
        grid = TokenGrid(np.full((400, 1), 9), cfg)
        model = train_context_model([grid], ROLE_COARSE, order=1)
        symbols = flatten_coarse(grid)
        b = encode_stream(symbols, model, coarse_layout(400, 1), "huffman")
        assert 400 <= b.payload_bits <= 400 + 8
        np.testing.assert_array_equal(decode_stream(b, model), symbols)

    def test_payload_equals_sum_of_huffman_lengths(self, trained_setup):
        cfg, model = trained_setup
        rng = np.random.default_rng(11)
        grid = TokenGrid(rng.integers(0, 16, (30, 2)), cfg)
        symbols = flatten_coarse(grid)
        layout = coarse_layout(30, 2)
        b = encode_stream(symbols, model, layout, "huffman")
        _, huff_bits, _ = score_stream(model, symbols, layout)
        assert b.payload_bits == int(huff_bits.sum())

    def test_range_within_32_bits_of_cross_entropy(self, trained_setup):
        cfg, model = trained_setup
        rng = np.random.default_rng(13)
        grid = TokenGrid(rng.integers(0, 16, (50, 2)), cfg)
        symbols = flatten_coarse(grid)
        layout = coarse_layout(50, 2)
        b = encode_stream(symbols, model, layout, "range")
        _, _, ideal = score_stream(model, symbols, layout)
        assert b.payload_bits <= float(ideal.sum()) + 32
        assert abs(b.payload_bits - cross_entropy_bits(model, symbols, layout)) <= 32

    def test_cache_flag_is_output_identical(self, trained_setup):
        cfg, model = trained_setup
        rng = np.random.default_rng(17)
        grid = TokenGrid(rng.integers(0, 16, (40, 2)), cfg)
        symbols = flatten_coarse(grid)
        layout = coarse_layout(40, 2)
        for mode in ("huffman", "range"):
            with_cache = encode_stream(symbols, model, layout, mode, cache=True)
            without = encode_stream(symbols, model, layout, mode, cache=False)
            assert with_cache.payload == without.payload
            assert with_cache.payload_bits == without.payload_bits
            np.testing.assert_array_equal(
                decode_stream(with_cache, model, cache=False), symbols
            )

    def test_symbol_out_of_range(self, trained_setup):
        cfg, model = trained_setup
        with pytest.raises(InvalidSymbol):
            encode_stream([16, 0], model, coarse_layout(1, 2), "range")

    def test_model_id_checked_before_payload(self, trained_setup):
        cfg, model = trained_setup
        rng = np.random.default_rng(19)
        grid = TokenGrid(rng.integers(0, 16, (10, 2)), cfg)
        b = encode_stream(flatten_coarse(grid), model, coarse_layout(10, 2), "range")
        flipped = bytearray(b.coarse_model_id)
        flipped[0] ^= 0x01
        # Payload replaced by garbage: ModelMismatch must win since the
        # id check precedes any payload read.
        broken = dataclasses.replace(
            b, coarse_model_id=bytes(flipped), payload=b"\xff" * len(b.payload)
        )
        with pytest.raises(ModelMismatch):
            decode_stream(broken, model)

    @pytest.mark.parametrize("mode", ["huffman", "range"])
    def test_truncation_detected(self, trained_setup, mode):
        cfg, model = trained_setup
        rng = np.random.default_rng(23)
        grid = TokenGrid(rng.integers(0, 16, (12, 2)), cfg)
        b = encode_stream(flatten_coarse(grid), model, coarse_layout(12, 2), mode)
        truncated = dataclasses.replace(b, payload_bits=b.payload_bits - 1)
        with pytest.raises(CorruptStream):
            decode_stream(truncated, model)

    def test_fine_role_cannot_encode(self):
        cfg = CodecConfig(codebook_size=8, n_coarse=1, n_fine=1, embed_dim=2)
        model = ContextModel("fine", cfg, order=1, counts={}, totals={})
        with pytest.raises(ContextError):
            encode_stream([0], model, coarse_layout(1, 1), "range")

    def test_deterministic_payload(self, trained_setup):
        cfg, model = trained_setup
        rng = np.random.default_rng(29)
        grid = TokenGrid(rng.integers(0, 16, (20, 2)), cfg)
        symbols = flatten_coarse(grid)
        layout = coarse_layout(20, 2)
        for mode in ("huffman", "range"):
            b1 = encode_stream(symbols, model, layout, mode)
            b2 = encode_stream(symbols, model, layout, mode)
            assert b1.payload == b2.payload


class TestEntropyAccounting:
    def test_entropy_examples(self):
        assert entropy_bits(np.full(1024, 1 / 1024)) == 10.0
        point = np.zeros(8)
        point[3] = 1.0
        assert entropy_bits(point) == 0.0
        assert abs(entropy_bits(np.array([0.4, 0.3, 0.2, 0.1])) - 1.8465) < 1e-4

    def test_uniform_model_cross_entropy(self):
        model = uniform_model(1024)
        rng = np.random.default_rng(31)
        symbols = rng.integers(0, 1024, 100)
        assert cross_entropy_bits(model, symbols, coarse_layout(100, 1)) == 1000.0

    def test_perfect_predictor_floor_bound(self):
        # A model whose counts overwhelmingly favour one code emits the
        # floored point mass, so the stream costs at most the floor term.
        nc = 16
        cfg = CodecConfig(codebook_size=nc, n_coarse=1, n_fine=0, embed_dim=2)
        big = 10 ** 12
        counts = {(1, ()): {3: big}, (1, (3,)): {3: big}}
        totals = {key: big for key in counts}
        model = ContextModel(ROLE_COARSE, cfg, order=1, counts=counts, totals=totals)
        symbols = np.full(500, 3)
        bits = cross_entropy_bits(model, symbols, coarse_layout(500, 1))
        eps = 2.0 ** -16
        assert bits <= 500 * -np.log2(1 - (nc - 1) * eps) + 1e-6


class TestContainer:
    def test_bytes_roundtrip(self, trained_setup):
        cfg, model = trained_setup
        rng = np.random.default_rng(37)
        grid = TokenGrid(rng.integers(0, 16, (8, 2)), cfg)
        b = encode_stream(flatten_coarse(grid), model, coarse_layout(8, 2), "huffman")
        back = Bitstream.from_bytes(b.to_bytes())
        assert back.frame_count == 8 and back.mode == "huffman"
        assert back.coarse_model_id == model.model_id
        np.testing.assert_array_equal(decode_stream(back, model), flatten_coarse(grid))

    def test_header_corruption_detected(self, trained_setup):
        cfg, model = trained_setup
        grid = TokenGrid(np.zeros((4, 2), dtype=int), cfg)
        b = encode_stream(flatten_coarse(grid), model, coarse_layout(4, 2), "range")
        blob = bytearray(b.to_bytes())
        blob[6] ^= 0xFF                      # inside the header
        with pytest.raises(CorruptStream):
            Bitstream.from_bytes(bytes(blob))

    def test_byte_truncation_detected(self, trained_setup):
        cfg, model = trained_setup
        rng = np.random.default_rng(41)
        grid = TokenGrid(rng.integers(0, 16, (20, 2)), cfg)
        b = encode_stream(flatten_coarse(grid), model, coarse_layout(20, 2), "range")
        blob = b.to_bytes()
        with pytest.raises(CorruptStream):
            decode_stream(Bitstream.from_bytes(blob[:-1]), model)
