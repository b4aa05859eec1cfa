"""Range coder: round trips, code-length bound, determinism, edge cases."""

import numpy as np
import pytest

from latentvox.errors import ConfigError, TruncatedStreamError
from latentvox.rangecoder import (TOTAL, CdfTable, RangeDecoder, RangeEncoder,
                                  decode_symbols, encode_symbols)


def random_table(rng, n_symbols):
    pmf = rng.dirichlet(np.full(n_symbols, 0.3))
    return CdfTable.from_pmf(pmf)


def test_cdf_table_invariants(rng):
    t = random_table(rng, 17)
    assert sum(t.freq) == TOTAL
    assert min(t.freq) >= 1
    assert t.cum[0] == 0 and t.cum[-1] == TOTAL
    assert len(t) == 17


def test_cdf_table_rejects_bad_input():
    with pytest.raises(ConfigError):
        CdfTable([0, TOTAL])
    with pytest.raises(ConfigError):
        CdfTable([1, 2, 3])
    with pytest.raises(ConfigError):
        CdfTable.from_pmf([0.0, 0.0])
    with pytest.raises(ConfigError):
        CdfTable.from_pmf([0.5, np.nan])


def test_from_pmf_largest_remainder_hand_case():
    # two symbols, 2:1 mass; 65534 free slots split 43689/21845 then +1 each
    t = CdfTable.from_pmf([2.0, 1.0])
    assert t.freq == [43690, 21846]


def test_round_trip_small(rng):
    for trial in range(20):
        n_sym = int(rng.integers(2, 40))
        table = random_table(rng, n_sym)
        syms = rng.integers(0, n_sym, size=int(rng.integers(1, 400))).tolist()
        data = encode_symbols(syms, table)
        assert decode_symbols(data, len(syms), table) == syms


def test_round_trip_skewed_distribution(rng):
    # heavy skew exercises long carry/renorm runs
    table = CdfTable([TOTAL - 3, 1, 1, 1])
    syms = [0] * 5000 + [3, 0, 2, 0, 1] * 10
    data = encode_symbols(syms, table)
    assert decode_symbols(data, len(syms), table) == syms


def test_code_length_close_to_entropy(rng):
    table = random_table(rng, 32)
    probs = np.asarray(table.freq, dtype=np.float64) / TOTAL
    syms = rng.choice(32, size=20000, p=probs).tolist()
    data = encode_symbols(syms, table)
    ideal_bits = float(table.bits()[syms].sum())
    assert len(data) * 8 <= ideal_bits * 1.01 + 64


def test_reencode_byte_identical(rng):
    table = random_table(rng, 8)
    syms = rng.integers(0, 8, size=3000).tolist()
    data = encode_symbols(syms, table)
    decoded = decode_symbols(data, len(syms), table)
    assert encode_symbols(decoded, table) == data


def test_mixed_tables_per_symbol(rng):
    # interleave two tables like the per-channel entropy model does
    t_a, t_b = random_table(rng, 9), random_table(rng, 5)
    enc = RangeEncoder()
    syms = [(int(rng.integers(0, 9)), int(rng.integers(0, 5)))
            for _ in range(500)]
    for sa, sb in syms:
        enc.encode_symbol(t_a, sa)
        enc.encode_symbol(t_b, sb)
    data = enc.finish()
    dec = RangeDecoder(data)
    out = [(dec.decode_symbol(t_a), dec.decode_symbol(t_b))
           for _ in range(500)]
    assert out == syms


def test_truncated_payload_detected(rng):
    table = random_table(rng, 6)
    syms = rng.integers(0, 6, size=200).tolist()
    data = encode_symbols(syms, table)
    with pytest.raises(TruncatedStreamError):
        RangeDecoder(b"\x01\x02")
    with pytest.raises(TruncatedStreamError):
        decode_symbols(data[: max(4, len(data) // 4)], len(syms), table)


def test_empty_symbol_stream(rng):
    table = random_table(rng, 4)
    data = encode_symbols([], table)
    assert decode_symbols(data, 0, table) == []
