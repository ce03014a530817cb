import math

import numpy as np
import pytest

from fedisl.errors import DomainError
from fedisl.sparsify import (
    ResidualState,
    SparseGradient,
    TopQCompressor,
    compress_gradient,
    decode_sparse,
    encode_sparse,
    expected_nnz,
    expected_total_bits,
    index_bits,
    kept_count,
    monte_carlo_nnz,
    monte_carlo_total_bits,
    payload_bytes,
    shared_signal_total_bits,
    sparse_add,
    sparse_routing_size,
    top_q,
)


def test_kept_count_and_index_bits():
    assert kept_count(100, 0.07) == 7
    assert kept_count(7850, 0.1) == 785
    assert index_bits(7850) == 13
    assert index_bits(1) == 1
    with pytest.raises(DomainError):
        kept_count(100, 0.0)
    with pytest.raises(DomainError):
        kept_count(10, 0.05)


def test_top_q_breaks_ties_towards_the_lower_index():
    sg = top_q(np.array([1.0, -1.0, 1.0, 0.5]), 0.5)
    assert sg.indices.tolist() == [0, 1]
    assert sg.values.tolist() == [1.0, -1.0]


def test_top_q_never_stores_zeros():
    sg = top_q(np.array([0.0, 0.0, 2.0, 0.0]), 0.5)
    assert sg.entries == [(2, 2.0)]


def test_residual_carries_dropped_mass_to_the_next_call():
    state = ResidualState.zeros(4)
    first = compress_gradient(np.array([3.0, 1.0, 2.0, 0.5]), state, 0.5)
    assert first.entries == [(0, 3.0), (2, 2.0)]
    np.testing.assert_array_equal(state.delta, [0.0, 1.0, 0.0, 0.5])
    second = compress_gradient(np.zeros(4), state, 0.5)
    assert second.entries == [(1, 1.0), (3, 0.5)]
    np.testing.assert_array_equal(state.delta, np.zeros(4))


def test_q_one_is_lossless(rng):
    g = rng.standard_normal(20)
    state = ResidualState.zeros(20)
    np.testing.assert_array_equal(compress_gradient(g, state, 1.0).to_dense(), g)
    assert not state.delta.any()


def test_compress_shape_mismatch():
    with pytest.raises(DomainError):
        compress_gradient(np.ones(3), ResidualState.zeros(4), 0.5)


def test_compressor_owns_its_residual():
    comp = TopQCompressor(0.5, 4)
    comp(np.array([3.0, 1.0, 2.0, 0.5]))
    assert comp.state.delta.any()
    comp.reset()
    assert not comp.state.delta.any()


@pytest.mark.parametrize(
    "indices, values",
    [([2, 1], [1.0, 1.0]), ([0, 5], [1.0, 1.0]), ([0, 1], [1.0, 0.0]), ([0], [1.0, 2.0])],
)
def test_sparse_gradient_validation(indices, values):
    with pytest.raises(DomainError):
        SparseGradient(5, indices, values)


def test_sparse_add_drops_cancelled_entries():
    a = SparseGradient(6, [1, 3], [2.0, -1.0], weight=1.0)
    b = SparseGradient(6, [3, 5], [1.0, 4.0], weight=1.0)
    s = sparse_add(a, b)
    assert s.entries == [(1, 2.0), (5, 4.0)]
    assert s.wire_bits == 2 * (32 + index_bits(6))


def test_wire_codec_sizes_and_values():
    sg = SparseGradient(7850, [0, 17, 7849], [1.5, -2.25, 1e-3])
    data = encode_sparse(sg)
    assert len(payload_bytes(sg)) == math.ceil(3 * (32 + 13) / 8)
    back = decode_sparse(data)
    assert back.indices.tolist() == [0, 17, 7849]
    np.testing.assert_allclose(back.values, sg.values.astype(np.float32))


def test_half_precision_codec():
    sg = SparseGradient(100, [3, 50], [0.5, -4.0], elem_bits=16)
    back = decode_sparse(encode_sparse(sg))
    assert back.elem_bits == 16 and back.entries == [(3, 0.5), (50, -4.0)]


def test_decode_rejects_damaged_input():
    data = encode_sparse(SparseGradient(100, [3, 50], [0.5, -4.0]))
    with pytest.raises(DomainError):
        decode_sparse(data[:4])
    with pytest.raises(DomainError):
        decode_sparse(data[:-1])


def test_expected_nnz_edges():
    assert expected_nnz(100, 0.1, 1) == pytest.approx(10.0)
    assert expected_nnz(100, 1.0, 5) == pytest.approx(100.0)
    with pytest.raises(DomainError):
        expected_nnz(100, 0.1, 0)


def test_expected_total_bits_edges():
    width = 32 + index_bits(1000)
    assert expected_total_bits(1000, 32, 0.1, 1) == pytest.approx(100 * width)
    # dense vectors: every hop carries n_d entries
    assert expected_total_bits(1000, 32, 1.0, 4) == pytest.approx(4 * 1000 * width)
    # the chain sum equals the sum of expected supports per hop
    chain = sum(expected_nnz(1000, 0.1, h) for h in range(1, 8)) * width
    assert expected_total_bits(1000, 32, 0.1, 7) == pytest.approx(chain)


def test_routing_size_uses_the_longer_branch():
    assert sparse_routing_size(500, 32, 0.1, 5) == expected_total_bits(500, 32, 0.1, 3)
    with pytest.raises(DomainError):
        sparse_routing_size(500, 32, 0.1, 0)


@pytest.mark.parametrize("n_d, q, L", [(100, 0.05, 4), (1000, 0.1, 10), (7850, 0.01, 7)])
def test_monte_carlo_nnz_agrees_with_closed_form(n_d, q, L, rng):
    mean, se = monte_carlo_nnz(n_d, q, L, 20_000, rng)
    assert abs(mean - expected_nnz(n_d, q, L)) <= 4 * se


def test_monte_carlo_chain_bits_agree_with_closed_form(rng):
    mean, _ = monte_carlo_total_bits(1000, 32, 0.1, 6, 2000, rng)
    assert mean == pytest.approx(expected_total_bits(1000, 32, 0.1, 6), rel=0.02)


def test_correlated_summands_stay_below_the_bound(rng):
    mean, _ = shared_signal_total_bits(500, 32, 0.1, 6, 30, rng)
    assert mean <= expected_total_bits(500, 32, 0.1, 6)
