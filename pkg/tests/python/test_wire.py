"""Binary client-update format."""

import struct

import numpy as np
import pytest

from fedpeft.errors import ProtocolError
from fedpeft.lora import LoraAdapter, PruneMask
from fedpeft.wire import (
    HEADER_SIZE,
    ClientUpdate,
    decode_update,
    encode_update,
    payload_size,
    serialize_sparse,
)


def f32_values(rng, shape):
    """Random values that survive the float32 wire exactly."""
    return rng.normal(size=shape).astype(np.float32).astype(np.float64)


def make_delta(rng, L=2, d=8, r=2, C=3):
    return LoraAdapter(f32_values(rng, (L, 3, r, d)), f32_values(rng, (L, 3, d, r)), f32_values(rng, (d, C)))


def tiny_payload(keep=((True, False),)):
    """L=1, H=2, d=2, r=1, C=2 update."""
    rng = np.random.default_rng(7)
    delta = LoraAdapter(f32_values(rng, (1, 3, 1, 2)), f32_values(rng, (1, 3, 2, 1)), f32_values(rng, (2, 2)))
    return serialize_sparse(
        delta, PruneMask(keep), np.array([[0.5, 0.25]]), client_id=1, round=2, sample_count=10, loss=0.75
    )


class TestEncode:
    def test_header_is_forty_bytes(self):
        assert HEADER_SIZE == 40

    @pytest.mark.parametrize("keep_count", [8, 6, 4, 1])
    def test_size_matches_closed_form(self, keep_count):
        """Encoded length equals payload_size for any number of kept heads."""
        rng = np.random.default_rng(keep_count)
        keep = np.zeros(8, dtype=bool)
        keep[:keep_count] = True
        mask = PruneMask(keep.reshape(2, 4))
        payload = serialize_sparse(
            make_delta(rng), mask, rng.uniform(size=(2, 4)), client_id=0, round=1, sample_count=5, loss=1.0
        )
        assert len(payload) == payload_size(2, 4, 8, 2, 3, keep_count)

    def test_dense_update_carries_every_parameter(self):
        """With nothing pruned, values sent = |A| + |B| + |T| + L*H importances."""
        rng = np.random.default_rng(0)
        delta = make_delta(rng)
        update = ClientUpdate.from_delta(
            delta, PruneMask.all_keep(2, 4), np.ones((2, 4)), client_id=0, round=1, sample_count=1, loss=0.0
        )
        assert update.transmitted_values() == delta.parameter_count() + 8

    def test_half_sparsity_sends_half_the_blocks(self):
        """H=4 at sparsity 0.5 sends two B blocks per layer."""
        mask = PruneMask([[True, False, True, False], [False, True, False, True]])
        rng = np.random.default_rng(1)
        update = ClientUpdate.from_delta(
            make_delta(rng), mask, np.ones((2, 4)), client_id=0, round=1, sample_count=1, loss=0.0
        )
        assert sorted(update.delta_b) == [(0, 0), (0, 2), (1, 1), (1, 3)]
        assert update.mask == mask

    def test_pruned_importance_zeroed_and_dense_b_restored(self):
        rng = np.random.default_rng(2)
        delta = make_delta(rng)
        mask = PruneMask([[True, True, False, True], [True, True, True, True]])
        update = ClientUpdate.from_delta(
            delta, mask, np.full((2, 4), 0.3), client_id=0, round=1, sample_count=1, loss=0.0
        )
        assert update.importance[0, 2] == 0.0 and update.importance[0, 1] == 0.3
        dense = update.to_dense_b()
        assert not dense[0, :, 4:6].any()
        np.testing.assert_array_equal(dense[1], delta.b[1])

    def test_header_out_of_range(self):
        rng = np.random.default_rng(3)
        update = ClientUpdate.from_delta(
            make_delta(rng), PruneMask.all_keep(2, 4), np.ones((2, 4)), client_id=-1, round=1, sample_count=1, loss=0.0
        )
        with pytest.raises(ProtocolError):
            encode_update(update)


class TestDecode:
    def test_round_trip(self):
        """Decoding an encoded update reproduces it exactly."""
        rng = np.random.default_rng(4)
        mask = PruneMask([[True, False, True, True], [False, False, True, False]])
        update = ClientUpdate.from_delta(
            make_delta(rng), mask, np.abs(f32_values(rng, (2, 4))), client_id=3, round=9, sample_count=77, loss=0.123
        )
        assert decode_update(encode_update(update)) == update

    def test_float64_deltas_come_back_at_float32_precision(self):
        """Training deltas are float64; the wire keeps their float32 roundings and nothing less."""
        rng = np.random.default_rng(11)
        delta = LoraAdapter(rng.normal(size=(2, 3, 2, 8)), rng.normal(size=(2, 3, 8, 2)), rng.normal(size=(8, 3)))
        mask = PruneMask([[True, True, False, True], [False, True, False, False]])
        update = ClientUpdate.from_delta(
            delta, mask, rng.uniform(0.05, 1.0, size=(2, 4)), client_id=5, round=2, sample_count=60, loss=0.8123456789
        )
        payload = encode_update(update)
        decoded = decode_update(payload)
        assert decoded == update.quantized()
        assert decoded.loss == update.loss
        np.testing.assert_allclose(decoded.importance, update.importance, rtol=1e-7, atol=0)
        np.testing.assert_allclose(decoded.delta_a, update.delta_a, rtol=1e-7, atol=0)
        np.testing.assert_allclose(decoded.delta_head, update.delta_head, rtol=1e-7, atol=0)
        assert decoded.delta_b.keys() == update.delta_b.keys()
        for key, block in update.delta_b.items():
            np.testing.assert_allclose(decoded.delta_b[key], block, rtol=1e-7, atol=0)
        assert encode_update(decoded) == payload
        assert decoded.quantized() == decoded

    def test_bad_magic(self):
        payload = bytearray(tiny_payload())
        payload[:4] = b"XXXX"
        with pytest.raises(ProtocolError, match="magic"):
            decode_update(bytes(payload))

    def test_bad_version(self):
        payload = bytearray(tiny_payload())
        struct.pack_into("<H", payload, 4, 99)
        with pytest.raises(ProtocolError, match="version"):
            decode_update(bytes(payload))

    @pytest.mark.parametrize("cut", [10, 45, 61])
    def test_truncated(self, cut):
        with pytest.raises(ProtocolError):
            decode_update(tiny_payload()[:cut])

    def test_trailing_bytes(self):
        with pytest.raises(ProtocolError, match="trailing"):
            decode_update(tiny_payload() + b"\x00")

    def test_head_id_out_of_range(self):
        payload = bytearray(tiny_payload())
        # header + importance + A(q) + block count
        struct.pack_into("<I", payload, 40 + 8 + 8 + 4, 5)
        with pytest.raises(ProtocolError, match="ascending"):
            decode_update(bytes(payload))

    def test_projections_must_agree_on_heads(self):
        payload = bytearray(tiny_payload())
        # second projection: after q's A, count, id and one [1, 1] block, then k's A and count
        struct.pack_into("<I", payload, 40 + 8 + (8 + 4 + 4 + 4) + 8 + 4, 1)
        with pytest.raises(ProtocolError, match="different head sets"):
            decode_update(bytes(payload))
