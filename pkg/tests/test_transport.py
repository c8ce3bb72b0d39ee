import queue
import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppmarl.algebra import ShareMatrix, random_ring
from ppmarl.errors import (
    BadType,
    ChannelDesync,
    DimHeaderMismatch,
    FrameTooLarge,
    ProtocolError,
    SeqGap,
    Truncated,
)
from ppmarl.transport import (
    HEADER_SIZE,
    LoopbackChannel,
    Message,
    MsgType,
    decode_frame,
    encode_frame,
    loopback_pair,
    pack_indices,
    pack_matrices,
    recv_share_matrix,
    send_share_matrix,
    stats_snapshot,
    tcp_pair,
    unpack_indices,
    unpack_matrices,
)


def test_header_layout():
    f = encode_frame(MsgType.OPEN_VAL, 7, b"abc")
    assert f[:4] == struct.pack(">I", 3)
    assert f[4] == int(MsgType.OPEN_VAL)
    assert f[5:9] == struct.pack(">I", 7)
    assert f[9:] == b"abc"
    assert HEADER_SIZE == 9


def test_empty_hello_roundtrip():
    msg, rest = decode_frame(encode_frame(MsgType.HELLO, 0))
    assert msg == Message(MsgType.HELLO, 0, b"")
    assert rest == b""


def test_random_payload_roundtrips():
    rng = np.random.default_rng(0)
    types = list(MsgType)
    for k in range(1000):
        payload = rng.bytes(int(rng.integers(0, 4097)))
        t = types[k % len(types)]
        msg, rest = decode_frame(encode_frame(t, k, payload) + b"tail")
        assert (msg.msg_type, msg.seq, msg.payload) == (t, k, payload)
        assert rest == b"tail"


@settings(max_examples=300, deadline=None)
@given(st.sampled_from(list(MsgType)), st.integers(0, 2**32 - 1), st.binary(max_size=2048))
def test_frame_roundtrip_property(t, seq, payload):
    msg, rest = decode_frame(encode_frame(t, seq, payload))
    assert msg == Message(t, seq, payload) and rest == b""


def test_corrupted_length_truncated():
    f = bytearray(encode_frame(MsgType.SHARE_MATRIX, 0, b"x" * 10))
    f[0:4] = struct.pack(">I", 1000)
    with pytest.raises(Truncated):
        decode_frame(bytes(f))
    with pytest.raises(Truncated):
        decode_frame(b"\x00\x00")


def test_bad_type_and_seq_gap_and_size():
    f = bytearray(encode_frame(MsgType.HELLO, 0))
    f[4] = 0x7F
    with pytest.raises(BadType):
        decode_frame(bytes(f))
    with pytest.raises(BadType):
        encode_frame(0x7F, 0)
    with pytest.raises(SeqGap):
        decode_frame(encode_frame(MsgType.HELLO, 3), expected_seq=2)
    with pytest.raises(FrameTooLarge):
        encode_frame(MsgType.HELLO, 0, b"x" * 11, max_payload=10)
    with pytest.raises(FrameTooLarge):
        decode_frame(encode_frame(MsgType.HELLO, 0, b"x" * 11), max_payload=10)


def test_matrix_payload_layout():
    m = np.array([[1, 2, 3]], dtype=np.uint64)
    p = pack_matrices([m])
    assert p[:8] == struct.pack(">II", 1, 3)
    assert p[8:16] == (1).to_bytes(8, "little")
    (back,) = unpack_matrices(p)
    assert np.array_equal(back, m)
    with pytest.raises(DimHeaderMismatch):
        unpack_matrices(p[:-1])
    with pytest.raises(DimHeaderMismatch):
        unpack_matrices(p + b"\x00")
    with pytest.raises(DimHeaderMismatch):
        unpack_matrices(p, count=2)


def test_index_payload():
    assert unpack_indices(pack_indices([5, 0, 3])) == [5, 0, 3]
    with pytest.raises(DimHeaderMismatch):
        unpack_indices(pack_indices([1, 2])[:-1])


def _session(a, b):
    a.send(MsgType.HELLO)
    b.send(MsgType.HELLO)
    a.recv(MsgType.HELLO)
    b.recv(MsgType.HELLO)


def test_ping_pong_hello_bye():
    a, b = loopback_pair()
    _session(a, b)
    a.send(MsgType.BYE)
    assert b.recv(MsgType.BYE).msg_type == MsgType.BYE
    b.send(MsgType.BYE)
    a.recv(MsgType.BYE)


def test_hello_must_come_first_and_bye_last():
    a, b = loopback_pair()
    a.send(MsgType.OPEN_VAL)
    with pytest.raises(ProtocolError):
        b.recv()
    a, b = loopback_pair()
    _session(a, b)
    a.send(MsgType.BYE)
    a.send(MsgType.OPEN_VAL)
    b.recv()
    with pytest.raises(ProtocolError):
        b.recv()


def test_wrong_type_is_desync():
    a, b = loopback_pair()
    _session(a, b)
    a.send(MsgType.TRIPLE)
    with pytest.raises(ChannelDesync):
        b.recv(MsgType.OPEN_VAL)


def test_interleaved_sessions_rejected():
    a, b = loopback_pair()
    # a second sender writing into the same stream restarts at seq 0
    intruder = LoopbackChannel(queue.Queue(), a._outbox, name="intruder")
    _session(a, b)
    intruder.send(MsgType.HELLO)
    with pytest.raises(SeqGap):
        b.recv()


def test_timeout_is_desync():
    a, b = loopback_pair(timeout=0.05)
    with pytest.raises(ChannelDesync):
        b.recv()


def test_fresh_stats_zero():
    a, _ = loopback_pair()
    s = stats_snapshot(a)
    assert (s.bytes_sent, s.bytes_received, s.frames_sent, s.frames_received, s.open_rounds) == (0, 0, 0, 0, 0)
    assert not s.per_tag


def test_stats_counting_and_tags():
    a, b = loopback_pair()
    _session(a, b)
    a.tag = "gadget"
    a.send(MsgType.OPEN_VAL, b"12345")
    b.recv(MsgType.OPEN_VAL)
    s = a.stats_snapshot()
    assert s.frames_sent == 2 and s.open_rounds == 1
    assert s.bytes_sent == 2 * HEADER_SIZE + 5
    assert s.per_tag["gadget"] == HEADER_SIZE + 5
    assert b.stats_snapshot().bytes_received == s.bytes_sent


def _roundtrip_share(a, b, m):
    send_share_matrix(ShareMatrix(0, m), a)
    return recv_share_matrix(b, party=1, frac=24)


def test_share_matrix_roundtrip_loopback():
    a, b = loopback_pair()
    _session(a, b)
    one = np.array([[42]], dtype=np.uint64)
    assert np.array_equal(_roundtrip_share(a, b, one).data, one)
    empty = np.zeros((0, 5), dtype=np.uint64)
    got = _roundtrip_share(a, b, empty)
    assert got.shape == (0, 5)
    send_share_matrix(ShareMatrix(0, one), a)
    with pytest.raises(DimHeaderMismatch):
        recv_share_matrix(b, 1, 24, shape=(2, 2))


def test_share_matrix_loopback_vs_tcp():
    m = random_ring(np.random.default_rng(1), (16, 16))
    la, lb = loopback_pair()
    ta, tb = tcp_pair()
    try:
        for a, b in ((la, lb), (ta, tb)):
            _session(a, b)
        got_l = _roundtrip_share(la, lb, m).data
        got_t = _roundtrip_share(ta, tb, m).data
        assert np.array_equal(got_l, m) and np.array_equal(got_t, m)
        assert la.stats_snapshot().bytes_sent == ta.stats_snapshot().bytes_sent
    finally:
        ta.close()
        tb.close()


def test_tcp_large_frame_and_fifo():
    a, b = tcp_pair()
    try:
        _session(a, b)
        big = random_ring(np.random.default_rng(2), (512, 512))
        t = threading.Thread(target=lambda: [send_share_matrix(ShareMatrix(0, big), a) for _ in range(3)])
        t.start()
        for _ in range(3):
            assert np.array_equal(recv_share_matrix(b, 1, 24).data, big)
        t.join()
    finally:
        a.close()
        b.close()
