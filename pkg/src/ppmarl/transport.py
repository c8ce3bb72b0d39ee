"""Framed messages between player 0, player 1 and the dealer.

Wire format of one frame (all header integers big-endian)::

    u32 length | u8 msg_type | u32 session_seq | payload[length]

Matrix payloads are a sequence of blocks, each ``u32 rows | u32 cols``
(big-endian) followed by ``rows*cols`` little-endian 8-byte elements in
row-major order.
"""

from __future__ import annotations

import copy
import enum
import queue
import socket
import struct
import threading
import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .algebra import ShareMatrix
from .errors import (
    BadType,
    ChannelDesync,
    DimHeaderMismatch,
    FrameTooLarge,
    ProtocolError,
    SeqGap,
    Truncated,
)

HEADER = struct.Struct(">IBI")
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 64 * 1024 * 1024
DEFAULT_TIMEOUT = 30.0

_DIMS = struct.Struct(">II")


class MsgType(enum.IntEnum):
    HELLO = 0
    INDEX_SET = 1
    SHARE_MATRIX = 2
    OPEN_REQ = 3
    OPEN_VAL = 4
    TRIPLE = 5
    NONLIN_REQ = 6
    NONLIN_RESP = 7
    BYE = 8
    # driver <-> engine control plane
    CALL = 16
    RESULT = 17


_VALID_TYPES = {int(t) for t in MsgType}


@dataclass(frozen=True)
class Message:
    msg_type: MsgType
    seq: int
    payload: bytes = b""


def encode_frame(msg_type: int, seq: int, payload: bytes = b"", max_payload: int = MAX_PAYLOAD) -> bytes:
    if int(msg_type) not in _VALID_TYPES:
        raise BadType(f"unknown message type {msg_type}")
    if len(payload) > max_payload:
        raise FrameTooLarge(f"payload of {len(payload)} bytes exceeds {max_payload}")
    return HEADER.pack(len(payload), int(msg_type), seq) + payload


def decode_frame(
    buf: bytes, max_payload: int = MAX_PAYLOAD, expected_seq: int | None = None
) -> tuple[Message, bytes]:
    """Parse one frame off the front of ``buf``; returns (message, remaining bytes)."""
    if len(buf) < HEADER_SIZE:
        raise Truncated(f"need {HEADER_SIZE} header bytes, have {len(buf)}")
    length, mtype, seq = HEADER.unpack_from(buf)
    if length > max_payload:
        raise FrameTooLarge(f"declared payload {length} exceeds {max_payload}")
    end = HEADER_SIZE + length
    if len(buf) < end:
        raise Truncated(f"declared payload {length} bytes, only {len(buf) - HEADER_SIZE} present")
    if mtype not in _VALID_TYPES:
        raise BadType(f"unknown message type {mtype}")
    if expected_seq is not None and seq != expected_seq:
        raise SeqGap(f"expected seq {expected_seq}, got {seq}")
    return Message(MsgType(mtype), seq, bytes(buf[HEADER_SIZE:end])), bytes(buf[end:])


# ---------------------------------------------------------------- payload helpers


def pack_matrices(mats, dtype: str = "<u8") -> bytes:
    parts = []
    for m in mats:
        m = np.asarray(m)
        if m.ndim != 2:
            raise ValueError("only 2-D matrices can be framed")
        parts.append(_DIMS.pack(*m.shape))
        parts.append(np.ascontiguousarray(m, dtype=dtype).tobytes())
    return b"".join(parts)


def unpack_matrices(payload: bytes, dtype: str = "<u8", count: int | None = None) -> list[np.ndarray]:
    out = []
    pos = 0
    width = np.dtype(dtype).itemsize
    native = np.uint64 if dtype.endswith("u8") else np.float64
    while pos < len(payload):
        if len(payload) - pos < _DIMS.size:
            raise DimHeaderMismatch("dangling bytes where a dims header was expected")
        rows, cols = _DIMS.unpack_from(payload, pos)
        pos += _DIMS.size
        nbytes = rows * cols * width
        if len(payload) - pos < nbytes:
            raise DimHeaderMismatch(f"dims header {rows}x{cols} exceeds the payload")
        block = np.frombuffer(payload, dtype=dtype, count=rows * cols, offset=pos)
        out.append(block.astype(native).reshape(rows, cols))
        pos += nbytes
    if count is not None and len(out) != count:
        raise DimHeaderMismatch(f"expected {count} matrices, got {len(out)}")
    return out


def pack_indices(indices) -> bytes:
    idx = np.asarray(indices, dtype=np.int64)
    return struct.pack(">I", idx.size) + idx.astype("<u4").tobytes()


def unpack_indices(payload: bytes) -> list[int]:
    if len(payload) < 4:
        raise Truncated("index-set payload lacks its count")
    (n,) = struct.unpack_from(">I", payload)
    if len(payload) != 4 + 4 * n:
        raise DimHeaderMismatch(f"index set announces {n} entries, payload has {(len(payload) - 4) // 4}")
    return np.frombuffer(payload, dtype="<u4", offset=4).astype(np.int64).tolist()


# ---------------------------------------------------------------- stats


@dataclass
class ChannelStats:
    bytes_sent: int = 0
    bytes_received: int = 0
    frames_sent: int = 0
    frames_received: int = 0
    open_rounds: int = 0
    sent_by_type: Counter = field(default_factory=Counter)
    received_by_type: Counter = field(default_factory=Counter)
    # call-site tag -> bytes moved (both directions)
    per_tag: Counter = field(default_factory=Counter)

    @property
    def total_bytes(self) -> int:
        return self.bytes_sent + self.bytes_received

    def merged(self, other: "ChannelStats") -> "ChannelStats":
        out = copy.deepcopy(self)
        out.bytes_sent += other.bytes_sent
        out.bytes_received += other.bytes_received
        out.frames_sent += other.frames_sent
        out.frames_received += other.frames_received
        out.open_rounds += other.open_rounds
        out.sent_by_type.update(other.sent_by_type)
        out.received_by_type.update(other.received_by_type)
        out.per_tag.update(other.per_tag)
        return out

    def to_dict(self) -> dict:
        return {
            "bytes_sent": self.bytes_sent,
            "bytes_received": self.bytes_received,
            "frames_sent": self.frames_sent,
            "frames_received": self.frames_received,
            "open_rounds": self.open_rounds,
            "sent_by_type": dict(self.sent_by_type),
            "received_by_type": dict(self.received_by_type),
            "per_tag": dict(self.per_tag),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelStats":
        return cls(
            d["bytes_sent"],
            d["bytes_received"],
            d["frames_sent"],
            d["frames_received"],
            d["open_rounds"],
            Counter(d["sent_by_type"]),
            Counter(d["received_by_type"]),
            Counter(d["per_tag"]),
        )


# ---------------------------------------------------------------- channels


class Channel:
    """One endpoint of a FIFO, lossless, sequence-checked frame stream.

    A channel belongs to one protocol thread at a time; only the stats are
    guarded so that snapshots from other threads are consistent.
    """

    def __init__(self, name: str = "", max_payload: int = MAX_PAYLOAD, timeout: float = DEFAULT_TIMEOUT):
        self.name = name
        self.max_payload = max_payload
        self.timeout = timeout
        self.tag: str | None = None
        self._stats = ChannelStats()
        self._stats_lock = threading.Lock()
        self._send_seq = 0
        self._recv_seq = 0
        self._hello_seen = False
        self._bye_seen = False

    # transport-specific
    def _write(self, frame: bytes) -> None:
        raise NotImplementedError

    def _read_frame(self) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def send(self, msg_type: MsgType, payload: bytes = b"") -> None:
        frame = encode_frame(msg_type, self._send_seq, payload, self.max_payload)
        self._write(frame)
        self._send_seq += 1
        with self._stats_lock:
            s = self._stats
            s.bytes_sent += len(frame)
            s.frames_sent += 1
            s.sent_by_type[MsgType(msg_type).name] += 1
            if msg_type == MsgType.OPEN_VAL:
                s.open_rounds += 1
            if self.tag is not None:
                s.per_tag[self.tag] += len(frame)

    def recv(self, *expect: MsgType) -> Message:
        raw = self._read_frame()
        msg, rest = decode_frame(raw, self.max_payload, expected_seq=self._recv_seq)
        if rest:
            raise ProtocolError("frame reader returned trailing bytes")
        self._recv_seq += 1
        with self._stats_lock:
            s = self._stats
            s.bytes_received += len(raw)
            s.frames_received += 1
            s.received_by_type[msg.msg_type.name] += 1
            if self.tag is not None:
                s.per_tag[self.tag] += len(raw)
        if self._bye_seen:
            raise ProtocolError(f"{self.name}: frame after BYE")
        if not self._hello_seen:
            if msg.msg_type != MsgType.HELLO:
                raise ProtocolError(f"{self.name}: first frame must be HELLO, got {msg.msg_type.name}")
            self._hello_seen = True
        if msg.msg_type == MsgType.BYE:
            self._bye_seen = True
        if expect and msg.msg_type not in expect:
            raise ChannelDesync(
                f"{self.name}: expected {[e.name for e in expect]}, got {msg.msg_type.name} (seq {msg.seq})"
            )
        return msg

    def stats_snapshot(self) -> ChannelStats:
        with self._stats_lock:
            return copy.deepcopy(self._stats)


def stats_snapshot(channel: Channel) -> ChannelStats:
    return channel.stats_snapshot()


class LoopbackChannel(Channel):
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, **kw):
        super().__init__(**kw)
        self._inbox = inbox
        self._outbox = outbox

    def _write(self, frame: bytes) -> None:
        self._outbox.put(frame)

    def _read_frame(self) -> bytes:
        try:
            return self._inbox.get(timeout=self.timeout)
        except queue.Empty:
            raise ChannelDesync(f"{self.name}: no frame within {self.timeout}s") from None


def loopback_pair(name: str = "loop", timeout: float = DEFAULT_TIMEOUT) -> tuple[LoopbackChannel, LoopbackChannel]:
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    a = LoopbackChannel(b_to_a, a_to_b, name=f"{name}:a", timeout=timeout)
    b = LoopbackChannel(a_to_b, b_to_a, name=f"{name}:b", timeout=timeout)
    return a, b


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must be HOST:PORT, got {addr!r}")
    return host, int(port)


class TcpChannel(Channel):
    def __init__(self, sock: socket.socket, **kw):
        super().__init__(**kw)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(self.timeout)
        self._sock = sock

    def _write(self, frame: bytes) -> None:
        self._sock.sendall(frame)

    def _recv_exact(self, n: int) -> bytes:
        chunks = []
        while n:
            try:
                chunk = self._sock.recv(n)
            except socket.timeout:
                raise ChannelDesync(f"{self.name}: no data within {self.timeout}s") from None
            if not chunk:
                raise Truncated(f"{self.name}: connection closed mid-frame")
            chunks.append(chunk)
            n -= len(chunk)
        return b"".join(chunks)

    def _read_frame(self) -> bytes:
        header = self._recv_exact(HEADER_SIZE)
        (length, _, _) = HEADER.unpack(header)
        if length > self.max_payload:
            raise FrameTooLarge(f"{self.name}: declared payload {length} exceeds {self.max_payload}")
        return header + self._recv_exact(length)

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


def tcp_listen(addr: str) -> socket.socket:
    host, port = parse_addr(addr)
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(8)
    return srv


def tcp_accept(srv: socket.socket, name: str = "tcp", timeout: float = DEFAULT_TIMEOUT) -> TcpChannel:
    srv.settimeout(timeout)
    sock, _ = srv.accept()
    return TcpChannel(sock, name=name, timeout=timeout)


def tcp_connect(addr: str, name: str = "tcp", timeout: float = DEFAULT_TIMEOUT, retry_for: float = 10.0) -> TcpChannel:
    host, port = parse_addr(addr)
    deadline = time.monotonic() + retry_for
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            return TcpChannel(sock, name=name, timeout=timeout)
        except (ConnectionRefusedError, OSError):
            if time.monotonic() > deadline:
                raise
            time.sleep(0.05)


def tcp_pair(name: str = "tcp", timeout: float = DEFAULT_TIMEOUT) -> tuple[TcpChannel, TcpChannel]:
    """Two connected endpoints over localhost TCP (for tests and in-process runs)."""
    srv = tcp_listen("127.0.0.1:0")
    port = srv.getsockname()[1]
    client_box: list = []
    t = threading.Thread(target=lambda: client_box.append(tcp_connect(f"127.0.0.1:{port}", f"{name}:a", timeout)))
    t.start()
    server_side = tcp_accept(srv, f"{name}:b", timeout)
    t.join()
    srv.close()
    return client_box[0], server_side


def free_port() -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


# ---------------------------------------------------------------- typed helpers


def send_share_matrix(m: ShareMatrix, channel: Channel, msg_type: MsgType = MsgType.SHARE_MATRIX) -> None:
    channel.send(msg_type, pack_matrices([m.data]))


def recv_share_matrix(
    channel: Channel, party: int, frac: int, msg_type: MsgType = MsgType.SHARE_MATRIX, shape=None
) -> ShareMatrix:
    msg = channel.recv(msg_type)
    (data,) = unpack_matrices(msg.payload, count=1)
    if shape is not None and data.shape != tuple(shape):
        raise DimHeaderMismatch(f"expected {tuple(shape)}, received {data.shape}")
    return ShareMatrix(party, data, frac)
