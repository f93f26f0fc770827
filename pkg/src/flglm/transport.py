"""Length-prefixed binary wire protocol.

Frame (all integers little-endian)::

    offset  size  field
    0       4     magic  b"FLGM"
    4       2     version (1)
    6       2     msg_type
    8       4     payload_len
    12      n     payload
    12+n    4     CRC32(payload)

Tensors travel as raw little-endian float32 (or float64) with the shape
sent as a u32 list; the data bytes are sealed by the session cipher.
"""

from __future__ import annotations

import os
import queue
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass, fields

import numpy as np

MAGIC = b"FLGM"
VERSION = 1
HEADER = struct.Struct("<4sHHI")
CRC = struct.Struct("<I")
DEFAULT_PORT = 7788
BIND_ENV = "FLGLM_BIND"

DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
DTYPE_IDS = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class FramingError(ValueError):
    """Bad magic, version, checksum, or a truncated frame."""


class ProtocolViolation(ValueError):
    """Frame is intact but its contents break the protocol."""


class ConnectionClosed(ConnectionError):
    pass


# ---------------------------------------------------------------- messages


@dataclass
class Hello:
    client_id: int
    n: int
    e: int


@dataclass
class KeyAccept:
    wrapped_session_key: int


@dataclass
class SmashedData:
    client_id: int
    round: int
    dtype: int
    shape: tuple
    sealed_tensor: bytes


@dataclass
class ActivationReturn:
    round: int
    dtype: int
    shape: tuple
    sealed_tensor: bytes


@dataclass
class GradientUpload:
    round: int
    dtype: int
    shape: tuple
    sealed_tensor: bytes


@dataclass
class GradientReturn:
    round: int
    dtype: int
    shape: tuple
    sealed_tensor: bytes


@dataclass
class ParamSync:
    param_set_id: int
    sealed_blob: bytes


@dataclass
class Ack:
    round: int


@dataclass
class ProtocolError:
    code: int
    detail: str


# error codes carried by ProtocolError
ERR_SHAPE = 1
ERR_STALE_ROUND = 2
ERR_AUTH = 3
ERR_UNEXPECTED = 4
ERR_SHUTDOWN = 5

MSG_TYPES = {
    1: Hello, 2: KeyAccept, 3: SmashedData, 4: ActivationReturn, 5: GradientUpload,
    6: GradientReturn, 7: ParamSync, 8: Ack, 9: ProtocolError,
}
TYPE_IDS = {cls: k for k, cls in MSG_TYPES.items()}
TENSOR_MESSAGES = (SmashedData, ActivationReturn, GradientUpload, GradientReturn)
SERVER_INBOUND = (Hello, SmashedData, GradientUpload, ParamSync, Ack, ProtocolError)


# ---------------------------------------------------------------- primitives


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise FramingError("payload truncated")
        out = self.buf[self.off:self.off + n].tobytes()
        self.off += n
        return out

    def unpack(self, fmt: str):
        s = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(s))

    def blob(self) -> bytes:
        (n,) = self.unpack("<I")
        return self.take(n)

    def done(self):
        if self.off != len(self.buf):
            raise FramingError(f"{len(self.buf) - self.off} trailing bytes in payload")


def _blob(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + bytes(b)


def _int_bytes(x: int) -> bytes:
    return _blob(x.to_bytes(max(1, (x.bit_length() + 7) // 8), "little"))


def _shape_bytes(dtype: int, shape) -> bytes:
    return struct.pack("<BB", dtype, len(shape)) + struct.pack(f"<{len(shape)}I", *shape)


def _read_shape(r: _Reader):
    dtype, ndim = r.unpack("<BB")
    if dtype not in DTYPE_CODES:
        raise ProtocolViolation(f"unknown dtype code {dtype}")
    return dtype, tuple(r.unpack(f"<{ndim}I"))


def tensor_bytes(arr: np.ndarray, dtype=np.float32) -> bytes:
    """Raw little-endian data bytes (no header)."""
    return np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()


def tensor_from_bytes(raw: bytes, dtype: int, shape) -> np.ndarray:
    dt = DTYPE_CODES[dtype]
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(raw) != expected:
        raise ProtocolViolation(f"tensor payload is {len(raw)} bytes, shape {tuple(shape)} needs {expected}")
    return np.frombuffer(raw, dtype=dt).reshape(shape).astype(np.float64)


def encode_tensor_record(arr: np.ndarray, dtype=np.float32) -> bytes:
    """Self-describing record: dtype u8, ndim u8, dims u32[], data."""
    code = DTYPE_IDS[np.dtype(dtype)]
    return _shape_bytes(code, arr.shape) + tensor_bytes(arr, dtype)


def decode_tensor_records(buf: bytes) -> list[np.ndarray]:
    r = _Reader(buf)
    out = []
    while r.off < len(r.buf):
        code, shape = _read_shape(r)
        n = int(np.prod(shape, dtype=np.int64)) * DTYPE_CODES[code].itemsize
        out.append(tensor_from_bytes(r.take(n), code, shape))
    return out


def encode_params(params: dict[str, np.ndarray], dtype=np.float64) -> bytes:
    parts = [struct.pack("<I", len(params))]
    for name, arr in params.items():
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(encode_tensor_record(np.asarray(arr), dtype))
    return b"".join(parts)


def decode_params(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    (count,) = r.unpack("<I")
    out = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code, shape = _read_shape(r)
        n = int(np.prod(shape, dtype=np.int64)) * DTYPE_CODES[code].itemsize
        out[name] = tensor_from_bytes(r.take(n), code, shape)
    r.done()
    return out


# ---------------------------------------------------------------- codec


def _encode_payload(msg) -> bytes:
    if isinstance(msg, Hello):
        return struct.pack("<I", msg.client_id) + _int_bytes(msg.n) + _int_bytes(msg.e)
    if isinstance(msg, KeyAccept):
        return _int_bytes(msg.wrapped_session_key)
    if isinstance(msg, SmashedData):
        return (struct.pack("<II", msg.client_id, msg.round) + _shape_bytes(msg.dtype, msg.shape)
                + _blob(msg.sealed_tensor))
    if isinstance(msg, (ActivationReturn, GradientUpload, GradientReturn)):
        return struct.pack("<I", msg.round) + _shape_bytes(msg.dtype, msg.shape) + _blob(msg.sealed_tensor)
    if isinstance(msg, ParamSync):
        return struct.pack("<I", msg.param_set_id) + _blob(msg.sealed_blob)
    if isinstance(msg, Ack):
        return struct.pack("<I", msg.round)
    if isinstance(msg, ProtocolError):
        return struct.pack("<H", msg.code) + _blob(msg.detail.encode())
    raise ProtocolViolation(f"cannot encode {type(msg).__name__}")


def _decode_payload(cls, payload: bytes):
    r = _Reader(payload)
    if cls is Hello:
        (cid,) = r.unpack("<I")
        n = int.from_bytes(r.blob(), "little")
        e = int.from_bytes(r.blob(), "little")
        msg = Hello(cid, n, e)
    elif cls is KeyAccept:
        msg = KeyAccept(int.from_bytes(r.blob(), "little"))
    elif cls is SmashedData:
        cid, rnd = r.unpack("<II")
        dtype, shape = _read_shape(r)
        msg = SmashedData(cid, rnd, dtype, shape, r.blob())
    elif cls in (ActivationReturn, GradientUpload, GradientReturn):
        (rnd,) = r.unpack("<I")
        dtype, shape = _read_shape(r)
        msg = cls(rnd, dtype, shape, r.blob())
    elif cls is ParamSync:
        (pid,) = r.unpack("<I")
        msg = ParamSync(pid, r.blob())
    elif cls is Ack:
        msg = Ack(*r.unpack("<I"))
    else:
        (code,) = r.unpack("<H")
        msg = ProtocolError(code, r.blob().decode())
    r.done()
    return msg


def encode(msg) -> bytes:
    payload = _encode_payload(msg)
    return HEADER.pack(MAGIC, VERSION, TYPE_IDS[type(msg)], len(payload)) + payload + CRC.pack(zlib.crc32(payload))


def parse_header(header: bytes) -> tuple[int, int]:
    if len(header) < HEADER.size:
        raise FramingError("truncated frame header")
    magic, version, mtype, plen = HEADER.unpack(header[:HEADER.size])
    if magic != MAGIC:
        raise FramingError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FramingError(f"unsupported protocol version {version}")
    return mtype, plen


def decode(buf: bytes):
    """Decode exactly one frame."""
    mtype, plen = parse_header(buf)
    end = HEADER.size + plen
    if len(buf) < end + CRC.size:
        raise FramingError("truncated frame")
    if len(buf) > end + CRC.size:
        raise FramingError("trailing bytes after frame")
    payload = buf[HEADER.size:end]
    (crc,) = CRC.unpack(buf[end:end + CRC.size])
    if crc != zlib.crc32(payload):
        raise FramingError("checksum mismatch")
    cls = MSG_TYPES.get(mtype)
    if cls is None:
        raise ProtocolViolation(f"unknown msg_type {mtype}")
    return _decode_payload(cls, payload)


def message_fields(cls) -> list[str]:
    return [f.name for f in fields(cls)]


# ---------------------------------------------------------------- sealing helpers


def seal_tensor(cls, cipher, arr: np.ndarray, round_: int, wire_dtype=np.float32, client_id: int | None = None):
    code = DTYPE_IDS[np.dtype(wire_dtype)]
    sealed = cipher.seal(tensor_bytes(arr, wire_dtype))
    if cls is SmashedData:
        return SmashedData(client_id, round_, code, tuple(arr.shape), sealed)
    return cls(round_, code, tuple(arr.shape), sealed)


def open_tensor(msg, cipher) -> np.ndarray:
    return tensor_from_bytes(cipher.open(msg.sealed_tensor), msg.dtype, msg.shape)


def quantize(arr: np.ndarray, wire_dtype=np.float32) -> np.ndarray:
    """What a tensor looks like after a wire round trip."""
    return np.asarray(arr).astype(wire_dtype).astype(np.float64)


# ---------------------------------------------------------------- connections


class Connection:
    def send(self, msg) -> None:
        raise NotImplementedError

    def recv(self, timeout: float | None = None):
        raise NotImplementedError

    def close(self) -> None:
        pass

    bytes_sent = 0
    frames_sent = 0


class LoopbackConnection(Connection):
    """In-process endpoint. Frames are still fully encoded and decoded."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False
        self.bytes_sent = 0
        self.frames_sent = 0

    def send(self, msg) -> None:
        if self._closed:
            raise ConnectionClosed("connection closed")
        frame = encode(msg)
        self.bytes_sent += len(frame)
        self.frames_sent += 1
        self._outbox.put(frame)

    def recv(self, timeout: float | None = None):
        try:
            frame = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no frame within timeout") from None
        if frame is None:
            raise ConnectionClosed("peer closed the connection")
        return decode(frame)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(None)


def loopback_pair() -> tuple[LoopbackConnection, LoopbackConnection]:
    a, b = queue.Queue(), queue.Queue()
    return LoopbackConnection(a, b), LoopbackConnection(b, a)


class StreamConnection(Connection):
    """Frames over a connected stream socket; partial reads are buffered."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._wlock = threading.Lock()
        self._buf = bytearray()
        self.bytes_sent = 0
        self.frames_sent = 0
        try:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError:
            pass

    def send(self, msg) -> None:
        frame = encode(msg)
        with self._wlock:
            try:
                self.sock.sendall(frame)
            except OSError as exc:
                raise ConnectionClosed(str(exc)) from exc
        self.bytes_sent += len(frame)
        self.frames_sent += 1

    def _fill(self, n: int) -> None:
        while len(self._buf) < n:
            try:
                chunk = self.sock.recv(max(65536, n - len(self._buf)))
            except socket.timeout:
                raise TimeoutError("no frame within timeout") from None
            except OSError as exc:
                raise ConnectionClosed(str(exc)) from exc
            if not chunk:
                raise ConnectionClosed("peer closed the connection")
            self._buf += chunk

    def recv(self, timeout: float | None = None):
        self.sock.settimeout(timeout)
        self._fill(HEADER.size)
        _, plen = parse_header(bytes(self._buf[:HEADER.size]))
        total = HEADER.size + plen + CRC.size
        self._fill(total)
        frame = bytes(self._buf[:total])
        del self._buf[:total]
        return decode(frame)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def socket_pair() -> tuple[StreamConnection, StreamConnection]:
    a, b = socket.socketpair()
    return StreamConnection(a), StreamConnection(b)


def bind_address(default: str = "127.0.0.1") -> str:
    return os.environ.get(BIND_ENV, default)


def listen(host: str | None = None, port: int = DEFAULT_PORT, backlog: int = 16) -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host or bind_address(), port))
    srv.listen(backlog)
    return srv


def accept(srv: socket.socket, timeout: float | None = None) -> StreamConnection:
    srv.settimeout(timeout)
    sock, _ = srv.accept()
    sock.settimeout(None)
    return StreamConnection(sock)


def connect(host: str, port: int = DEFAULT_PORT, timeout: float = 10.0, retry_for: float = 0.0) -> StreamConnection:
    """Open a client connection; keep retrying refused connects for ``retry_for`` seconds."""
    deadline = time.monotonic() + retry_for
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            break
        except ConnectionRefusedError:
            if time.monotonic() >= deadline:
                raise
            time.sleep(0.05)
    sock.settimeout(None)
    return StreamConnection(sock)


def tcp_pair(host: str = "127.0.0.1") -> tuple[StreamConnection, StreamConnection]:
    """A real TCP connection over an ephemeral local port."""
    srv = listen(host, 0, backlog=1)
    try:
        client = connect(host, srv.getsockname()[1])
        server = accept(srv, timeout=10.0)
    finally:
        srv.close()
    return server, client
