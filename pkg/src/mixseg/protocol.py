"""Wire protocol and client/server plumbing.

Frame layout: u32 LE length prefix, then a 19-byte header (magic ``MXSP``,
version u16, msg_type u8, session_id u64, patch_index u32), then one MXSG
tensor payload. The length prefix counts header plus payload exactly.

Message types: 0 SegmentRequest (payload x_mix), 1 SegmentResponse (payload
predicted label field), 2 Error (code in patch_index, empty payload), 3 Hello,
4 Bye, 5 TrainRequest (payload stacks x_mix and y_mix channels; only honored
when the server runs with training enabled).

The client owns the mixing key. Requests carry only mixed intensities; a
firewall assertion at the serialization boundary refuses to send any frame
containing the serialized reference patches, reference labels, or alpha.
"""
from __future__ import annotations

import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MixsegError, SessionError
from .mixing import MixKey, naive_unmix, tta_decode, tta_encode
from .rng import substream
from .tensorio import TensorFormatError, tensor_bytes, tensor_from_bytes
from .volume import LabelField, PatchGrid, Volume, extract_patches, reassemble

MAGIC = b"MXSP"
VERSION = 1
_HEADER = struct.Struct("<4sHBQI")
_PREFIX = struct.Struct("<I")
MAX_FRAME_BYTES = 1 << 28

MSG_SEGMENT_REQUEST = 0
MSG_SEGMENT_RESPONSE = 1
MSG_ERROR = 2
MSG_HELLO = 3
MSG_BYE = 4
MSG_TRAIN_REQUEST = 5
_VALID_TYPES = frozenset(
    {MSG_SEGMENT_REQUEST, MSG_SEGMENT_RESPONSE, MSG_ERROR, MSG_HELLO, MSG_BYE, MSG_TRAIN_REQUEST}
)

ERR_MALFORMED = 0
ERR_BACKEND = 1
ERR_TRAINING_DISABLED = 2
ERR_UNSUPPORTED = 3
ERR_BAD_REQUEST = 4


class ProtocolError(MixsegError):
    """Base for wire-level failures."""


class BadMagicError(ProtocolError):
    pass


class VersionMismatchError(ProtocolError):
    pass


class TruncatedFrameError(ProtocolError):
    pass


class LengthMismatchError(ProtocolError):
    pass


class UnknownMessageTypeError(ProtocolError):
    pass


class MalformedPayloadError(ProtocolError):
    pass


_EMPTY = np.zeros((0,), dtype=np.float64)


@dataclass(frozen=True)
class WireMessage:
    msg_type: int
    session_id: int
    patch_index: int
    payload: np.ndarray = field(default_factory=lambda: _EMPTY)

    def __eq__(self, other):
        if not isinstance(other, WireMessage):
            return NotImplemented
        return (
            self.msg_type == other.msg_type
            and self.session_id == other.session_id
            and self.patch_index == other.patch_index
            and self.payload.dtype == other.payload.dtype
            and self.payload.shape == other.payload.shape
            and np.array_equal(self.payload, other.payload)
        )


def encode_message(msg: WireMessage) -> bytes:
    if msg.msg_type not in _VALID_TYPES:
        raise UnknownMessageTypeError(f"msg_type {msg.msg_type} not in {sorted(_VALID_TYPES)}")
    body = _HEADER.pack(MAGIC, VERSION, msg.msg_type, msg.session_id, msg.patch_index)
    body += tensor_bytes(np.asarray(msg.payload))
    return _PREFIX.pack(len(body)) + body


def decode_message(frame: bytes) -> WireMessage:
    """Decode one complete frame (length prefix included)."""
    if len(frame) < _PREFIX.size:
        raise TruncatedFrameError(f"frame of {len(frame)} bytes lacks a length prefix")
    (length,) = _PREFIX.unpack(frame[: _PREFIX.size])
    body = frame[_PREFIX.size:]
    if len(body) < length:
        raise TruncatedFrameError(f"length prefix says {length} bytes, got {len(body)}")
    if len(body) > length:
        raise LengthMismatchError(f"length prefix says {length} bytes, frame carries {len(body)}")
    if length < _HEADER.size:
        raise TruncatedFrameError(f"body of {length} bytes cannot hold a {_HEADER.size}-byte header")
    magic, version, msg_type, session_id, patch_index = _HEADER.unpack(body[: _HEADER.size])
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"version {version} unsupported (expected {VERSION})")
    if msg_type not in _VALID_TYPES:
        raise UnknownMessageTypeError(f"unknown msg_type {msg_type}")
    try:
        payload = tensor_from_bytes(body[_HEADER.size:])
    except TensorFormatError as exc:
        raise MalformedPayloadError(str(exc)) from exc
    return WireMessage(msg_type=msg_type, session_id=session_id, patch_index=patch_index,
                       payload=payload)


# ---------------------------------------------------------------------------
# Socket helpers


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    chunks = []
    remaining = n
    while remaining > 0:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            return None
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def _recv_frame(sock: socket.socket) -> bytes | None:
    """Read one full frame (prefix + body); None on clean EOF."""
    prefix = _recv_exact(sock, _PREFIX.size)
    if prefix is None:
        return None
    (length,) = _PREFIX.unpack(prefix)
    if length > MAX_FRAME_BYTES:
        raise ProtocolError(f"frame of {length} bytes exceeds limit {MAX_FRAME_BYTES}")
    body = _recv_exact(sock, length)
    if body is None:
        return None
    return prefix + body


def _send_frame(sock: socket.socket, frame: bytes) -> None:
    sock.sendall(frame)


# ---------------------------------------------------------------------------
# Server


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        server: SegmentationServer = self.server
        while True:
            try:
                frame = _recv_frame(sock)
            except (ProtocolError, OSError):
                return
            if frame is None:
                return
            try:
                msg = decode_message(frame)
            except ProtocolError:
                _send_frame(sock, encode_message(
                    WireMessage(MSG_ERROR, 0, ERR_MALFORMED)))
                continue
            if not self._dispatch(sock, server, msg):
                return

    def _dispatch(self, sock, server, msg) -> bool:
        sid = msg.session_id
        if msg.msg_type == MSG_HELLO:
            _send_frame(sock, encode_message(WireMessage(MSG_HELLO, sid, 0)))
            return True
        if msg.msg_type == MSG_BYE:
            _send_frame(sock, encode_message(WireMessage(MSG_BYE, sid, 0)))
            return False
        if msg.msg_type == MSG_SEGMENT_REQUEST:
            try:
                probs = server.backend.segment(msg.payload, sid, msg.patch_index)
                reply = WireMessage(MSG_SEGMENT_RESPONSE, sid, msg.patch_index,
                                    np.asarray(probs))
            except MixsegError:
                reply = WireMessage(MSG_ERROR, sid, ERR_BACKEND)
            except Exception:
                reply = WireMessage(MSG_ERROR, sid, ERR_BACKEND)
            _send_frame(sock, encode_message(reply))
            return True
        if msg.msg_type == MSG_TRAIN_REQUEST:
            if not server.training_enabled:
                _send_frame(sock, encode_message(
                    WireMessage(MSG_ERROR, sid, ERR_TRAINING_DISABLED)))
                return True
            payload = msg.payload
            if payload.ndim != 4 or payload.shape[0] < 2:
                _send_frame(sock, encode_message(WireMessage(MSG_ERROR, sid, ERR_BAD_REQUEST)))
                return True
            x_mix, y_mix = payload[0], payload[1:]
            with server.lock:
                server.training_samples.append((sid, msg.patch_index, x_mix, y_mix))
            _send_frame(sock, encode_message(
                WireMessage(MSG_SEGMENT_RESPONSE, sid, msg.patch_index, _EMPTY)))
            return True
        _send_frame(sock, encode_message(WireMessage(MSG_ERROR, sid, ERR_UNSUPPORTED)))
        return True


class SegmentationServer(socketserver.ThreadingTCPServer):
    """Threaded request/response service over a SegmentationBackend.

    Sessions (connections) are isolated; the backend is shared and must be
    read-only at inference. Training uploads accumulate in `training_samples`
    and are only accepted when constructed with training=True.
    """

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, listen_addr, backend, training: bool = False):
        super().__init__(listen_addr, _Handler)
        self.backend = backend
        self.training_enabled = training
        self.training_samples: list = []
        self.lock = threading.Lock()

    @property
    def addr(self) -> tuple[str, int]:
        return self.server_address[:2]


def serve(backend, listen_addr=("127.0.0.1", 0), training: bool = False) -> SegmentationServer:
    """Start a server on a daemon thread; returns the running server object."""
    server = SegmentationServer(tuple(listen_addr), backend, training=training)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    server._thread = thread
    return server


def shutdown(server: SegmentationServer) -> None:
    server.shutdown()
    server.server_close()


# ---------------------------------------------------------------------------
# Client


@dataclass
class ClientSession:
    """One client connection: owns the key, numbers requests, checks the firewall.

    patch_index encodes (patch id, reference id) as patch_id * K + ref_id, so
    responses can arrive in any order.
    """

    server_addr: tuple[str, int]
    key: MixKey
    grid: PatchGrid
    session_id: int | None = None
    timeout: float = 30.0
    retries: int = 3
    capture: list | None = None

    def __post_init__(self):
        if self.session_id is None:
            rng = substream(self.key.rng_seed, "session-id")
            self.session_id = int(rng.integers(0, 2**63, dtype=np.uint64))
        self._key_blobs = self.key.key_material()
        self._sock = None
        self.pending: dict[int, int] = {}    # patch_index -> reference id

    def connect(self) -> None:
        self._sock = socket.create_connection(self.server_addr, timeout=self.timeout)
        self._send(WireMessage(MSG_HELLO, self.session_id, 0))
        reply = self._recv()
        if reply is None or reply.msg_type != MSG_HELLO:
            raise SessionError("handshake failed")

    def close(self) -> None:
        if self._sock is None:
            return
        try:
            self._send(WireMessage(MSG_BYE, self.session_id, 0))
            self._recv()
        except (OSError, SessionError):
            pass
        finally:
            self._sock.close()
            self._sock = None

    def _assert_no_key_material(self, frame: bytes) -> None:
        for blob in self._key_blobs:
            if blob in frame:
                raise SessionError("refusing to send a frame containing key material")

    def _send(self, msg: WireMessage) -> None:
        frame = encode_message(msg)
        if msg.msg_type in (MSG_SEGMENT_REQUEST, MSG_TRAIN_REQUEST, MSG_HELLO, MSG_BYE):
            if msg.msg_type == MSG_SEGMENT_REQUEST:
                self._assert_no_key_material(frame)
            if self.capture is not None:
                self.capture.append(frame)
        _send_frame(self._sock, frame)

    def _recv(self) -> WireMessage | None:
        frame = _recv_frame(self._sock)
        if frame is None:
            return None
        return decode_message(frame)

    def request_patch(self, patch_index: int, x_mix: np.ndarray) -> None:
        self.pending[patch_index] = patch_index % self.key.k
        self._send(WireMessage(MSG_SEGMENT_REQUEST, self.session_id, patch_index,
                               np.asarray(x_mix, dtype=np.float64)))

    def _store(self, reply: WireMessage, into: dict) -> None:
        if reply.msg_type == MSG_ERROR:
            raise SessionError(f"server error code {reply.patch_index}")
        if reply.msg_type == MSG_SEGMENT_RESPONSE and reply.patch_index not in into:
            into[reply.patch_index] = reply.payload
            self.pending.pop(reply.patch_index, None)

    def drain_ready(self, into: dict) -> None:
        """Consume every response already buffered, without blocking."""
        import select

        while True:
            ready, _, _ = select.select([self._sock], [], [], 0)
            if not ready:
                return
            reply = self._recv()
            if reply is None:
                raise SessionError("server closed the connection mid-session")
            self._store(reply, into)

    def collect(self, expected: set[int], into: dict) -> None:
        """Block until all expected patch_index values arrived or a recv times out."""
        while expected - into.keys():
            try:
                reply = self._recv()
            except (TimeoutError, socket.timeout):
                return
            if reply is None:
                raise SessionError("server closed the connection mid-session")
            self._store(reply, into)


def client_segment_volume(
    vol: Volume,
    key: MixKey,
    server_addr: tuple[str, int],
    grid: PatchGrid | None = None,
    k: int | None = None,
    decoder: str = "naive",
    unmixer=None,
    timeout: float = 30.0,
    retries: int = 3,
    session_id: int | None = None,
    capture: list | None = None,
) -> LabelField:
    """Full client pipeline: extract, encode, ship, decode, reassemble.

    The server sees only mixed intensities; unmixing happens here with the
    private key, either in closed form or through the learned unmixer.
    """
    if k is None:
        k = key.k
    if not 1 <= k <= key.k:
        raise ConfigError(f"K must lie in [1, {key.k}], got {k}")
    if decoder not in ("naive", "learned"):
        raise ConfigError(f"decoder must be 'naive' or 'learned', got {decoder!r}")
    if decoder == "learned" and unmixer is None:
        raise ConfigError("learned decoding needs an unmixer network")
    if grid is None:
        grid = PatchGrid.cover(vol.dims, key.patch_dims)

    patches = extract_patches(vol, grid)
    session = ClientSession(tuple(server_addr), key, grid, session_id=session_id,
                            timeout=timeout, retries=retries, capture=capture)
    session.connect()
    try:
        requests: dict[int, np.ndarray] = {}
        for pid, patch in enumerate(patches):
            encoded = tta_encode(patch.data, key)[:k]
            for rid, pair in enumerate(encoded):
                requests[pid * key.k + rid] = pair.x_mix

        responses: dict[int, np.ndarray] = {}
        missing = set(requests)
        for attempt in range(retries + 1):
            for idx in sorted(missing):
                session.request_patch(idx, requests[idx])
                # drain buffered responses while sending so neither side's
                # socket buffer fills up during a fully pipelined burst
                session.drain_ready(responses)
            session.collect(missing, responses)
            missing = set(requests) - set(responses)
            if not missing:
                break
        if missing:
            raise SessionError(f"{len(missing)} requests unanswered after {retries} retries")

        decoded_patches = []
        for pid, patch in enumerate(patches):
            per_ref = []
            for rid in range(k):
                y_mix_hat = responses[pid * key.k + rid]
                y_ref = key.references[rid][1]
                if decoder == "naive":
                    per_ref.append(naive_unmix(y_mix_hat, y_ref, key.alpha))
                else:
                    from .backends import unmix_net_apply

                    per_ref.append(unmix_net_apply(unmixer, y_mix_hat, y_ref, key.alpha))
            decoded_patches.append((patch.origin, tta_decode(per_ref)))
    finally:
        session.close()

    return reassemble(decoded_patches, vol.dims)


def segment_volume_local(
    vol: Volume,
    key: MixKey,
    backend,
    grid: PatchGrid | None = None,
    k: int | None = None,
    decoder: str = "naive",
    unmixer=None,
    session_id: int = 0,
    collect_per_reference: bool = False,
):
    """Same pipeline as client_segment_volume but calling the backend in-process.

    Used by experiments where socket transport adds nothing. With
    collect_per_reference=True, returns (LabelField, per-reference decoded
    predictions by patch) so ensemble sweeps can reuse one pass.
    """
    if k is None:
        k = key.k
    if not 1 <= k <= key.k:
        raise ConfigError(f"K must lie in [1, {key.k}], got {k}")
    if decoder == "learned" and unmixer is None:
        raise ConfigError("learned decoding needs an unmixer network")
    if grid is None:
        grid = PatchGrid.cover(vol.dims, key.patch_dims)

    from .backends import unmix_net_apply

    patches = extract_patches(vol, grid)
    decoded_patches = []
    per_reference = []
    for pid, patch in enumerate(patches):
        encoded = tta_encode(patch.data, key)[:k]
        per_ref = []
        for rid, pair in enumerate(encoded):
            y_mix_hat = backend.segment(pair.x_mix, session_id, pid * key.k + rid)
            y_ref = key.references[rid][1]
            if decoder == "naive":
                per_ref.append(naive_unmix(y_mix_hat, y_ref, key.alpha))
            else:
                per_ref.append(unmix_net_apply(unmixer, y_mix_hat, y_ref, key.alpha))
        decoded_patches.append((patch.origin, tta_decode(per_ref)))
        if collect_per_reference:
            per_reference.append(per_ref)

    field_out = reassemble(decoded_patches, vol.dims)
    if collect_per_reference:
        return field_out, per_reference
    return field_out


def send_training_batch(server_addr, samples, session_id: int = 0, timeout: float = 30.0) -> int:
    """Upload (x_mix, y_mix) pairs to a training-enabled server; returns ack count."""
    sock = socket.create_connection(tuple(server_addr), timeout=timeout)
    try:
        _send_frame(sock, encode_message(WireMessage(MSG_HELLO, session_id, 0)))
        if decode_message(_recv_frame(sock)).msg_type != MSG_HELLO:
            raise SessionError("handshake failed")
        acks = 0
        for i, (x_mix, y_mix) in enumerate(samples):
            stacked = np.concatenate([np.asarray(x_mix, dtype=np.float64)[None],
                                      np.asarray(y_mix, dtype=np.float64)], axis=0)
            _send_frame(sock, encode_message(
                WireMessage(MSG_TRAIN_REQUEST, session_id, i, stacked)))
            reply = decode_message(_recv_frame(sock))
            if reply.msg_type == MSG_ERROR:
                raise SessionError(f"server rejected training sample (code {reply.patch_index})")
            acks += 1
        _send_frame(sock, encode_message(WireMessage(MSG_BYE, session_id, 0)))
        return acks
    finally:
        sock.close()
