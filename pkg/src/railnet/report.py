"""Fault reports: CRC-protected framing, TCP transport and a JSON-lines log.

Frame layout (big-endian)::

    magic 'RF' | version (1) | type (1=report, 2=ack) | length (u16) | payload | crc16

The CRC is CRC-16/CCITT-FALSE over version..payload. A report payload is
21 bytes: device u16, timestamp_ms u64, track_position_mm u64, class u8,
confidence_bp u16.
"""

from __future__ import annotations

import binascii
import json
import logging
import socket
import socketserver
import struct
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple, Optional

log = logging.getLogger(__name__)

MAGIC = b"RF"
VERSION = 1
TYPE_REPORT = 1
TYPE_ACK = 2
HEADER = struct.Struct(">2sBBH")
PAYLOAD = struct.Struct(">HQQBH")
CRC = struct.Struct(">H")
FRAME_SIZE = HEADER.size + PAYLOAD.size + CRC.size  # 29
MAX_PAYLOAD = 1024


class FrameError(ValueError):
    pass


class BadMagic(FrameError):
    pass


class UnsupportedVersion(FrameError):
    pass


class LengthMismatch(FrameError):
    pass


class CrcMismatch(FrameError):
    pass


class BadFrameType(FrameError):
    pass


class SendError(OSError):
    pass


def crc16(data: bytes) -> int:
    """CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, unreflected, no final xor."""
    return binascii.crc_hqx(data, 0xFFFF)


@dataclass(frozen=True)
class FaultReport:
    device_id: int
    timestamp_ms: int
    track_position_mm: int
    class_id: int
    confidence_bp: int

    def __post_init__(self):
        limits = {"device_id": 16, "timestamp_ms": 64, "track_position_mm": 64,
                  "class_id": 8, "confidence_bp": 16}
        for name, bits in limits.items():
            v = getattr(self, name)
            if not isinstance(v, int) or not 0 <= v < (1 << bits):
                raise ValueError(f"{name}={v!r} is not a {bits}-bit unsigned integer")
        if self.confidence_bp > 10000:
            raise ValueError(f"confidence_bp={self.confidence_bp} exceeds 10000")


def encode(frame_type: int, payload: bytes) -> bytes:
    body = HEADER.pack(MAGIC, VERSION, frame_type, len(payload)) + payload
    return body + CRC.pack(crc16(body[2:]))


def decode(buf: bytes) -> tuple:
    """Validate one complete frame and return ``(type, payload)``.

    Checks run magic, length, CRC, version, type, so a corrupted version or
    type byte surfaces as a CRC error.
    """
    buf = bytes(buf)
    if len(buf) < HEADER.size:
        raise LengthMismatch(f"frame of {len(buf)} bytes is shorter than the header")
    magic, version, frame_type, length = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if len(buf) != HEADER.size + length + CRC.size:
        raise LengthMismatch(f"length field {length} does not match {len(buf)}-byte frame")
    (crc,) = CRC.unpack_from(buf, len(buf) - CRC.size)
    if crc16(buf[2:-CRC.size]) != crc:
        raise CrcMismatch("CRC mismatch")
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported version {version}")
    if frame_type not in (TYPE_REPORT, TYPE_ACK):
        raise BadFrameType(f"unknown frame type {frame_type}")
    return frame_type, buf[HEADER.size:-CRC.size]


def encode_frame(r: FaultReport) -> bytes:
    return encode(TYPE_REPORT, PAYLOAD.pack(r.device_id, r.timestamp_ms, r.track_position_mm,
                                            r.class_id, r.confidence_bp))


def decode_frame(buf: bytes) -> FaultReport:
    frame_type, payload = decode(buf)
    if frame_type != TYPE_REPORT:
        raise BadFrameType(f"expected a report frame, got type {frame_type}")
    if len(payload) != PAYLOAD.size:
        raise LengthMismatch(f"report payload must be {PAYLOAD.size} bytes, got {len(payload)}")
    try:
        return FaultReport(*PAYLOAD.unpack(payload))
    except ValueError as e:
        raise FrameError(str(e)) from None


def frame_crc(frame: bytes) -> bytes:
    return frame[-CRC.size:]


def ack_for(frame: bytes) -> bytes:
    return encode(TYPE_ACK, frame_crc(frame))


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> Optional[bytes]:
    """Read one length-delimited frame; ``None`` on clean EOF."""
    head = _recv_exact(sock, HEADER.size)
    if head is None:
        return None
    _, _, _, length = HEADER.unpack(head)
    if length > MAX_PAYLOAD:
        raise LengthMismatch(f"length {length} exceeds maximum payload {MAX_PAYLOAD}")
    rest = _recv_exact(sock, length + CRC.size)
    if rest is None:
        return None
    return head + rest


# ----------------------------------------------------------------------------
# Log
# ----------------------------------------------------------------------------

class LogWriter:
    """Serializes appends so each record lands as one complete line."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._fh = open(self.path, "a", encoding="utf-8")
        self.count = 0

    def append(self, report: FaultReport, received_at_ms: int) -> None:
        line = json.dumps({**asdict(report), "received_at": received_at_ms}, sort_keys=True)
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()
            self.count += 1

    def close(self):
        with self._lock:
            self._fh.close()


class ReportListing(NamedTuple):
    reports: list
    errors: list  # (line_number, message)


def list_reports(log_path, class_id: Optional[int] = None, since_ms: Optional[int] = None,
                 until_ms: Optional[int] = None) -> ReportListing:
    """Parse the log, filter on class and inclusive time range, sort by timestamp."""
    reports, errors = [], []
    with open(log_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                r = FaultReport(d["device_id"], d["timestamp_ms"], d["track_position_mm"],
                                d["class_id"], d["confidence_bp"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                errors.append((lineno, f"{type(e).__name__}: {e}"))
                continue
            if class_id is not None and r.class_id != class_id:
                continue
            if since_ms is not None and r.timestamp_ms < since_ms:
                continue
            if until_ms is not None and r.timestamp_ms > until_ms:
                continue
            reports.append(r)
    reports.sort(key=lambda r: r.timestamp_ms)
    return ReportListing(reports, errors)


# ----------------------------------------------------------------------------
# Transport
# ----------------------------------------------------------------------------

class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        server: ReportServer = self.server
        sock = self.request
        while True:
            try:
                frame = read_frame(sock)
            except LengthMismatch as e:
                log.warning("%s: %s; closing", self.client_address, e)
                return
            except OSError:
                return
            if frame is None:
                return
            try:
                report = decode_frame(frame)
            except FrameError as e:
                log.warning("%s: dropped frame: %s", self.client_address, e)
                continue
            try:
                server.writer.append(report, int(time.time() * 1000))
            except OSError as e:
                server.fail(e)
                return
            try:
                sock.sendall(ack_for(frame))
            except OSError:
                return


class ReportServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, addr, log_path):
        self.writer = LogWriter(log_path)
        self.error: Optional[BaseException] = None
        super().__init__(addr, _Handler)

    def fail(self, exc: BaseException):
        log.error("log write failed: %s", exc)
        self.error = exc
        threading.Thread(target=self.shutdown, daemon=True).start()

    def server_close(self):
        super().server_close()
        self.writer.close()


def parse_addr(addr: str) -> tuple:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must be host:port, got {addr!r}")
    return host, int(port)


def serve(listen_addr: str, log_path, ready: Optional[threading.Event] = None) -> int:
    """Run the report server until interrupted; returns a process exit status."""
    with ReportServer(parse_addr(listen_addr), log_path) as server:
        log.info("listening on %s:%d", *server.server_address)
        if ready is not None:
            ready.set()
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
        return 3 if server.error else 0


def send(addr: str, report: FaultReport, timeout_ms: int = 2000) -> bytes:
    """Send one report and wait for its ack; returns the ack frame."""
    frame = encode_frame(report)
    try:
        with socket.create_connection(parse_addr(addr), timeout=timeout_ms / 1000) as sock:
            sock.sendall(frame)
            ack = read_frame(sock)
    except socket.timeout:
        raise SendError(f"no ack from {addr} within {timeout_ms} ms") from None
    except OSError as e:
        raise SendError(f"cannot reach {addr}: {e}") from None
    if ack is None:
        raise SendError(f"{addr} closed the connection without an ack")
    try:
        frame_type, payload = decode(ack)
    except FrameError as e:
        raise SendError(f"corrupt ack: {e}") from None
    if frame_type != TYPE_ACK or payload != frame_crc(frame):
        raise SendError("ack does not match the sent frame")
    return ack
