"""Binary framing and codecs for envelopes and daemon control messages.

Frame layout: ``length:u32le | kind:u8 | body``, where length counts every
byte after the length field (so length = 1 + len(body)).  All integers are
little-endian fixed width; strings and payloads are u32-length-prefixed.
Unknown kind codes are rejected, never skipped.
"""
from __future__ import annotations

import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import ClassVar, Optional

from .errors import (
    ConnectTimeout,
    Disconnected,
    MalformedFrame,
    Oversize,
    Refused,
    UnknownKind,
)
from .worldmodel import Family, Origin, WorldView

MAX_FRAME = 64 * 1024 * 1024  # cap on length field, default 64 MiB
WIRE_LATEST = 0xFFFFFFFF  # version sentinel meaning LATEST
NO_RANK = 0xFFFFFFFF  # rank slot meaning "not a rank" (client / whole job)
COMMIT_SEQ = 0xFFFFFFFF  # barrier sequence reserved for the epoch commit

# message type codes
KIND_ENVELOPE = 0x01
KIND_JOIN = 0x10
KIND_JOIN_ACK = 0x11
KIND_RESIZE_REQ = 0x12
KIND_OK_REP = 0x13
KIND_FORK_REQ = 0x14
KIND_FORK_REP = 0x15
KIND_SPAWN_REQ = 0x16
KIND_SPAWN_REP = 0x17
KIND_CKPT_REQ = 0x18
KIND_CKPT_IMAGE = 0x19
KIND_EPOCH_COMMIT = 0x1A
KIND_COMMIT_ACK = 0x1B
KIND_WORLD_RESIZED_NOTIFY = 0x1C
KIND_BARRIER_ENTER = 0x1D
KIND_BARRIER_RELEASE = 0x1E
KIND_STATUS_REQ = 0x1F
KIND_STATUS_REP = 0x20
KIND_FINALIZE = 0x21
KIND_SPAWN_FAULTS = 0x30
KIND_SPAWN_FAULTS_REP = 0x31
KIND_RANK_EXIT = 0x32
KIND_KILL_RANK = 0x33
KIND_CKPT_WORLD_REQ = 0x34
KIND_CKPT_WORLD_REP = 0x35
KIND_CKPT_TAKE = 0x36
KIND_CKPT_SNAP_META = 0x37
KIND_CKPT_CUT = 0x38
KIND_SPAWN_DIRECTIVE = 0x39

# daemon roles carried in JOIN
ROLE_RANK = 0
ROLE_HEAD = 1
ROLE_FAULT = 2
ROLE_CLIENT = 3

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_I32 = struct.Struct("<i")


class _Writer:
    __slots__ = ("_parts",)

    def __init__(self):
        self._parts: list[bytes] = []

    def u8(self, v: int):
        self._parts.append(_U8.pack(v))

    def u16(self, v: int):
        self._parts.append(_U16.pack(v))

    def u32(self, v: int):
        self._parts.append(_U32.pack(v))

    def u64(self, v: int):
        self._parts.append(_U64.pack(v))

    def i32(self, v: int):
        self._parts.append(_I32.pack(v))

    def raw(self, b: bytes):
        self._parts.append(b)

    def blob(self, b: bytes):
        self.u32(len(b))
        self._parts.append(b)

    def text(self, s: str):
        self.blob(s.encode("utf-8"))

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class _Reader:
    __slots__ = ("_buf", "_pos")

    def __init__(self, buf: bytes):
        self._buf = buf
        self._pos = 0

    def _take(self, n: int) -> bytes:
        end = self._pos + n
        if end > len(self._buf):
            raise MalformedFrame("truncated message body")
        out = self._buf[self._pos : end]
        self._pos = end
        return out

    def u8(self) -> int:
        return _U8.unpack(self._take(1))[0]

    def u16(self) -> int:
        return _U16.unpack(self._take(2))[0]

    def u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def i32(self) -> int:
        return _I32.unpack(self._take(4))[0]

    def blob(self) -> bytes:
        n = self.u32()
        return self._take(n)

    def text(self) -> str:
        return self.blob().decode("utf-8")

    def expect_end(self):
        if self._pos != len(self._buf):
            raise MalformedFrame("trailing bytes in message body")


def _put_version(w: _Writer, version: Optional[int]):
    w.u32(WIRE_LATEST if version is None else version)


def _get_version(r: _Reader) -> Optional[int]:
    v = r.u32()
    return None if v == WIRE_LATEST else v


def _put_view(w: _Writer, view: WorldView):
    w.u32(view.version)
    w.u32(view.size)
    w.u8(int(view.origin))
    for host, port in view.endpoints:
        w.text(host)
        w.u32(port)
    w.u32(len(view.parents))
    for r in sorted(view.parents):
        w.u32(r)
    w.u32(len(view.children))
    for r in sorted(view.children):
        w.u32(r)


def _get_view(r: _Reader) -> WorldView:
    version = r.u32()
    size = r.u32()
    try:
        origin = Origin(r.u8())
    except ValueError as exc:
        raise MalformedFrame(f"bad origin code: {exc}")
    endpoints = tuple((r.text(), r.u32()) for _ in range(size))
    parents = frozenset(r.u32() for _ in range(r.u32()))
    children = frozenset(r.u32() for _ in range(r.u32()))
    try:
        return WorldView(version, size, endpoints, parents, children, origin)
    except ValueError as exc:
        raise MalformedFrame(f"inconsistent view: {exc}")


class Message:
    KIND: ClassVar[int]

    def _pack(self, w: _Writer):  # pragma: no cover - overridden
        raise NotImplementedError

    @classmethod
    def _unpack(cls, r: _Reader) -> "Message":  # pragma: no cover - overridden
        raise NotImplementedError


@dataclass(frozen=True)
class Envelope(Message):
    """Wire unit for application point-to-point traffic."""

    KIND: ClassVar[int] = KIND_ENVELOPE
    src: int
    dst: int
    family: Family
    version: Optional[int]  # None = LATEST
    tag: int
    payload: bytes

    def _pack(self, w: _Writer):
        w.u32(self.src)
        w.u32(self.dst)
        w.u8(int(self.family))
        _put_version(w, self.version)
        w.i32(self.tag)
        w.blob(self.payload)

    @classmethod
    def _unpack(cls, r: _Reader) -> "Envelope":
        src = r.u32()
        dst = r.u32()
        try:
            family = Family(r.u8())
        except ValueError as exc:
            raise MalformedFrame(f"bad family code: {exc}")
        version = _get_version(r)
        tag = r.i32()
        payload = r.blob()
        return cls(src, dst, family, version, tag, payload)


@dataclass(frozen=True)
class Join(Message):
    KIND: ClassVar[int] = KIND_JOIN
    role: int
    rank: Optional[int]  # None for heads/clients
    node: int
    host: str
    port: int  # 0 when the sender does not listen
    epoch: int
    pending: bool = False
    restored: bool = False

    def _pack(self, w: _Writer):
        w.u8(self.role)
        w.u32(NO_RANK if self.rank is None else self.rank)
        w.u32(self.node)
        w.text(self.host)
        w.u32(self.port)
        w.u32(self.epoch)
        w.u8((1 if self.pending else 0) | (2 if self.restored else 0))

    @classmethod
    def _unpack(cls, r: _Reader) -> "Join":
        role = r.u8()
        rank = r.u32()
        node = r.u32()
        host = r.text()
        port = r.u32()
        epoch = r.u32()
        flags = r.u8()
        return cls(
            role,
            None if rank == NO_RANK else rank,
            node,
            host,
            port,
            epoch,
            bool(flags & 1),
            bool(flags & 2),
        )


@dataclass(frozen=True)
class JoinAck(Message):
    KIND: ClassVar[int] = KIND_JOIN_ACK
    ok: bool
    views: tuple[WorldView, ...] = ()

    def _pack(self, w: _Writer):
        w.u8(1 if self.ok else 0)
        w.u32(len(self.views))
        for v in self.views:
            _put_view(w, v)

    @classmethod
    def _unpack(cls, r: _Reader) -> "JoinAck":
        ok = bool(r.u8())
        views = tuple(_get_view(r) for _ in range(r.u32()))
        return cls(ok, views)


@dataclass(frozen=True)
class ResizeReq(Message):
    KIND: ClassVar[int] = KIND_RESIZE_REQ
    m: int

    def _pack(self, w: _Writer):
        w.u32(self.m)

    @classmethod
    def _unpack(cls, r: _Reader) -> "ResizeReq":
        return cls(r.u32())


@dataclass(frozen=True)
class OkRep(Message):
    """Generic acceptance/error reply; code 0 means accepted."""

    KIND: ClassVar[int] = KIND_OK_REP
    code: int
    message: str = ""

    def _pack(self, w: _Writer):
        w.i32(self.code)
        w.text(self.message)

    @classmethod
    def _unpack(cls, r: _Reader) -> "OkRep":
        return cls(r.i32(), r.text())


@dataclass(frozen=True)
class ForkReq(Message):
    KIND: ClassVar[int] = KIND_FORK_REQ
    m: int
    caller: int

    def _pack(self, w: _Writer):
        w.u32(self.m)
        w.u32(self.caller)

    @classmethod
    def _unpack(cls, r: _Reader) -> "ForkReq":
        return cls(r.u32(), r.u32())


@dataclass(frozen=True)
class ForkRep(Message):
    KIND: ClassVar[int] = KIND_FORK_REP
    ret: int

    def _pack(self, w: _Writer):
        w.i32(self.ret)

    @classmethod
    def _unpack(cls, r: _Reader) -> "ForkRep":
        return cls(r.i32())


@dataclass(frozen=True)
class SpawnReq(Message):
    KIND: ClassVar[int] = KIND_SPAWN_REQ
    k: int
    command: tuple[str, ...]
    caller: Optional[int]  # None when issued by an operator client
    directed: bool = False  # True when sent on behalf of a controller directive

    def _pack(self, w: _Writer):
        w.u32(self.k)
        w.u32(len(self.command))
        for part in self.command:
            w.text(part)
        w.u32(NO_RANK if self.caller is None else self.caller)
        w.u8(1 if self.directed else 0)

    @classmethod
    def _unpack(cls, r: _Reader) -> "SpawnReq":
        k = r.u32()
        command = tuple(r.text() for _ in range(r.u32()))
        caller = r.u32()
        directed = bool(r.u8())
        return cls(k, command, None if caller == NO_RANK else caller, directed)


SPAWN_OK = 0
SPAWN_ERR_FAILED = -1  # count shortfall / exec failure
SPAWN_ERR_NOT_COLLECTIVE = -2


@dataclass(frozen=True)
class SpawnRep(Message):
    KIND: ClassVar[int] = KIND_SPAWN_REP
    code: int
    version: int  # epoch the merge will commit / committed
    low_size: int
    high_size: int
    message: str = ""

    def _pack(self, w: _Writer):
        w.i32(self.code)
        w.u32(self.version)
        w.u32(self.low_size)
        w.u32(self.high_size)
        w.text(self.message)

    @classmethod
    def _unpack(cls, r: _Reader) -> "SpawnRep":
        return cls(r.i32(), r.u32(), r.u32(), r.u32(), r.text())


@dataclass(frozen=True)
class CkptReq(Message):
    KIND: ClassVar[int] = KIND_CKPT_REQ
    rank: int

    def _pack(self, w: _Writer):
        w.u32(self.rank)

    @classmethod
    def _unpack(cls, r: _Reader) -> "CkptReq":
        return cls(r.u32())


@dataclass(frozen=True)
class CkptImageMsg(Message):
    """Image bytes for one rank; empty data signals capture failure."""

    KIND: ClassVar[int] = KIND_CKPT_IMAGE
    rank: int
    data: bytes

    def _pack(self, w: _Writer):
        w.u32(self.rank)
        w.blob(self.data)

    @classmethod
    def _unpack(cls, r: _Reader) -> "CkptImageMsg":
        return cls(r.u32(), r.blob())


@dataclass(frozen=True)
class EpochCommit(Message):
    """Commit broadcast carrying the full committed view sequence."""

    KIND: ClassVar[int] = KIND_EPOCH_COMMIT
    views: tuple[WorldView, ...]

    def _pack(self, w: _Writer):
        w.u32(len(self.views))
        for v in self.views:
            _put_view(w, v)

    @classmethod
    def _unpack(cls, r: _Reader) -> "EpochCommit":
        return cls(tuple(_get_view(r) for _ in range(r.u32())))


@dataclass(frozen=True)
class CommitAck(Message):
    KIND: ClassVar[int] = KIND_COMMIT_ACK
    version: int
    rank: int

    def _pack(self, w: _Writer):
        w.u32(self.version)
        w.u32(self.rank)

    @classmethod
    def _unpack(cls, r: _Reader) -> "CommitAck":
        return cls(r.u32(), r.u32())


@dataclass(frozen=True)
class WorldResizedNotify(Message):
    """Pending-epoch announcement to pre-existing ranks (fire-and-forget).

    ``view`` carries the planned membership so old ranks can address new
    ranks before the commit barrier; no view means the plan was cancelled.
    """

    KIND: ClassVar[int] = KIND_WORLD_RESIZED_NOTIFY
    version: int
    view: Optional[WorldView] = None

    def _pack(self, w: _Writer):
        w.u32(self.version)
        w.u8(0 if self.view is None else 1)
        if self.view is not None:
            _put_view(w, self.view)

    @classmethod
    def _unpack(cls, r: _Reader) -> "WorldResizedNotify":
        version = r.u32()
        view = _get_view(r) if r.u8() else None
        return cls(version, view)


@dataclass(frozen=True)
class BarrierEnter(Message):
    KIND: ClassVar[int] = KIND_BARRIER_ENTER
    family: Family
    version: int
    seq: int  # COMMIT_SEQ enters the pending-epoch commit barrier
    rank: int

    def _pack(self, w: _Writer):
        w.u8(int(self.family))
        w.u32(self.version)
        w.u32(self.seq)
        w.u32(self.rank)

    @classmethod
    def _unpack(cls, r: _Reader) -> "BarrierEnter":
        try:
            family = Family(r.u8())
        except ValueError as exc:
            raise MalformedFrame(f"bad family code: {exc}")
        return cls(family, r.u32(), r.u32(), r.u32())


@dataclass(frozen=True)
class BarrierRelease(Message):
    KIND: ClassVar[int] = KIND_BARRIER_RELEASE
    family: Family
    version: int
    seq: int

    def _pack(self, w: _Writer):
        w.u8(int(self.family))
        w.u32(self.version)
        w.u32(self.seq)

    @classmethod
    def _unpack(cls, r: _Reader) -> "BarrierRelease":
        try:
            family = Family(r.u8())
        except ValueError as exc:
            raise MalformedFrame(f"bad family code: {exc}")
        return cls(family, r.u32(), r.u32())


@dataclass(frozen=True)
class StatusReq(Message):
    KIND: ClassVar[int] = KIND_STATUS_REQ

    def _pack(self, w: _Writer):
        pass

    @classmethod
    def _unpack(cls, r: _Reader) -> "StatusReq":
        return cls()


@dataclass(frozen=True)
class StatusRep(Message):
    KIND: ClassVar[int] = KIND_STATUS_REP
    report: str  # canonical JSON, sorted keys

    def _pack(self, w: _Writer):
        w.text(self.report)

    @classmethod
    def _unpack(cls, r: _Reader) -> "StatusRep":
        return cls(r.text())


@dataclass(frozen=True)
class Finalize(Message):
    """Rank teardown notice, or whole-job shutdown when rank is None."""

    KIND: ClassVar[int] = KIND_FINALIZE
    rank: Optional[int] = None

    def _pack(self, w: _Writer):
        w.u32(NO_RANK if self.rank is None else self.rank)

    @classmethod
    def _unpack(cls, r: _Reader) -> "Finalize":
        rank = r.u32()
        return cls(None if rank == NO_RANK else rank)


@dataclass(frozen=True)
class SpawnFaults(Message):
    """Controller to head: start fault daemons for these ranks."""

    KIND: ClassVar[int] = KIND_SPAWN_FAULTS
    entries: tuple[tuple[int, str], ...]  # (rank, launch spec JSON)

    def _pack(self, w: _Writer):
        w.u32(len(self.entries))
        for rank, spec in self.entries:
            w.u32(rank)
            w.text(spec)

    @classmethod
    def _unpack(cls, r: _Reader) -> "SpawnFaults":
        return cls(tuple((r.u32(), r.text()) for _ in range(r.u32())))


@dataclass(frozen=True)
class SpawnFaultsRep(Message):
    KIND: ClassVar[int] = KIND_SPAWN_FAULTS_REP
    started: tuple[int, ...]
    failed: tuple[int, ...]

    def _pack(self, w: _Writer):
        w.u32(len(self.started))
        for rank in self.started:
            w.u32(rank)
        w.u32(len(self.failed))
        for rank in self.failed:
            w.u32(rank)

    @classmethod
    def _unpack(cls, r: _Reader) -> "SpawnFaultsRep":
        started = tuple(r.u32() for _ in range(r.u32()))
        failed = tuple(r.u32() for _ in range(r.u32()))
        return cls(started, failed)


@dataclass(frozen=True)
class RankExit(Message):
    KIND: ClassVar[int] = KIND_RANK_EXIT
    rank: int
    code: int

    def _pack(self, w: _Writer):
        w.u32(self.rank)
        w.i32(self.code)

    @classmethod
    def _unpack(cls, r: _Reader) -> "RankExit":
        return cls(r.u32(), r.i32())


@dataclass(frozen=True)
class KillRank(Message):
    KIND: ClassVar[int] = KIND_KILL_RANK
    rank: int

    def _pack(self, w: _Writer):
        w.u32(self.rank)

    @classmethod
    def _unpack(cls, r: _Reader) -> "KillRank":
        return cls(r.u32())


@dataclass(frozen=True)
class CkptWorldReq(Message):
    KIND: ClassVar[int] = KIND_CKPT_WORLD_REQ

    def _pack(self, w: _Writer):
        pass

    @classmethod
    def _unpack(cls, r: _Reader) -> "CkptWorldReq":
        return cls()


@dataclass(frozen=True)
class CkptWorldRep(Message):
    KIND: ClassVar[int] = KIND_CKPT_WORLD_REP
    code: int  # 0 ok, negative failure
    manifest: str
    message: str = ""

    def _pack(self, w: _Writer):
        w.i32(self.code)
        w.text(self.manifest)
        w.text(self.message)

    @classmethod
    def _unpack(cls, r: _Reader) -> "CkptWorldRep":
        return cls(r.i32(), r.text(), r.text())


@dataclass(frozen=True)
class CkptTake(Message):
    """Start a whole-world checkpoint round; ranks snapshot at their next safe point."""

    KIND: ClassVar[int] = KIND_CKPT_TAKE
    round_id: int

    def _pack(self, w: _Writer):
        w.u32(self.round_id)

    @classmethod
    def _unpack(cls, r: _Reader) -> "CkptTake":
        return cls(r.u32())


@dataclass(frozen=True)
class CkptSnapMeta(Message):
    """Per-destination envelope send counts at the snapshot instant."""

    KIND: ClassVar[int] = KIND_CKPT_SNAP_META
    rank: int
    round_id: int
    sent: tuple[tuple[int, int], ...]  # (dst, count), sorted by dst

    def _pack(self, w: _Writer):
        w.u32(self.rank)
        w.u32(self.round_id)
        w.u32(len(self.sent))
        for dst, count in self.sent:
            w.u32(dst)
            w.u64(count)

    @classmethod
    def _unpack(cls, r: _Reader) -> "CkptSnapMeta":
        rank = r.u32()
        round_id = r.u32()
        sent = tuple((r.u32(), r.u64()) for _ in range(r.u32()))
        return cls(rank, round_id, sent)


@dataclass(frozen=True)
class CkptCut(Message):
    """Per-source arrival totals a rank must reach before sealing its image."""

    KIND: ClassVar[int] = KIND_CKPT_CUT
    round_id: int
    expected: tuple[tuple[int, int], ...]  # (src, total), sorted by src

    def _pack(self, w: _Writer):
        w.u32(self.round_id)
        w.u32(len(self.expected))
        for src, count in self.expected:
            w.u32(src)
            w.u64(count)

    @classmethod
    def _unpack(cls, r: _Reader) -> "CkptCut":
        round_id = r.u32()
        expected = tuple((r.u32(), r.u64()) for _ in range(r.u32()))
        return cls(round_id, expected)


@dataclass(frozen=True)
class SpawnDirective(Message):
    """Controller to rank 0: run the spawn-merge on the operator's behalf."""

    KIND: ClassVar[int] = KIND_SPAWN_DIRECTIVE
    k: int
    command: tuple[str, ...]

    def _pack(self, w: _Writer):
        w.u32(self.k)
        w.u32(len(self.command))
        for part in self.command:
            w.text(part)

    @classmethod
    def _unpack(cls, r: _Reader) -> "SpawnDirective":
        k = r.u32()
        command = tuple(r.text() for _ in range(r.u32()))
        return cls(k, command)


_MESSAGE_TYPES = (
    Envelope,
    Join,
    JoinAck,
    ResizeReq,
    OkRep,
    ForkReq,
    ForkRep,
    SpawnReq,
    SpawnRep,
    CkptReq,
    CkptImageMsg,
    EpochCommit,
    CommitAck,
    WorldResizedNotify,
    BarrierEnter,
    BarrierRelease,
    StatusReq,
    StatusRep,
    Finalize,
    SpawnFaults,
    SpawnFaultsRep,
    RankExit,
    KillRank,
    CkptWorldReq,
    CkptWorldRep,
    CkptTake,
    CkptSnapMeta,
    CkptCut,
    SpawnDirective,
)
_BY_KIND = {cls.KIND: cls for cls in _MESSAGE_TYPES}
assert len(_BY_KIND) == len(_MESSAGE_TYPES)


def encode(msg: Message) -> bytes:
    """Serialize a message to one full frame (deterministic)."""
    w = _Writer()
    msg._pack(w)
    body = w.getvalue()
    length = 1 + len(body)
    if length > MAX_FRAME:
        raise Oversize(f"frame of {length} bytes exceeds cap {MAX_FRAME}")
    return _U32.pack(length) + _U8.pack(msg.KIND) + body


def decode(frame: bytes) -> Message:
    """Parse one full frame produced by :func:`encode`."""
    if len(frame) < 5:
        raise MalformedFrame("frame shorter than header")
    (length,) = _U32.unpack(frame[:4])
    if length > MAX_FRAME:
        raise Oversize(f"declared length {length} exceeds cap {MAX_FRAME}")
    if len(frame) != 4 + length:
        raise MalformedFrame(
            f"declared length {length}, found {len(frame) - 4} bytes after it"
        )
    return decode_body(frame[4], frame[5:])


def decode_body(kind: int, body: bytes) -> Message:
    cls = _BY_KIND.get(kind)
    if cls is None:
        raise UnknownKind(f"unknown message type code 0x{kind:02x}")
    r = _Reader(body)
    msg = cls._unpack(r)
    r.expect_end()
    return msg


class Link:
    """Bidirectional ordered byte stream carrying frames.

    Writes are serialized by a lock so any thread may send; reads must come
    from a single logical reader at a time.
    """

    def __init__(self, sock: socket.socket):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._wlock = threading.Lock()
        self._closed = False
        try:
            self.peer = sock.getpeername()
        except OSError:
            self.peer = ("?", 0)

    def send(self, msg: Message):
        data = encode(msg)
        with self._wlock:
            if self._closed:
                raise Disconnected("link is closed")
            try:
                self._sock.sendall(data)
            except OSError as exc:
                raise Disconnected(str(exc))

    def _recv_exact(self, n: int, *, at_boundary: bool) -> bytes:
        chunks = []
        remaining = n
        while remaining:
            try:
                chunk = self._sock.recv(remaining)
            except OSError as exc:
                raise Disconnected(str(exc))
            if not chunk:
                if at_boundary and remaining == n:
                    raise Disconnected("peer closed the link")
                raise MalformedFrame("link closed mid-frame")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def recv(self) -> Message:
        header = self._recv_exact(4, at_boundary=True)
        (length,) = _U32.unpack(header)
        if length > MAX_FRAME:
            raise Oversize(f"declared length {length} exceeds cap {MAX_FRAME}")
        if length < 1:
            raise MalformedFrame("frame with no kind byte")
        rest = self._recv_exact(length, at_boundary=False)
        return decode_body(rest[0], rest[1:])

    def close(self):
        with self._wlock:
            self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def listen(host: str = "127.0.0.1", port: int = 0, backlog: int = 128):
    """Bind a listening socket; returns (socket, bound port)."""
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((host, port))
    sock.listen(backlog)
    return sock, sock.getsockname()[1]


def connect(host: str, port: int, timeout: float = 10.0, retry: bool = True) -> Link:
    """Dial an endpoint, retrying refused connections with bounded backoff."""
    deadline = time.monotonic() + timeout
    delay = 0.01
    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise ConnectTimeout(f"could not reach {host}:{port} within {timeout}s")
        try:
            sock = socket.create_connection((host, port), timeout=max(remaining, 0.01))
            sock.settimeout(None)
            return Link(sock)
        except (ConnectionRefusedError, ConnectionResetError) as exc:
            if not retry:
                raise Refused(f"{host}:{port}: {exc}")
        except (socket.timeout, TimeoutError):
            raise ConnectTimeout(f"could not reach {host}:{port} within {timeout}s")
        except OSError as exc:
            if not retry:
                raise Refused(f"{host}:{port}: {exc}")
        time.sleep(min(delay, max(deadline - time.monotonic(), 0)))
        delay = min(delay * 2, 0.2)


def parse_endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host, int(port)


def format_endpoint(endpoint: tuple[str, int]) -> str:
    return f"{endpoint[0]}:{endpoint[1]}"
