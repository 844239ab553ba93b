"""User-facing runtime linked into application processes.

One handle per process.  The application thread drives init/finalize,
point-to-point, barrier, and the three elasticity surfaces (WORLD_RESIZED
statuses, resized-world polling, fork).  A background receiver applies epoch
commits, queues inbound envelopes, and services checkpoint requests, so an
application blocked in a call never wedges the control plane.
"""
from __future__ import annotations

import base64
import enum
import os
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass
from typing import Optional, Sequence

from . import checkpoint as ckpt
from . import wire
from .errors import (
    Disconnected,
    DuplicateInit,
    NotCollective,
    NotInitialized,
    NullCommunicator,
    RankOutOfRange,
    SerializationFailed,
    SpawnFailed,
    StateUnregistered,
    UnknownVersion,
)
from .wire import COMMIT_SEQ, Envelope, Link
from .worldmodel import CommRef, Family, Origin, WorldHistory, WorldView, view_members

ENV_RANK = "ELASTIC_RANK"
ENV_WORLD_SIZE = "ELASTIC_WORLD_SIZE"
ENV_CONTROLLER = "ELASTIC_CONTROLLER"
ENV_EPOCH = "ELASTIC_EPOCH"
ENV_PENDING = "ELASTIC_PENDING"
ENV_NODE = "ELASTIC_NODE"
ENV_RESTORE = "ELASTIC_RESTORE"
ENV_FORK_CHILD = "ELASTIC_FORK_CHILD"
ENV_CONFIG = "ELASTIC_CONFIG"

FORK_ERR_MISMATCH = -1
FORK_ERR_RANGE = -2
FORK_ERR_SPAWN = -3

_INFLIGHT_KEY = "inflight"


class StatusCode(enum.Enum):
    OK = 0
    WORLD_RESIZED = 1
    ERROR = 2


@dataclass(frozen=True)
class InterComm:
    """Bridge between the existing group and freshly spawned ranks."""

    version: int  # epoch the merge commits
    low_size: int
    high_size: int


def merged_rank_order(
    low: Sequence[int], high: Sequence[int], low_high_flag: int = 0
) -> list[int]:
    """Rank order of the merged intracommunicator.

    ``low_high_flag`` is the ``high`` argument passed by the low group; the
    group passing high=0 comes first, so both groups compute the same order.
    """
    if low_high_flag == 0:
        return list(low) + list(high)
    return list(high) + list(low)


class _Channel:
    __slots__ = ("queues", "arrived")

    def __init__(self):
        self.queues: dict[int, deque[Envelope]] = defaultdict(deque)
        self.arrived = 0


class _CkptRound:
    """State of one whole-world checkpoint round on this rank."""

    __slots__ = ("round_id", "blob", "queues", "arr_at_snap", "recorded", "expected")

    def __init__(self, round_id, blob, queues, arr_at_snap):
        self.round_id = round_id
        self.blob = blob
        self.queues = queues  # {(src, tag): [Envelope, ...]} frozen at snapshot
        self.arr_at_snap = arr_at_snap  # {src: arrivals at snapshot}
        self.recorded = defaultdict(list)  # post-snapshot arrivals per src
        self.expected: Optional[dict[int, int]] = None


class RuntimeHandle:
    """Per-process runtime state; exactly one handle exists per process."""

    def __init__(
        self,
        rank: int,
        node: int,
        controller: tuple[str, int],
        epoch: int,
        pending: bool,
        config_path: str,
        restored_payload: Optional[bytes],
        restored_meta: Optional[dict[str, str]],
        fork_child: bool,
        registry: ckpt.HookRegistry,
        op_timeout: float = 120.0,
    ):
        self._rank = rank
        self._node = node
        self._controller = controller
        self._launch_epoch = epoch
        self._launch_pending = pending
        self._config_path = config_path
        self._restored_payload = restored_payload
        self._restored_meta = restored_meta
        self._fork_child_pending = fork_child
        self._registry = registry
        self._op_timeout = op_timeout

        self._mu = threading.Lock()
        self._cv = threading.Condition(self._mu)
        self._history = WorldHistory()
        self._pending_view: Optional[WorldView] = None
        self._notices: deque[int] = deque()
        self._channels: dict[int, _Channel] = {}
        self._peer_links: dict[int, tuple[tuple[str, int], Link]] = {}
        self._sent: dict[int, int] = defaultdict(int)
        self._releases: set[tuple[Family, int, int]] = set()
        self._bseq: dict[tuple[Family, int], int] = defaultdict(int)
        self._fork_slot: Optional[int] = None
        self._spawn_slot: Optional[wire.SpawnRep] = None
        self._ckpt_request: Optional[int] = None
        self._ckpt: Optional[_CkptRound] = None
        self._in_safe_point = False
        self._state = None
        self._closed = False
        self._broken = False

        self._ctl: Optional[Link] = None
        self._listener = None
        self._listen_port = 0

    # -- wiring -----------------------------------------------------------

    def _start(self):
        self._listener, self._listen_port = wire.listen()
        threading.Thread(target=self._accept_loop, daemon=True).start()
        self._ctl = wire.connect(*self._controller, timeout=self._op_timeout)
        self._ctl.send(
            wire.Join(
                role=wire.ROLE_RANK,
                rank=self._rank,
                node=self._node,
                host="127.0.0.1",
                port=self._listen_port,
                epoch=self._launch_epoch,
                pending=self._launch_pending,
                restored=self._restored_payload is not None,
            )
        )
        ack = self._ctl.recv()
        if not isinstance(ack, wire.JoinAck) or not ack.ok:
            raise Disconnected("controller rejected JOIN")
        if ack.views:
            with self._cv:
                self._history = WorldHistory(ack.views)
        if self._restored_meta:
            self._seed_inflight(self._restored_meta.get(_INFLIGHT_KEY, ""))
        threading.Thread(target=self._control_loop, daemon=True).start()
        if self._launch_pending:
            self._ctl.send(
                wire.BarrierEnter(
                    Family.WORLD, self._launch_epoch, COMMIT_SEQ, self._rank
                )
            )
            self._await_commit_barrier(self._launch_epoch)

    def _seed_inflight(self, encoded: str):
        if not encoded:
            return
        data = base64.b64decode(encoded)
        pos = 0
        while pos < len(data):
            (length,) = wire._U32.unpack(data[pos : pos + 4])
            frame = data[pos : pos + 4 + length]
            pos += 4 + length
            env = wire.decode(frame)
            assert isinstance(env, Envelope)
            with self._cv:
                self._channel(env.src).queues[env.tag].append(env)

    def _channel(self, src: int) -> _Channel:
        ch = self._channels.get(src)
        if ch is None:
            ch = self._channels[src] = _Channel()
        return ch

    # -- background receiver ----------------------------------------------

    def _accept_loop(self):
        while True:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            threading.Thread(
                target=self._peer_loop, args=(Link(sock),), daemon=True
            ).start()

    def _version_known_locked(self, version: Optional[int]) -> bool:
        if version is None or version <= self._launch_epoch:
            return True
        if len(self._history) and version <= self._history.latest_version:
            return True
        return self._pending_view is not None and version == self._pending_view.version

    def _peer_loop(self, link: Link):
        while True:
            try:
                msg = link.recv()
            except Exception:
                return
            if not isinstance(msg, Envelope):
                continue
            with self._cv:
                # parking here preserves per-channel FIFO across a commit:
                # nothing later on this connection is read until the epoch
                # this envelope references is known locally
                while not self._closed and not self._version_known_locked(msg.version):
                    self._cv.wait()
                if self._closed:
                    return
                ch = self._channel(msg.src)
                ch.arrived += 1
                if self._ckpt is not None:
                    self._ckpt.recorded[msg.src].append(msg)
                ch.queues[msg.tag].append(msg)
                self._ckpt_try_seal_locked()
                self._cv.notify_all()

    def _control_loop(self):
        while True:
            try:
                msg = self._ctl.recv()
            except Exception:
                with self._cv:
                    self._broken = True
                    self._cv.notify_all()
                return
            self._dispatch_control(msg)

    def _dispatch_control(self, msg):
        if isinstance(msg, wire.EpochCommit):
            with self._cv:
                self._history = WorldHistory(msg.views)
                latest = self._history.latest_version
                if self._pending_view is not None and self._pending_view.version <= latest:
                    self._pending_view = None
                self._cv.notify_all()
            self._ctl.send(wire.CommitAck(latest, self._rank))
        elif isinstance(msg, wire.WorldResizedNotify):
            if msg.view is None:
                with self._cv:
                    if (
                        self._pending_view is not None
                        and self._pending_view.version == msg.version
                    ):
                        self._pending_view = None
                    try:
                        self._notices.remove(msg.version)
                    except ValueError:
                        pass
                    self._cv.notify_all()
            else:
                with self._cv:
                    self._pending_view = msg.view
                    self._notices.append(msg.version)
                    self._cv.notify_all()
                if msg.view.origin in (Origin.SPAWN_MERGE, Origin.FORK):
                    # merge and fork own their commit barrier; the app only
                    # enters explicitly for the restart-and-grow path
                    self._ctl.send(
                        wire.BarrierEnter(
                            Family.WORLD, msg.version, COMMIT_SEQ, self._rank
                        )
                    )
        elif isinstance(msg, wire.BarrierRelease):
            with self._cv:
                self._releases.add((msg.family, msg.version, msg.seq))
                self._cv.notify_all()
        elif isinstance(msg, wire.ForkRep):
            with self._cv:
                self._fork_slot = msg.ret
                self._cv.notify_all()
        elif isinstance(msg, wire.SpawnRep):
            with self._cv:
                self._spawn_slot = msg
                self._cv.notify_all()
        elif isinstance(msg, wire.CkptReq):
            self._send_clone_image()
        elif isinstance(msg, wire.CkptTake):
            with self._cv:
                self._ckpt_request = msg.round_id
                self._cv.notify_all()
        elif isinstance(msg, wire.CkptCut):
            with self._cv:
                if self._ckpt is not None and self._ckpt.round_id == msg.round_id:
                    self._ckpt.expected = dict(msg.expected)
                    self._ckpt_try_seal_locked()
        elif isinstance(msg, wire.SpawnDirective):
            threading.Thread(
                target=self._run_spawn_directive, args=(msg,), daemon=True
            ).start()

    def _run_spawn_directive(self, msg: wire.SpawnDirective):
        try:
            self.comm_spawn(list(msg.command), msg.k, directed=True)
        except Exception:
            pass  # the controller reports the failure through status

    # -- checkpoint plumbing ------------------------------------------------

    def _image_meta(self) -> dict[str, str]:
        with self._cv:
            if len(self._history):
                epoch = self._history.latest_version
                size = self._history.latest.size
            else:
                epoch = self._launch_epoch
                size = 0
        return {
            "rank": str(self._rank),
            "world_size": str(size),
            "epoch": str(epoch),
            "controller": wire.format_endpoint(self._controller),
            "config_path": self._config_path,
        }

    def _send_clone_image(self):
        # fork-time capture: the caller is parked inside fork(), so the
        # registered blob is current; peer queues stay with the parent
        with self._cv:
            state = self._state
        try:
            image = ckpt.snapshot(state, self._image_meta())
            data = ckpt.encode_image(image)
        except SerializationFailed:
            data = b""
        self._ctl.send(wire.CkptImageMsg(self._rank, data))

    def _safe_point(self):
        with self._cv:
            round_id = self._ckpt_request
            if round_id is None or self._in_safe_point:
                return
            self._ckpt_request = None
        self._in_safe_point = True
        try:
            self._registry.run("pre_checkpoint")
            with self._cv:
                try:
                    blob = ckpt._as_bytes(self._state)
                except SerializationFailed:
                    blob = None
                queues = {}
                arr = {}
                for src, chan in self._channels.items():
                    arr[src] = chan.arrived
                    for tag, dq in chan.queues.items():
                        if dq:
                            queues[(src, tag)] = list(dq)
                sent = tuple(sorted(self._sent.items()))
                if blob is None:
                    self._ckpt = None
                    report = None
                else:
                    self._ckpt = _CkptRound(round_id, blob, queues, arr)
                    report = wire.CkptSnapMeta(self._rank, round_id, sent)
            if report is None:
                self._ctl.send(wire.CkptImageMsg(self._rank, b""))
            else:
                self._ctl.send(report)
        finally:
            self._in_safe_point = False

    def _ckpt_try_seal_locked(self):
        c = self._ckpt
        if c is None or c.expected is None:
            return
        for src, total in c.expected.items():
            chan = self._channels.get(src)
            if (chan.arrived if chan else 0) < total:
                return
        frames = []
        for (src, tag), envs in sorted(c.queues.items()):
            frames.extend(wire.encode(env) for env in envs)
        for src in sorted(c.recorded):
            needed = c.expected.get(src, 0) - c.arr_at_snap.get(src, 0)
            if needed > 0:
                frames.extend(wire.encode(env) for env in c.recorded[src][:needed])
        meta = self._image_meta()
        meta[_INFLIGHT_KEY] = base64.b64encode(b"".join(frames)).decode("ascii")
        image = ckpt.snapshot(c.blob, meta)
        data = ckpt.encode_image(image)
        self._ckpt = None
        self._ctl.send(wire.CkptImageMsg(self._rank, data))

    # -- resolution helpers -------------------------------------------------

    def _resolve_locked(self, comm: CommRef) -> tuple[WorldView, int, list[int]]:
        if comm is None or comm.null:
            raise NullCommunicator("operation on the NULL communicator")
        if not len(self._history):
            raise UnknownVersion("no committed world view yet")
        version = comm.version
        if version is None:
            version = self._history.latest_version
        if version > self._history.latest_version:
            if self._pending_view is not None and version == self._pending_view.version:
                view = self._pending_view
                return view, version, view_members(view, comm.family)
            raise UnknownVersion(f"v{version} is not committed here")
        view = self._history.view_at(version)
        return view, version, view_members(view, comm.family)

    def _require_open(self):
        if self._closed:
            raise Disconnected("handle was finalized")
        if self._broken:
            raise Disconnected("controller link lost")

    def _pop_status_locked(self) -> StatusCode:
        if self._notices:
            self._notices.popleft()
            return StatusCode.WORLD_RESIZED
        return StatusCode.OK

    def _pop_status(self) -> StatusCode:
        with self._cv:
            return self._pop_status_locked()

    def _await_commit_barrier(self, version: int):
        key = (Family.WORLD, version, COMMIT_SEQ)
        with self._cv:
            while not (
                key in self._releases
                and len(self._history)
                and self._history.latest_version >= version
            ):
                if self._broken:
                    raise Disconnected("controller link lost")
                self._cv.wait()

    # -- public surface -----------------------------------------------------

    @property
    def my_rank(self) -> int:
        return self._rank

    @property
    def restored(self) -> bool:
        return self._restored_payload is not None

    def restored_state(self) -> Optional[bytes]:
        return self._restored_payload

    def world_version(self) -> int:
        with self._cv:
            return self._history.latest_version

    def latest_view(self) -> WorldView:
        with self._cv:
            return self._history.latest

    def view_at(self, version: int) -> WorldView:
        with self._cv:
            return self._history.view_at(version)

    def history_length(self) -> int:
        with self._cv:
            return len(self._history)

    def base_version(self) -> int:
        with self._cv:
            return self._history.base_version

    def has_pending_epoch(self) -> bool:
        with self._cv:
            return self._pending_view is not None

    def pending_view(self) -> Optional[WorldView]:
        with self._cv:
            return self._pending_view

    def membership(self, comm: CommRef) -> list[int]:
        with self._cv:
            _, _, members = self._resolve_locked(comm)
            return members

    def wait_world_change(self, beyond: int, timeout: float = 10.0) -> Optional[WorldView]:
        """Block until a view newer than ``beyond`` is pending or committed."""
        deadline = time.monotonic() + timeout
        with self._cv:
            while True:
                if self._pending_view is not None and self._pending_view.version > beyond:
                    return self._pending_view
                if len(self._history) and self._history.latest_version > beyond:
                    return self._history.latest
                remaining = deadline - time.monotonic()
                if remaining <= 0 or self._broken or self._closed:
                    return None
                self._cv.wait(remaining)

    def resized_world(self) -> CommRef:
        with self._cv:
            view = self._history.newest_with_origin(Origin.SPAWN_MERGE) if len(self._history) else None
        if view is None:
            return CommRef.NULL
        return CommRef.resized_world(view.version)

    def comm_parents(self) -> CommRef:
        with self._cv:
            view = self._history.newest_with_origin(Origin.FORK) if len(self._history) else None
        if view is None:
            return CommRef.NULL
        return CommRef.parents(view.version)

    def comm_children(self) -> CommRef:
        with self._cv:
            view = self._history.newest_with_origin(Origin.FORK) if len(self._history) else None
        if view is None:
            return CommRef.NULL
        return CommRef.children(view.version)

    def send(self, dst: int, tag: int, payload: bytes, comm: CommRef = CommRef.world()) -> StatusCode:
        self._require_open()
        if not isinstance(payload, (bytes, bytearray, memoryview)):
            raise SerializationFailed("payload must be bytes-like")
        with self._cv:
            view, version, members = self._resolve_locked(comm)
            if dst == self._rank:
                raise RankOutOfRange("point-to-point requires src != dst")
            if dst not in members:
                raise RankOutOfRange(f"rank {dst} not in {comm!r} of size {len(members)}")
            if self._rank not in members:
                raise RankOutOfRange(f"caller rank {self._rank} not in {comm!r}")
            endpoint = view.endpoint(dst)
        link = self._peer_link(dst, endpoint)
        link.send(Envelope(self._rank, dst, comm.family, version, tag, bytes(payload)))
        with self._cv:
            self._sent[dst] += 1
            return self._pop_status_locked()

    def recv(self, src: int, tag: int, comm: CommRef = CommRef.world()) -> tuple[bytes, StatusCode]:
        self._require_open()
        with self._cv:
            _, _, members = self._resolve_locked(comm)
            if src == self._rank:
                raise RankOutOfRange("point-to-point requires src != dst")
            if src not in members:
                raise RankOutOfRange(f"rank {src} not in {comm!r} of size {len(members)}")
            if self._rank not in members:
                raise RankOutOfRange(f"caller rank {self._rank} not in {comm!r}")
            ch = self._channel(src)
            while not ch.queues.get(tag):
                if self._closed or self._broken:
                    raise Disconnected("handle closed while receiving")
                self._cv.wait()
            env = ch.queues[tag].popleft()
            return env.payload, self._pop_status_locked()

    def _peer_link(self, dst: int, endpoint: tuple[str, int]) -> Link:
        cached = self._peer_links.get(dst)
        if cached is not None and cached[0] == endpoint:
            return cached[1]
        if cached is not None:
            try:
                cached[1].close()
            except Exception:
                pass
        link = wire.connect(*endpoint, timeout=self._op_timeout)
        self._peer_links[dst] = (endpoint, link)
        return link

    def barrier(self, comm: CommRef = CommRef.world()) -> StatusCode:
        self._require_open()
        if comm is None or comm.null:
            raise NullCommunicator("barrier on the NULL communicator")
        with self._cv:
            if self._pending_view is not None and comm.family is Family.WORLD:
                # barrier on WORLD while an epoch is pending is the commit point
                version, seq = self._pending_view.version, COMMIT_SEQ
                commit = version
            else:
                _, version, members = self._resolve_locked(comm)
                if self._rank not in members:
                    raise RankOutOfRange(f"caller rank {self._rank} not in {comm!r}")
                seq = self._bseq[(comm.family, version)]
                self._bseq[(comm.family, version)] += 1
                commit = None
        self._ctl.send(wire.BarrierEnter(comm.family, version, seq, self._rank))
        if commit is not None:
            self._await_commit_barrier(commit)
        else:
            key = (comm.family, version, seq)
            with self._cv:
                while key not in self._releases:
                    if self._broken or self._closed:
                        raise Disconnected("handle closed while in barrier")
                    self._cv.wait()
        return self._pop_status()

    def fork(self, m: int) -> int:
        """Clone the first m ranks into m new ranks; collective over WORLD.

        Returns m in pre-existing ranks, 0 in the new ranks, or a negative
        code shared by every caller (-1 mismatched m, -2 out of range,
        -3 spawn/restore failure).
        """
        self._require_open()
        with self._cv:
            if self._fork_child_pending:
                self._fork_child_pending = False
                return 0
            if self._state is None:
                raise StateUnregistered("register_state must be called before fork")
            self._fork_slot = None
        self._registry.run("pre_checkpoint")
        self._ctl.send(wire.ForkReq(m, self._rank))
        with self._cv:
            while self._fork_slot is None:
                if self._broken or self._closed:
                    raise Disconnected("handle closed while in fork")
                self._cv.wait()
            return self._fork_slot

    def comm_spawn(
        self,
        command: Sequence[str],
        maxprocs: int,
        root: int = 0,
        comm: CommRef = CommRef.world(),
        directed: bool = False,
    ) -> InterComm:
        """Start ``maxprocs`` fresh ranks running ``command``; collective over comm."""
        self._require_open()
        if maxprocs < 1:
            raise SpawnFailed("maxprocs must be positive")
        with self._cv:
            _, _, members = self._resolve_locked(comm)
            if self._rank not in members:
                raise RankOutOfRange(f"caller rank {self._rank} not in {comm!r}")
            if root not in members:
                raise RankOutOfRange(f"root {root} not in {comm!r}")
            self._spawn_slot = None
        self._ctl.send(
            wire.SpawnReq(maxprocs, tuple(command), caller=self._rank, directed=directed)
        )
        with self._cv:
            while self._spawn_slot is None:
                if self._broken or self._closed:
                    raise Disconnected("handle closed while in spawn")
                self._cv.wait()
            rep = self._spawn_slot
        if rep.code == wire.SPAWN_ERR_NOT_COLLECTIVE:
            raise NotCollective(rep.message or "not every member called comm_spawn")
        if rep.code != wire.SPAWN_OK:
            raise SpawnFailed(rep.message or "spawn failed")
        return InterComm(rep.version, rep.low_size, rep.high_size)

    def intercomm_merge(self, inter: InterComm, high: int) -> CommRef:
        """Merge an intercommunicator; the high=0 group orders first."""
        self._require_open()
        in_low = self._rank < inter.low_size
        if in_low and high != 0:
            raise ValueError("the existing group merges with high=0")
        if not in_low and high != 1:
            raise ValueError("the spawned group merges with high=1")
        with self._cv:
            while not (len(self._history) and self._history.has_version(inter.version)):
                if self._broken or self._closed:
                    raise Disconnected("handle closed while merging")
                self._cv.wait()
        return CommRef.merged(inter.version)

    def register_state(self, blob) -> bool:
        with self._cv:
            self._state = blob
        self._safe_point()
        return True

    def replace_state(self, blob) -> bool:
        return self.register_state(blob)

    def registered_state(self):
        with self._cv:
            return self._state

    def finalize(self) -> bool:
        with self._cv:
            if self._closed:
                return True
            self._closed = True
            self._cv.notify_all()
            peer_links = list(self._peer_links.values())
            self._peer_links.clear()
        try:
            self._ctl.send(wire.Finalize(self._rank))
        except Exception:
            pass
        try:
            self._ctl.close()
        except Exception:
            pass
        try:
            self._listener.close()
        except OSError:
            pass
        for _, link in peer_links:
            try:
                link.close()
            except Exception:
                pass
        return True


_HANDLE: Optional[RuntimeHandle] = None


def _parse_bool(value: Optional[str]) -> bool:
    return bool(value) and value not in ("0", "false", "")


def init(environ=None) -> RuntimeHandle:
    """Join the job described by the ELASTIC_* environment.

    A rank launched with ELASTIC_PENDING blocks in the commit barrier of its
    launch epoch until the controller broadcasts the matching commit; a rank
    launched with ELASTIC_RESTORE first rebuilds its registered state and
    buffered envelopes from the image, firing restart hooks before returning.
    """
    global _HANDLE
    if _HANDLE is not None:
        raise DuplicateInit("init was already called in this process")
    env = os.environ if environ is None else environ
    try:
        rank = int(env[ENV_RANK])
        env[ENV_WORLD_SIZE]  # required by the launch contract
        controller = wire.parse_endpoint(env[ENV_CONTROLLER])
    except KeyError as exc:
        raise NotInitialized(f"missing launch variable {exc}")
    epoch = int(env.get(ENV_EPOCH, "0"))
    pending = _parse_bool(env.get(ENV_PENDING))
    node = int(env.get(ENV_NODE, "0"))
    config_path = env.get(ENV_CONFIG, "")
    registry = ckpt.default_registry()
    registry.run("init")

    restored_payload = None
    restored_meta = None
    restore_path = env.get(ENV_RESTORE)
    if restore_path:
        image = ckpt.read_image(restore_path)
        overrides = {
            "rank": rank,
            "world_size": env[ENV_WORLD_SIZE],
            "epoch": epoch,
            "pending": "1" if pending else "0",
        }
        restored_payload, restored_meta = ckpt.restore(image, overrides, registry)

    handle = RuntimeHandle(
        rank=rank,
        node=node,
        controller=controller,
        epoch=epoch,
        pending=pending,
        config_path=config_path,
        restored_payload=restored_payload,
        restored_meta=restored_meta,
        fork_child=_parse_bool(env.get(ENV_FORK_CHILD)),
        registry=registry,
    )
    if restored_payload is not None:
        handle._state = restored_payload
    handle._start()
    _HANDLE = handle
    return handle


def current_handle() -> RuntimeHandle:
    if _HANDLE is None:
        raise NotInitialized("init has not been called")
    return _HANDLE


def register_state(blob) -> bool:
    return current_handle().register_state(blob)


def replace_state(blob) -> bool:
    return current_handle().replace_state(blob)


def _reset_for_tests():
    global _HANDLE
    _HANDLE = None
    ckpt._default_registry = ckpt.HookRegistry()
