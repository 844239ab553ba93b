"""Cooperative snapshot/restore of a rank's registered state plus runtime metadata.

An image is self-contained: restoring it on another logical node with a few
metadata overrides (rank, world_size, epoch, pending) is how a fork child
becomes rank n+p and how a restarted world learns its new size.

Image layout (little-endian): ``"ELCK" | format:u16 | count:u32 |
(klen:u32 key vlen:u32 value)* | plen:u32 payload``.  Metadata is written
sorted by key, so identical inputs encode to identical bytes.
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

from .errors import (
    BadMagic,
    MalformedFrame,
    OverrideConflict,
    SerializationFailed,
    VersionUnsupported,
)
from .worldmodel import WorldView

MAGIC = b"ELCK"
FORMAT_VERSION = 1

#: Metadata keys that may always be overridden at restore time.
OVERRIDE_KEYS = frozenset({"rank", "world_size", "epoch", "pending"})

HOOK_PHASES = ("init", "pre_checkpoint", "restart")

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


@dataclass
class CheckpointImage:
    """Serialized rank state: metadata table plus an opaque payload."""

    metadata: dict[str, str]
    payload: bytes
    format_version: int = FORMAT_VERSION


def _as_bytes(state) -> bytes:
    if isinstance(state, bytes):
        return state
    if isinstance(state, (bytearray, memoryview)):
        return bytes(state)
    raise SerializationFailed(f"state must be bytes-like, got {type(state).__name__}")


def encode_image(image: CheckpointImage) -> bytes:
    parts = [MAGIC, _U16.pack(image.format_version)]
    items = sorted(image.metadata.items())
    parts.append(_U32.pack(len(items)))
    for key, value in items:
        kb = key.encode("utf-8")
        vb = value.encode("utf-8")
        parts.extend((_U32.pack(len(kb)), kb, _U32.pack(len(vb)), vb))
    parts.extend((_U32.pack(len(image.payload)), image.payload))
    return b"".join(parts)


def decode_image(data: bytes) -> CheckpointImage:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic("not a checkpoint image")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise MalformedFrame("truncated checkpoint image")
        out = data[pos : pos + n]
        pos += n
        return out

    (version,) = _U16.unpack(take(2))
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"image format {version} not supported")
    (count,) = _U32.unpack(take(4))
    metadata: dict[str, str] = {}
    for _ in range(count):
        (klen,) = _U32.unpack(take(4))
        key = take(klen).decode("utf-8")
        (vlen,) = _U32.unpack(take(4))
        value = take(vlen).decode("utf-8")
        if key in metadata:
            raise MalformedFrame(f"duplicate metadata key {key!r}")
        metadata[key] = value
    (plen,) = _U32.unpack(take(4))
    payload = take(plen)
    if pos != len(data):
        raise MalformedFrame("trailing bytes after checkpoint image")
    return CheckpointImage(metadata, payload, version)


def snapshot(rank_state, runtime_meta: Mapping[str, object]) -> CheckpointImage:
    """Capture the registered state and metadata; deterministic for equal inputs."""
    payload = _as_bytes(rank_state)
    metadata = {str(k): str(v) for k, v in runtime_meta.items()}
    return CheckpointImage(metadata, payload)


def restore(
    image: CheckpointImage,
    overrides: Optional[Mapping[str, object]] = None,
    registry: Optional["HookRegistry"] = None,
) -> tuple[bytes, dict[str, str]]:
    """Recover (state bytes, effective metadata), applying overrides.

    Override keys must already exist in the image or be one of the
    rewritable launch keys; on_restart hooks fire with the effective
    metadata before the caller regains control.
    """
    effective = dict(image.metadata)
    if overrides:
        for key, value in overrides.items():
            key = str(key)
            if key not in effective and key not in OVERRIDE_KEYS:
                raise OverrideConflict(f"unknown metadata key {key!r}")
            effective[key] = str(value)
    if registry is not None:
        registry.run("restart", effective)
    return image.payload, effective


@dataclass
class HookRegistry:
    """Ordered callback lists for the init / pre-checkpoint / restart phases."""

    on_init: list[Callable] = field(default_factory=list)
    on_pre_checkpoint: list[Callable] = field(default_factory=list)
    on_restart: list[Callable] = field(default_factory=list)

    def _list_for(self, phase: str) -> list[Callable]:
        if phase not in HOOK_PHASES:
            raise ValueError(f"unknown hook phase {phase!r}")
        return getattr(self, f"on_{phase}")

    def run(self, phase: str, *args):
        for callback in list(self._list_for(phase)):
            callback(*args)


def register_hook(registry: HookRegistry, phase: str, callback: Callable) -> bool:
    """Append a callback; duplicates are allowed and run in order."""
    registry._list_for(phase).append(callback)
    return True


_default_registry = HookRegistry()


def default_registry() -> HookRegistry:
    return _default_registry


def atomic_write_bytes(path: str, data: bytes):
    """Write via a temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path: str, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_image(path: str, image: CheckpointImage):
    atomic_write_bytes(path, encode_image(image))


def read_image(path: str) -> CheckpointImage:
    with open(path, "rb") as fh:
        return decode_image(fh.read())


MANIFEST_NAME = "manifest"


def write_manifest(directory: str, view: WorldView, filenames: Mapping[int, str]) -> str:
    """Manifest: ``version <tag> size <n>`` then one ``rank <r> <file>`` line per rank."""
    lines = [f"version {view.version} size {view.size}"]
    for rank in range(view.size):
        lines.append(f"rank {rank} {filenames[rank]}")
    path = os.path.join(directory, MANIFEST_NAME)
    atomic_write_text(path, "\n".join(lines) + "\n")
    return path


def parse_manifest(directory: str) -> tuple[int, int, dict[int, str]]:
    """Read a manifest; returns (version, size, rank -> image filename)."""
    path = os.path.join(directory, MANIFEST_NAME)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = [line.strip() for line in fh if line.strip()]
    except OSError as exc:
        raise MalformedFrame(f"cannot read manifest: {exc}")
    if not lines:
        raise MalformedFrame("empty manifest")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "version" or head[2] != "size":
        raise MalformedFrame(f"bad manifest header: {lines[0]!r}")
    try:
        version, size = int(head[1]), int(head[3])
    except ValueError:
        raise MalformedFrame(f"bad manifest header: {lines[0]!r}")
    files: dict[int, str] = {}
    for line in lines[1:]:
        parts = line.split(maxsplit=2)
        if len(parts) != 3 or parts[0] != "rank":
            raise MalformedFrame(f"bad manifest line: {line!r}")
        try:
            rank = int(parts[1])
        except ValueError:
            raise MalformedFrame(f"bad manifest line: {line!r}")
        files[rank] = parts[2]
    if sorted(files) != list(range(size)):
        raise MalformedFrame("manifest does not list every rank exactly once")
    return version, size, files
