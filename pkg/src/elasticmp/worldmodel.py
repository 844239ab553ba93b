"""Membership and versioning model: who belongs to which communicator at which epoch.

Every resize, spawn-merge, or fork commits a new ``WorldView`` with the next
version tag.  Views are append-only and grow-only; membership queries against
an old tag keep answering with the membership frozen at that tag.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Optional

from .errors import NullCommunicator, ShrinkUnsupported, UnknownVersion, VersionSkew

#: Version wildcard; resolves to the newest committed tag at use time.
LATEST: Optional[int] = None


class Family(enum.IntEnum):
    """Communicator families a rank can address."""

    WORLD = 0
    PARENTS = 1
    CHILDREN = 2
    RESIZED_WORLD = 3
    MERGED = 4


class Origin(enum.IntEnum):
    """What kind of event committed a view."""

    INITIAL = 0
    GROW = 1
    SPAWN_MERGE = 2
    FORK = 3


@dataclass(frozen=True)
class WorldView:
    """Membership snapshot at one epoch.

    ``endpoints`` is indexed by rank (ranks are always the dense range
    0..size-1).  ``parents``/``children`` partition the ranks when the view
    was created by a fork and are empty otherwise.
    """

    version: int
    size: int
    endpoints: tuple[tuple[str, int], ...]
    parents: frozenset[int] = frozenset()
    children: frozenset[int] = frozenset()
    origin: Origin = Origin.INITIAL

    def __post_init__(self):
        if self.version < 0:
            raise ValueError("version tags are non-negative")
        if self.size < 1:
            raise ValueError("a world has at least one rank")
        if len(self.endpoints) != self.size:
            raise ValueError("endpoints must cover every rank exactly")
        ranks = set(range(self.size))
        if not (self.parents <= ranks and self.children <= ranks):
            raise ValueError("partition names ranks outside the world")
        if self.parents & self.children:
            raise ValueError("parents and children must be disjoint")
        if self.origin is Origin.FORK:
            if not self.parents or not self.children:
                raise ValueError("a fork view needs both partition sides")
            if self.parents | self.children != ranks:
                raise ValueError("fork partition must cover the world")
        elif self.parents or self.children:
            raise ValueError("only fork views carry a partition")

    def endpoint(self, rank: int) -> tuple[str, int]:
        return self.endpoints[rank]


@dataclass(frozen=True)
class CommRef:
    """Handle naming a communicator family plus an optional version tag.

    ``version=None`` means LATEST.  The distinguished NULL value carries no
    family or version; operations on it raise ``NullCommunicator``.
    """

    family: Optional[Family] = None
    version: Optional[int] = None
    null: bool = False

    # assigned below the class body
    NULL: "CommRef" = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.null and self.family is not None:
            raise ValueError("a NULL CommRef has no family")
        if not self.null and self.family is None:
            raise ValueError("a non-NULL CommRef needs a family")
        if self.version is not None and self.version < 0:
            raise ValueError("version tags are non-negative")

    @classmethod
    def world(cls, version: Optional[int] = LATEST) -> "CommRef":
        return cls(Family.WORLD, version)

    @classmethod
    def parents(cls, version: Optional[int] = LATEST) -> "CommRef":
        return cls(Family.PARENTS, version)

    @classmethod
    def children(cls, version: Optional[int] = LATEST) -> "CommRef":
        return cls(Family.CHILDREN, version)

    @classmethod
    def resized_world(cls, version: Optional[int] = LATEST) -> "CommRef":
        return cls(Family.RESIZED_WORLD, version)

    @classmethod
    def merged(cls, version: int) -> "CommRef":
        return cls(Family.MERGED, version)

    @property
    def is_null(self) -> bool:
        return self.null

    def __repr__(self):
        if self.null:
            return "CommRef.NULL"
        tag = "LATEST" if self.version is None else f"v{self.version}"
        return f"CommRef({self.family.name}, {tag})"


CommRef.NULL = CommRef(null=True)


class WorldHistory:
    """Append-only sequence of committed views, contiguous by version.

    The first committed view fixes the base version (0 for a fresh job, the
    recorded tag for a restarted one).  All queries are pure; the structure
    is written only by epoch commits.
    """

    def __init__(self, views: Iterable[WorldView] = ()):
        self._views: list[WorldView] = []
        for view in views:
            self.commit_view(view)

    def __len__(self) -> int:
        return len(self._views)

    @property
    def views(self) -> tuple[WorldView, ...]:
        return tuple(self._views)

    @property
    def base_version(self) -> int:
        if not self._views:
            raise UnknownVersion("empty history")
        return self._views[0].version

    @property
    def latest(self) -> WorldView:
        if not self._views:
            raise UnknownVersion("empty history")
        return self._views[-1]

    @property
    def latest_version(self) -> int:
        return self.latest.version

    def has_version(self, version: int) -> bool:
        return bool(self._views) and self.base_version <= version <= self.latest_version

    def view_at(self, version: int) -> WorldView:
        if not self.has_version(version):
            raise UnknownVersion(f"no committed view tagged v{version}")
        return self._views[version - self.base_version]

    def commit_view(self, next_view: WorldView) -> "WorldHistory":
        """Append the next view; versions are contiguous and sizes grow-only."""
        if self._views:
            if next_view.version != self.latest_version + 1:
                raise VersionSkew(
                    f"expected v{self.latest_version + 1}, got v{next_view.version}"
                )
            if next_view.size < self.latest.size:
                raise ShrinkUnsupported(
                    f"size {next_view.size} < committed size {self.latest.size}"
                )
        self._views.append(next_view)
        return self

    def resolve_default_version(self, comm: CommRef) -> CommRef:
        """Make a LATEST reference concrete; concrete references pass through."""
        if comm.null or comm.version is not None:
            return comm
        return CommRef(comm.family, self.latest_version)

    def membership(self, comm: CommRef) -> list[int]:
        """Ordered ranks belonging to ``comm`` at its resolved version."""
        if comm.null:
            raise NullCommunicator("membership of the NULL communicator")
        version = self.latest_version if comm.version is None else comm.version
        return view_members(self.view_at(version), comm.family)

    def newest_with_origin(self, origin: Origin) -> Optional[WorldView]:
        for view in reversed(self._views):
            if view.origin is origin:
                return view
        return None


def view_members(view: WorldView, family: Family) -> list[int]:
    """Ordered ranks of one family within a single view."""
    if family is Family.WORLD:
        return list(range(view.size))
    if family is Family.PARENTS:
        if not view.parents:
            raise NullCommunicator(f"no fork created v{view.version}")
        return sorted(view.parents)
    if family is Family.CHILDREN:
        if not view.children:
            raise NullCommunicator(f"no fork created v{view.version}")
        return sorted(view.children)
    if family in (Family.RESIZED_WORLD, Family.MERGED):
        if view.origin is not Origin.SPAWN_MERGE:
            raise NullCommunicator(f"v{view.version} was not created by a merge")
        return list(range(view.size))
    raise NullCommunicator(f"unsupported family {family!r}")


def membership(history: WorldHistory, comm: CommRef) -> list[int]:
    return history.membership(comm)


def commit_view(history: WorldHistory, next_view: WorldView) -> WorldHistory:
    return history.commit_view(next_view)


def resolve_default_version(history: WorldHistory, comm: CommRef) -> CommRef:
    return history.resolve_default_version(comm)
