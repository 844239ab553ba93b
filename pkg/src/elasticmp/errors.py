"""Exception types shared by the world model, codecs, runtime, and daemons."""


class ElasticError(Exception):
    """Base class for every error this package raises deliberately."""


# membership / versioning

class NullCommunicator(ElasticError):
    pass


class UnknownVersion(ElasticError):
    pass


class VersionSkew(ElasticError):
    pass


class ShrinkUnsupported(ElasticError):
    pass


# wire protocol

class MalformedFrame(ElasticError):
    pass


class UnknownKind(ElasticError):
    pass


class Oversize(ElasticError):
    pass


class ConnectTimeout(ElasticError):
    pass


class Refused(ElasticError):
    pass


class Disconnected(ElasticError):
    pass


# runtime API

class DuplicateInit(ElasticError):
    pass


class NotInitialized(ElasticError):
    pass


class RankOutOfRange(ElasticError):
    pass


class StateUnregistered(ElasticError):
    pass


class SpawnFailed(ElasticError):
    pass


class NotCollective(ElasticError):
    pass


# orchestration

class LaunchFailed(ElasticError):
    def __init__(self, stage: str, detail: str = ""):
        super().__init__(f"{stage}: {detail}" if detail else stage)
        self.stage = stage


class ResizeInProgress(ElasticError):
    pass


class InvalidM(ElasticError):
    pass


class SpawnShortfall(ElasticError):
    def __init__(self, failed: int, planned: int):
        super().__init__(f"{failed} of {planned} new ranks failed to start")
        self.failed = failed
        self.planned = planned


class CheckpointUnavailable(ElasticError):
    pass


class StrayEnter(ElasticError):
    pass


class QuiesceTimeout(ElasticError):
    pass


# checkpoint images

class SerializationFailed(ElasticError):
    pass


class BadMagic(ElasticError):
    pass


class VersionUnsupported(ElasticError):
    pass


class OverrideConflict(ElasticError):
    pass


# demo data movement

class PartitionMismatch(ElasticError):
    pass
