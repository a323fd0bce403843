from .core import (
    CheckpointGrid,
    EngineError,
    IntegrityError,
    MartingaleTracker,
    ReplicaStreams,
    Trajectory,
    UrnEngine,
    WeightedSlotSampler,
    replica_streams,
)

__all__ = [
    "CheckpointGrid",
    "EngineError",
    "IntegrityError",
    "MartingaleTracker",
    "ReplicaStreams",
    "Trajectory",
    "UrnEngine",
    "WeightedSlotSampler",
    "replica_streams",
]
