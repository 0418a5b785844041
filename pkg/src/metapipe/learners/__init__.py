from .base import Learner, sample_categorical
from .global_cb import GlobalCB, JointActionCodec, default_global_hidden
from .hill_climb import EpochRecord, HillClimbState, evaluate_assignment, hill_climb
from .per_module import COORDINATE, CONCURRENT, PerModuleCB, default_module_hidden
from .snapshot import SnapshotError, learner_restore, learner_snapshot

__all__ = [
    "Learner", "sample_categorical",
    "GlobalCB", "JointActionCodec", "default_global_hidden",
    "EpochRecord", "HillClimbState", "evaluate_assignment", "hill_climb",
    "PerModuleCB", "CONCURRENT", "COORDINATE", "default_module_hidden",
    "SnapshotError", "learner_restore", "learner_snapshot",
]
