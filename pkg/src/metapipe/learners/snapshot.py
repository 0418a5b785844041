"""Text snapshots of learner state: one JSON header line plus a tensor list."""

from __future__ import annotations

import hashlib
import json

import numpy as np

from ..core import PipelineSpec
from ..tinynn import dump_tensors, load_tensors
from .base import Learner
from .global_cb import GlobalCB
from .per_module import PerModuleCB

SNAPSHOT_FORMAT = "metapipe-learner"
SNAPSHOT_VERSION = 1

_KINDS = {cls.kind: cls for cls in (GlobalCB, PerModuleCB)}


class SnapshotError(ValueError):
    pass


def learner_snapshot(learner: Learner) -> str:
    body = dump_tensors(learner.tensors())
    header = {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "kind": learner.kind,
        "spec": learner.spec.to_dict(),
        "spec_hash": learner.spec.digest(),
        "hyperparameters": learner.hyperparameters(),
        "num_updates": learner.num_updates,
        "extra": learner.extra_state(),
        "rng_state": learner.rng.bit_generator.state,
        "checksum": hashlib.sha256(body.encode()).hexdigest(),
    }
    return json.dumps(header, sort_keys=True) + "\n" + body


def learner_restore(blob: str) -> Learner:
    head, sep, body = blob.partition("\n")
    if not sep:
        raise SnapshotError("snapshot has no tensor section")
    try:
        header = json.loads(head)
    except json.JSONDecodeError as exc:
        raise SnapshotError(f"unreadable snapshot header: {exc}") from exc
    if header.get("format") != SNAPSHOT_FORMAT:
        raise SnapshotError("not a learner snapshot")
    if header.get("version") != SNAPSHOT_VERSION:
        raise SnapshotError(f"snapshot version {header.get('version')} != supported {SNAPSHOT_VERSION}")
    if hashlib.sha256(body.encode()).hexdigest() != header.get("checksum"):
        raise SnapshotError("snapshot checksum mismatch (corrupted tensor data)")
    spec = PipelineSpec.from_dict(header["spec"])
    if spec.digest() != header.get("spec_hash"):
        raise SnapshotError("snapshot spec hash mismatch")
    cls = _KINDS.get(header.get("kind"))
    if cls is None:
        raise SnapshotError(f"unknown learner kind {header.get('kind')!r}")

    bitgen_name = header["rng_state"]["bit_generator"]
    bitgen = getattr(np.random, bitgen_name)()
    bitgen.state = header["rng_state"]
    rng = np.random.Generator(bitgen)

    hp = dict(header["hyperparameters"])
    try:
        if cls is GlobalCB:
            learner = GlobalCB(spec, hp.pop("input_dim"), rng, init="zeros", **hp)
        else:
            learner = PerModuleCB(spec, hp.pop("context_dims"), rng, init="zeros", **hp)
        learner.load_tensors(load_tensors(body))
    except (TypeError, ValueError, KeyError) as exc:
        raise SnapshotError(f"snapshot does not match its header: {exc}") from exc
    learner.num_updates = int(header.get("num_updates", 0))
    learner.load_extra_state(header.get("extra", {}))
    return learner
