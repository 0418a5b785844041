"""Two-module face detection -> landmark detection surrogate.

The real detectors are black boxes, so this module simulates them: face
counts drive detector latency and accuracy, and a fixed random projection
of the scene's latent features stands in for an image embedding.  Only the
~0.2 s / ~2.5 s detector anchors and the ordering of latency and accuracy
across actions are meant to be realistic; every number below is a
tunable default.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from enum import Enum

import numpy as np

from .core import PipelineSpec

LANDMARKS_PER_FACE = 5
LANDMARK_ACTIONS = ("5pt", "27pt", "87pt")


class LossVariant(str, Enum):
    PURE_LATENCY = "pure_latency"
    LATENCY_FNR = "latency_fnr"
    LATENCY_FNR_FDR = "latency_fnr_fdr"


@dataclass(frozen=True)
class DetectorModel:
    base_latency: tuple[float, ...] = (0.2, 1.0, 0.5, 2.5)
    latency_slope: tuple[float, ...] = (0.05, 0.2, 0.1, 0.4)
    jitter_sigma: float = 0.1
    recall: tuple[float, ...] = (0.80, 0.90, 0.85, 0.97)
    fp_rate: tuple[float, ...] = (0.3, 0.15, 0.2, 0.05)

    def __post_init__(self):
        n = len(self.base_latency)
        if not (len(self.latency_slope) == len(self.recall) == len(self.fp_rate) == n):
            raise ValueError("detector calibration entries must have one value per action")
        if min(self.base_latency) <= 0:
            raise ValueError("detector base latency must be positive")
        if any(not 0.0 <= r <= 1.0 for r in self.recall):
            raise ValueError("detector recall must lie in [0, 1]")

    @property
    def num_actions(self) -> int:
        return len(self.base_latency)


@dataclass(frozen=True)
class LandmarkModel:
    per_face_latency: tuple[float, ...] = (0.016, 0.034, 0.05)
    recall: tuple[float, ...] = (0.70, 0.85, 0.95)

    def __post_init__(self):
        if len(self.per_face_latency) != len(self.recall):
            raise ValueError("landmark calibration entries must have one value per action")
        if list(self.per_face_latency) != sorted(self.per_face_latency):
            raise ValueError("landmark latencies must increase with the number of points")
        if any(not 0.0 <= r <= 1.0 for r in self.recall):
            raise ValueError("landmark recall must lie in [0, 1]")

    @property
    def num_actions(self) -> int:
        return len(self.per_face_latency)


@dataclass(frozen=True)
class PerceptionLossConfig:
    variant: LossVariant = LossVariant.LATENCY_FNR
    t0: float = 1.3

    def __post_init__(self):
        object.__setattr__(self, "variant", LossVariant(self.variant))
        if self.t0 <= 0:
            raise ValueError("t0 must be positive")


def default_face_count_pmf(p_zero: float = 0.1, p_geom: float = 0.45, cap: int = 10) -> np.ndarray:
    """P(0) = p_zero, then a geometric tail on 1..cap (mass at cap absorbs the rest)."""
    k = np.arange(1, cap + 1)
    tail = p_geom * (1 - p_geom) ** (k - 1)
    tail[-1] += (1 - p_geom) ** cap
    return np.concatenate([[p_zero], (1 - p_zero) * tail])


@dataclass(frozen=True)
class SceneConfig:
    face_count_pmf: tuple[float, ...] = tuple(default_face_count_pmf())
    embedding_dim: int = 64
    embedding_noise: float = 0.3
    projection_seed: int = 7

    @property
    def max_faces(self) -> int:
        return len(self.face_count_pmf) - 1


@dataclass(frozen=True)
class PerceptionConfig:
    scenes: SceneConfig = field(default_factory=SceneConfig)
    detector: DetectorModel = field(default_factory=DetectorModel)
    landmarks: LandmarkModel = field(default_factory=LandmarkModel)
    loss: PerceptionLossConfig = field(default_factory=PerceptionLossConfig)
    train_size: int = 2139
    test_size: int = 550
    dataset_seed: int = 2017

    @classmethod
    def from_dict(cls, doc: dict) -> "PerceptionConfig":
        doc = dict(doc or {})
        kw = {}
        if "scenes" in doc:
            s = dict(doc.pop("scenes"))
            if "face_count_pmf" in s:
                s["face_count_pmf"] = tuple(float(v) for v in s["face_count_pmf"])
            kw["scenes"] = SceneConfig(**s)
        if "detector" in doc:
            kw["detector"] = DetectorModel(**{k: _tup(v) for k, v in doc.pop("detector").items()})
        if "landmarks" in doc:
            kw["landmarks"] = LandmarkModel(**{k: _tup(v) for k, v in doc.pop("landmarks").items()})
        if "loss" in doc:
            kw["loss"] = PerceptionLossConfig(**doc.pop("loss"))
        for key in ("variant", "t0"):
            if key in doc:
                kw["loss"] = replace(kw.get("loss", PerceptionLossConfig()), **{key: doc.pop(key)})
        kw.update(doc)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"]["variant"] = self.loss.variant.value
        return d


def _tup(v):
    return tuple(v) if isinstance(v, (list, tuple)) else v


@dataclass
class SceneSample:
    """A batch of scenes (arrays share the leading axis)."""

    true_face_count: np.ndarray  # (N,) int
    difficulty: np.ndarray  # (N,)
    context_embedding: np.ndarray  # (N, embedding_dim)

    def __len__(self) -> int:
        return len(self.true_face_count)

    def take(self, idx) -> "SceneSample":
        return SceneSample(self.true_face_count[idx], self.difficulty[idx], self.context_embedding[idx])


def projection_matrix(cfg: SceneConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.projection_seed)
    latent = cfg.max_faces + 2  # face-count one-hot plus difficulty
    return rng.normal(0.0, 1.0, size=(cfg.embedding_dim, latent))


def sample_scene(cfg: SceneConfig, rng: np.random.Generator, size: int = 1) -> SceneSample:
    pmf = np.asarray(cfg.face_count_pmf, dtype=float)
    faces = rng.choice(len(pmf), size=size, p=pmf / pmf.sum())
    difficulty = rng.uniform(0.0, 1.0, size=size)
    latent = np.zeros((size, cfg.max_faces + 2))
    latent[np.arange(size), faces] = 1.0
    latent[:, -1] = difficulty
    emb = latent @ projection_matrix(cfg).T
    if cfg.embedding_noise > 0:
        emb = emb + rng.normal(0.0, cfg.embedding_noise, size=emb.shape)
    return SceneSample(faces.astype(np.int64), difficulty, emb)


def detect_faces(face_count, action, model: DetectorModel, rng: np.random.Generator):
    """Returns ``(tp, fp, fn, latency)`` arrays for each scene."""
    face_count = np.asarray(face_count, dtype=np.int64)
    a = np.broadcast_to(np.asarray(action, dtype=np.int64), face_count.shape)
    if np.any((a < 0) | (a >= model.num_actions)):
        raise ValueError("face detector action out of range")
    base = np.asarray(model.base_latency)[a]
    slope = np.asarray(model.latency_slope)[a]
    s = model.jitter_sigma
    jitter = np.exp(rng.normal(-0.5 * s * s, s, size=face_count.shape)) if s > 0 else 1.0
    latency = (base + slope * face_count) * jitter
    tp = rng.binomial(face_count, np.asarray(model.recall)[a])
    fp = rng.poisson(np.asarray(model.fp_rate)[a])
    return tp, fp, face_count - tp, latency


def detect_landmarks(face_count, tp_faces, fp_faces, action, model: LandmarkModel, rng: np.random.Generator):
    """Landmark counts against 5 ground-truth points per true face.

    Returns ``(tp, fp, fn, latency)``.  Missed faces contribute all five of
    their landmarks to ``fn``; every landmark placed on a spurious face is a
    false positive.
    """
    tp_faces = np.asarray(tp_faces, dtype=np.int64)
    fp_faces = np.asarray(fp_faces, dtype=np.int64)
    a = np.broadcast_to(np.asarray(action, dtype=np.int64), tp_faces.shape)
    if np.any((a < 0) | (a >= model.num_actions)):
        raise ValueError("landmark action out of range")
    latency = np.asarray(model.per_face_latency)[a] * (tp_faces + fp_faces)
    tp = rng.binomial(LANDMARKS_PER_FACE * tp_faces, np.asarray(model.recall)[a])
    fn = LANDMARKS_PER_FACE * np.asarray(face_count, dtype=np.int64) - tp
    fp = LANDMARKS_PER_FACE * fp_faces
    return tp, fp, fn, latency


def fnr_fdr(tp, fp, fn):
    """False negative / false discovery rates; 0 when the denominator is 0."""
    tp, fp, fn = (np.asarray(v, dtype=float) for v in (tp, fp, fn))
    with np.errstate(invalid="ignore", divide="ignore"):
        fnr = np.where(tp + fn > 0, fn / np.where(tp + fn > 0, tp + fn, 1.0), 0.0)
        fdr = np.where(tp + fp > 0, fp / np.where(tp + fp > 0, tp + fp, 1.0), 0.0)
    if fnr.ndim == 0:
        return float(fnr), float(fdr)
    return fnr, fdr


def perception_loss(total_latency, fnr, fdr, cfg: PerceptionLossConfig):
    out = (np.asarray(total_latency, dtype=float) - cfg.t0) ** 2
    if cfg.variant in (LossVariant.LATENCY_FNR, LossVariant.LATENCY_FNR_FDR):
        out = out + fnr
    if cfg.variant is LossVariant.LATENCY_FNR_FDR:
        out = out + fdr
    out = np.asarray(out, dtype=float)
    return float(out) if out.ndim == 0 else out


@dataclass
class PerceptionState:
    scenes: SceneSample
    det: dict | None = None
    lm: dict | None = None
    next_module: int = 1


class PerceptionEnv:
    """Face/landmark pipeline over a fixed, seeded train/test scene split.

    Training episodes draw scenes uniformly with replacement from the train
    split; :meth:`heldout` returns the whole test split in order.
    """

    def __init__(self, cfg: PerceptionConfig | None = None):
        self.cfg = cfg or PerceptionConfig()
        rng = np.random.default_rng(self.cfg.dataset_seed)
        self.train = sample_scene(self.cfg.scenes, rng, self.cfg.train_size)
        self.test = sample_scene(self.cfg.scenes, rng, self.cfg.test_size)
        self.spec = PipelineSpec.chain(
            [self.cfg.detector.num_actions, self.cfg.landmarks.num_actions],
            loss_name=f"perception:{self.cfg.loss.variant.value}",
        )
        self.input_dim = self.cfg.scenes.embedding_dim

    def context_dim(self, module_id: int) -> int:
        return self.input_dim + (2 if module_id == 2 else 0)

    def reset(self, batch_size, rng):
        idx = rng.integers(0, len(self.train), size=batch_size)
        return PerceptionState(self.train.take(idx))

    def heldout(self, rng=None):
        return PerceptionState(self.test.take(np.arange(len(self.test))))

    def context(self, state: PerceptionState, module_id: int) -> np.ndarray:
        emb = state.scenes.context_embedding
        if module_id == 1:
            return emb
        if state.det is None:
            raise ValueError("module 2 context requested before the face detector ran")
        detected = (state.det["tp"] + state.det["fp"]).astype(float)
        return np.concatenate([emb, detected[:, None], state.det["latency"][:, None]], axis=1)

    def step(self, state: PerceptionState, module_id: int, actions, rng):
        if module_id != state.next_module:
            raise ValueError(f"module {module_id} stepped out of order")
        fc = state.scenes.true_face_count
        if module_id == 1:
            tp, fp, fn, lat = detect_faces(fc, actions, self.cfg.detector, rng)
            state.det = {"tp": tp, "fp": fp, "fn": fn, "latency": lat}
        else:
            tp, fp, fn, lat = detect_landmarks(fc, state.det["tp"], state.det["fp"], actions, self.cfg.landmarks, rng)
            state.lm = {"tp": tp, "fp": fp, "fn": fn, "latency": lat}
        state.next_module += 1
        return lat

    def output(self, state, module_id):
        d = state.det if module_id == 1 else state.lm
        return {k: v.copy() for k, v in d.items()}

    def rates(self, state: PerceptionState):
        lm_fnr, _ = fnr_fdr(state.lm["tp"], state.lm["fp"], state.lm["fn"])
        _, face_fdr = fnr_fdr(state.det["tp"], state.det["fp"], state.det["fn"])
        return lm_fnr, face_fdr

    def loss(self, state: PerceptionState):
        fnr, fdr = self.rates(state)
        total = state.det["latency"] + state.lm["latency"]
        return np.atleast_1d(perception_loss(total, fnr, fdr, self.cfg.loss))

    def heldout_face_counts(self) -> np.ndarray:
        return self.test.true_face_count.copy()
