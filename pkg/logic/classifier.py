"""Continually learned motion-status classifier over instance embeddings.

A two-layer MLP maps an instance embedding (optionally concatenated with the normalized
object center) to the probability that the instance moves. It is retrained online, with
binary cross-entropy, whenever a segment's geometric evidence contradicts its prediction.
Records labeled dynamic go to a FIFO replay buffer and a few are mixed into every update so
that earlier movers are not forgotten.

An optional frozen prior classifier, trained offline on movable categories, is OR-combined
with the online one: an instance is dynamic when either says so.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from logic.diff_core import AdamState, MlpParams, adam_step, mlp_backward, mlp_forward
from logic.scene_sim import CATEGORY_WEIGHT, INSTANCE_WEIGHT, EmbeddingNoiseModel
from models.config import SlamConfig
from models.data_models import InstanceObservation, Keyframe, MotionMask
from models.exceptions import ContractViolationError

logger = logging.getLogger(__name__)

CLASSIFIER_ACTIVATIONS = ["relu", "none"]


# ============================================================================
# Replay buffer
# ============================================================================

@dataclass
class ReplayRecord:
    """One labeled instance observation."""

    embedding: np.ndarray
    label: int
    frame: int
    instance_id: int = 0
    position: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "embedding": self.embedding.tolist(),
            "label": self.label,
            "frame": self.frame,
            "instance_id": self.instance_id,
            "position": None if self.position is None else self.position.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> ReplayRecord:
        return cls(
            embedding=np.asarray(data["embedding"], dtype=np.float64),
            label=int(data["label"]),
            frame=int(data["frame"]),
            instance_id=int(data.get("instance_id", 0)),
            position=None if data.get("position") is None else np.asarray(data["position"], dtype=np.float64),
        )


class ReplayBuffer:
    """FIFO buffer of dynamic-labeled records with uniform draws without replacement."""

    def __init__(self, capacity: int = 512):
        self.capacity = capacity
        self._records: deque[ReplayRecord] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    def add(self, record: ReplayRecord) -> None:
        if record.label != 1:
            raise ContractViolationError("the replay buffer only holds dynamic-labeled records")
        self._records.append(record)

    def sample(self, n: int, rng: np.random.Generator) -> list[ReplayRecord]:
        if n <= 0 or not self._records:
            return []
        idx = rng.choice(len(self._records), size=min(n, len(self._records)), replace=False)
        return [self._records[i] for i in sorted(idx)]

    def retire(self, instance_id: int, position: np.ndarray, radius: float) -> int:
        """Drop records of ``instance_id`` observed within ``radius`` of ``position``."""
        kept = [
            r for r in self._records
            if not (
                r.instance_id == instance_id
                and r.position is not None
                and np.linalg.norm(r.position - position) <= radius
            )
        ]
        removed = len(self._records) - len(kept)
        self._records = deque(kept, maxlen=self.capacity)
        return removed

    def to_list(self) -> list[dict]:
        return [r.to_dict() for r in self._records]

    @classmethod
    def from_list(cls, items: list[dict], capacity: int) -> ReplayBuffer:
        buffer = cls(capacity)
        for item in items:
            buffer.add(ReplayRecord.from_dict(item))
        return buffer


# ============================================================================
# State
# ============================================================================

@dataclass
class ClassifierState:
    """Online classifier, its optimizer, replay buffer and optional frozen prior."""

    params: MlpParams
    adam: AdamState
    buffer: ReplayBuffer
    room_min: np.ndarray
    room_max: np.ndarray
    position_mode: bool = False
    prior: MlpParams | None = None
    update_count: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @property
    def embedding_dim(self) -> int:
        return self.params.in_width - (3 if self.position_mode else 0)


def new_classifier(
    config: SlamConfig,
    room_min,
    room_max,
    rng: np.random.Generator,
    prior: MlpParams | None = None,
) -> ClassifierState:
    """Fresh classifier: He-uniform hidden layer, zero output layer (probability 0.5)."""
    d_in = config.embedding_dim + (3 if config.position_mode else 0)
    params = MlpParams.initialize([d_in, config.classifier_hidden, 1], CLASSIFIER_ACTIVATIONS, rng)
    params.weights[-1] = np.zeros_like(params.weights[-1])
    adam = AdamState.for_params(
        params.to_tree("cls"), config.classifier_lr,
        beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps,
    )
    return ClassifierState(
        params=params,
        adam=adam,
        buffer=ReplayBuffer(config.buffer_capacity),
        room_min=np.asarray(room_min, dtype=np.float64),
        room_max=np.asarray(room_max, dtype=np.float64),
        position_mode=config.position_mode,
        prior=prior,
        rng=np.random.default_rng([config.seed, 31]),
    )


def _features(state: ClassifierState, embeddings: np.ndarray, positions: np.ndarray | None) -> np.ndarray:
    z = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if z.shape[1] != state.embedding_dim:
        raise ContractViolationError(f"embedding width {z.shape[1]} != classifier width {state.embedding_dim}")
    if not state.position_mode:
        if positions is not None:
            raise ContractViolationError("positions given but the classifier is not in position mode")
        return z
    if positions is None:
        raise ContractViolationError("position mode needs object centers")
    p = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    p_norm = (p - state.room_min) / (state.room_max - state.room_min)
    return np.concatenate([z, p_norm], axis=1)


def _logits(params: MlpParams, x: np.ndarray) -> np.ndarray:
    out, _ = mlp_forward(params, x)
    return out[:, 0]


def online_probability(state: ClassifierState, embeddings: np.ndarray, positions: np.ndarray | None = None) -> np.ndarray:
    return expit(_logits(state.params, _features(state, embeddings, positions)))


def classify(state: ClassifierState, embedding: np.ndarray, position: np.ndarray | None = None) -> float:
    """Motion probability of one instance; dynamic iff the result is > 0.5.

    With a prior the result is max(g, g_prior), which is > 0.5 exactly when either
    classifier says dynamic.
    """
    g = float(online_probability(state, embedding, position)[0])
    if state.prior is not None:
        z = np.atleast_2d(np.asarray(embedding, dtype=np.float64))
        g = max(g, float(expit(_logits(state.prior, z))[0]))
    return g


def is_dynamic(state: ClassifierState, embedding: np.ndarray, position: np.ndarray | None = None) -> bool:
    return classify(state, embedding, position) > 0.5


# ============================================================================
# Updates
# ============================================================================

@dataclass
class LabeledObservation:
    embedding: np.ndarray
    label: int
    frame: int
    instance_id: int = 0
    position: np.ndarray | None = None
    source: str = "forward"

    def to_record(self) -> ReplayRecord:
        return ReplayRecord(self.embedding, self.label, self.frame, self.instance_id, self.position)


def bce_loss(params: MlpParams, x: np.ndarray, labels: np.ndarray) -> tuple[float, MlpParams]:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 labels, with gradients."""
    labels = np.asarray(labels, dtype=np.float64)
    out, cache = mlp_forward(params, x)
    logits = out[:, 0]
    # -[o log g + (1 - o) log(1 - g)] with g = sigmoid(l) equals softplus(l) - o l
    loss = float(np.mean(np.logaddexp(0.0, logits) - labels * logits))
    d_logits = (expit(logits) - labels) / labels.size
    grads, _ = mlp_backward(cache, d_logits[:, None])
    return loss, grads


@dataclass(frozen=True)
class UpdateOutcome:
    updated: bool
    n_conflicts: int
    n_replayed: int = 0
    loss_before: float = 0.0
    loss_after: float = 0.0


def _online_dynamic(state: ClassifierState, obs: LabeledObservation) -> bool:
    pos = obs.position if state.position_mode else None
    return bool(online_probability(state, obs.embedding, pos)[0] > 0.5)


def update_classifier(
    state: ClassifierState,
    observations: list[LabeledObservation],
    config: SlamConfig,
) -> UpdateOutcome:
    """Retrain on the current labeled observations when any label contradicts the online
    prediction.

    Dynamic-labeled observations are appended to the replay buffer; when replay is on,
    ``n_replay`` earlier buffer records join the training batch. Runs ``classifier_steps``
    Adam steps on the cross-entropy and increments ``update_count`` once.
    """
    conflicts = sum(_online_dynamic(state, o) != bool(o.label) for o in observations)
    if conflicts == 0:
        return UpdateOutcome(False, 0)

    replayed = state.buffer.sample(config.n_replay, state.rng) if config.use_replay else []
    batch = [o.to_record() for o in observations] + replayed
    x = _features(
        state,
        np.stack([r.embedding for r in batch]),
        np.stack([r.position for r in batch]) if state.position_mode else None,
    )
    labels = np.array([r.label for r in batch], dtype=np.float64)

    params = state.params
    adam = state.adam
    loss_before = None
    loss = 0.0
    for _ in range(config.classifier_steps):
        loss, grads = bce_loss(params, x, labels)
        if loss_before is None:
            loss_before = loss
        tree, adam = adam_step(adam, params.to_tree("cls"), grads.to_tree("cls"))
        params = MlpParams.from_tree(tree, "cls", CLASSIFIER_ACTIVATIONS)
    loss_after, _ = bce_loss(params, x, labels)

    for o in observations:
        if o.label == 1:
            state.buffer.add(o.to_record())
    state.params = params
    state.adam = adam
    state.update_count += 1
    logger.info(
        "Classifier update #%d: %d conflicts, %d replayed, BCE %.4f -> %.4f",
        state.update_count, conflicts, len(replayed), loss_before, loss_after,
    )
    return UpdateOutcome(True, conflicts, len(replayed), float(loss_before), float(loss_after))


# ============================================================================
# Masks
# ============================================================================

def motion_mask(
    state: ClassifierState | None,
    observations: list[InstanceObservation],
    shape: tuple[int, int],
) -> MotionMask:
    """Static mask of one frame: pixels of instances classified dynamic are excluded."""
    mask = MotionMask.all_static(shape)
    if state is None:
        return mask
    flat = mask.static.reshape(-1)
    for obs in observations:
        prob = classify(state, obs.embedding, obs.center if state.position_mode else None)
        mask.probabilities[obs.instance_id] = prob
        if prob > 0.5:
            flat[obs.pixels] = False
    return mask


def recompute_keyframe_masks(keyframes: list[Keyframe], state: ClassifierState) -> int:
    """Re-run the classifier on every keyframe's stored observations.

    Returns:
        int: number of keyframes whose mask changed
    """
    changed = 0
    for kf in keyframes:
        new_mask = motion_mask(state, kf.frame.observations, kf.frame.shape)
        if not np.array_equal(new_mask.static, kf.mask.static):
            changed += 1
        kf.mask = new_mask
    logger.debug("Recomputed %d keyframe masks, %d changed", len(keyframes), changed)
    return changed


# ============================================================================
# Stationarity (position mode)
# ============================================================================

class RestTracker:
    """Counts consecutive frames each instance stays within ``radius`` of an anchor center."""

    def __init__(self, radius: float, frames: int):
        self.radius = radius
        self.frames = frames
        self._anchor: dict[int, np.ndarray] = {}
        self._count: dict[int, int] = {}

    def observe(self, observations: list[InstanceObservation]) -> set[int]:
        """Feed one frame; returns ids that have rested for at least ``frames`` frames."""
        resting = set()
        seen = set()
        for obs in observations:
            seen.add(obs.instance_id)
            anchor = self._anchor.get(obs.instance_id)
            if anchor is None or np.linalg.norm(obs.center - anchor) > self.radius:
                self._anchor[obs.instance_id] = obs.center.copy()
                self._count[obs.instance_id] = 1
            else:
                self._count[obs.instance_id] += 1
            if self._count[obs.instance_id] >= self.frames:
                resting.add(obs.instance_id)
        for gone in set(self._anchor) - seen:
            del self._anchor[gone]
            del self._count[gone]
        return resting


# ============================================================================
# Prior
# ============================================================================

def pretrain_prior(
    config: SlamConfig,
    movable: list[str],
    static: list[str],
    seed: int,
    n_per_category: int = 64,
    noise: float = 0.1,
    steps: int = 500,
    encoder_seed: int = 0,
) -> MlpParams:
    """Train a prior classifier offline on augmented category embeddings.

    Each sample mixes a category direction with a random instance direction the way the
    simulator builds embeddings; movable categories are labeled 1 and the others 0. Uses
    the same BCE and Adam routine as online updates.
    """
    rng = np.random.default_rng([seed, 0xB0A7])
    model = EmbeddingNoiseModel(seed=seed, dim=config.embedding_dim, encoder_seed=encoder_seed)
    xs, ys = [], []
    for label, categories in ((1, movable), (0, static)):
        for category in categories:
            c = model.category_vector(category)
            for _ in range(n_per_category):
                z = CATEGORY_WEIGHT * c + INSTANCE_WEIGHT * model.random_instance_direction(rng)
                z = z + noise * rng.normal(size=model.dim)
                xs.append(z / np.linalg.norm(z))
                ys.append(label)
    if not xs:
        raise ContractViolationError("prior pre-training needs at least one category")
    x = np.stack(xs)
    y = np.asarray(ys, dtype=np.float64)

    params = MlpParams.initialize([config.embedding_dim, config.classifier_hidden, 1], CLASSIFIER_ACTIVATIONS, rng)
    params.weights[-1] = np.zeros_like(params.weights[-1])
    adam = AdamState.for_params(
        params.to_tree("cls"), config.classifier_lr,
        beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps,
    )
    loss = float("nan")
    for _ in range(steps):
        loss, grads = bce_loss(params, x, y)
        tree, adam = adam_step(adam, params.to_tree("cls"), grads.to_tree("cls"))
        params = MlpParams.from_tree(tree, "cls", CLASSIFIER_ACTIVATIONS)
    logger.info("Pre-trained prior on %d samples (movable=%s), final BCE %.4f", y.size, movable, loss)
    return params
