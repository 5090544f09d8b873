"""Checkpoints of the map and the motion classifier.

Every checkpoint is a binary blob plus a JSON sidecar sharing its stem:

    <name>.bin   8-byte magic, little-endian uint32 version, header count and header
                 values (grid resolutions for maps), then every parameter array as
                 little-endian float64 in the key order recorded in the sidecar
    <name>.json  keys and shapes plus everything that is not a parameter array
                 (bounding box and architecture for maps; activations, update count and
                 the replay buffer for classifiers)
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ValidationError

from logic.classifier import CLASSIFIER_ACTIVATIONS, ClassifierState, ReplayBuffer
from logic.diff_core import AdamState, MlpParams, ParamTree
from logic.neural_map import NeuralMapParams
from models.config import SlamConfig
from models.exceptions import DatasetError

logger = logging.getLogger(__name__)

MAP_MAGIC = b"NDYNMAP1"
CLASSIFIER_MAGIC = b"NDYNCLS1"
FORMAT_VERSION = 1
_F64 = np.dtype("<f8")
_U32 = np.dtype("<u4")


class ArrayLayout(BaseModel):
    version: int = FORMAT_VERSION
    keys: list[str]
    shapes: list[list[int]]


class MapMeta(ArrayLayout):
    box_min: list[float]
    box_max: list[float]
    resolutions: list[int]
    n_features: int
    blob_bins: int
    geo_feature_dim: int
    geo_activations: list[str]
    color_activations: list[str]


class ClassifierMeta(ArrayLayout):
    activations: list[str]
    has_online: bool
    has_prior: bool
    position_mode: bool = False
    room_min: list[float] | None = None
    room_max: list[float] | None = None
    update_count: int = 0
    buffer_capacity: int = 512
    buffer: list[dict] = []


def _paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    return path.with_suffix(".bin"), path.with_suffix(".json")


def _write_blob(path: Path, magic: bytes, tree: ParamTree, header: list[int]) -> tuple[list[str], list[list[int]]]:
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = sorted(tree)
    with path.open("wb") as f:
        f.write(magic)
        f.write(np.array([FORMAT_VERSION, len(header), *header], dtype=_U32).tobytes())
        for k in keys:
            f.write(np.ascontiguousarray(tree[k], dtype=_F64).tobytes())
    return keys, [list(tree[k].shape) for k in keys]


def _read_blob(path: Path, magic: bytes, layout: ArrayLayout) -> tuple[list[int], ParamTree]:
    """Parse a blob against the layout recorded in its sidecar.

    Raises:
        DatasetError: missing file, wrong magic or version, or a size mismatch
    """
    try:
        blob = path.read_bytes()
    except FileNotFoundError as e:
        raise DatasetError(path, "missing checkpoint blob") from e
    if not blob.startswith(magic):
        raise DatasetError(path, f"not a {magic[:-1].decode()} checkpoint")
    offset = len(magic)
    if len(blob) < offset + 2 * _U32.itemsize:
        raise DatasetError(path, "truncated header")
    version, n_header = (int(v) for v in np.frombuffer(blob, dtype=_U32, count=2, offset=offset))
    if version != FORMAT_VERSION or layout.version != FORMAT_VERSION:
        raise DatasetError(path, f"unsupported checkpoint version {version}")
    offset += 2 * _U32.itemsize
    header = np.frombuffer(blob, dtype=_U32, count=n_header, offset=offset).tolist()
    offset += n_header * _U32.itemsize

    expected = offset + sum(int(np.prod(s)) for s in layout.shapes) * _F64.itemsize
    if len(blob) != expected:
        raise DatasetError(path, f"expected {expected} bytes, found {len(blob)}")
    tree: ParamTree = {}
    for key, shape in zip(layout.keys, layout.shapes):
        n = int(np.prod(shape))
        tree[key] = np.frombuffer(blob, dtype=_F64, count=n, offset=offset).reshape(shape).copy()
        offset += n * _F64.itemsize
    return header, tree


def _read_meta(path: Path, model: type[ArrayLayout]) -> ArrayLayout:
    try:
        return model.model_validate_json(path.read_text())
    except FileNotFoundError as e:
        raise DatasetError(path, "missing checkpoint metadata") from e
    except ValidationError as e:
        raise DatasetError(path, f"invalid checkpoint metadata ({e.error_count()} errors)") from e


# ============================================================================
# Map
# ============================================================================

def save_map(params: NeuralMapParams, path: str | Path) -> Path:
    """Write ``<path>.bin`` and ``<path>.json``; returns the blob path."""
    blob_path, meta_path = _paths(path)
    keys, shapes = _write_blob(blob_path, MAP_MAGIC, params.tree, list(params.resolutions))
    meta = MapMeta(
        keys=keys,
        shapes=shapes,
        box_min=params.box_min.tolist(),
        box_max=params.box_max.tolist(),
        resolutions=list(params.resolutions),
        n_features=params.n_features,
        blob_bins=params.blob_bins,
        geo_feature_dim=params.geo_feature_dim,
        geo_activations=list(params.geo_activations),
        color_activations=list(params.color_activations),
    )
    meta_path.write_text(meta.model_dump_json(indent=2))
    logger.debug("Saved map checkpoint %s (%d parameters)", blob_path, params.n_params())
    return blob_path


def load_map(path: str | Path) -> NeuralMapParams:
    """Read a map checkpoint written by ``save_map``.

    Raises:
        DatasetError: missing or corrupt blob or sidecar
    """
    blob_path, meta_path = _paths(path)
    meta = _read_meta(meta_path, MapMeta)
    resolutions, tree = _read_blob(blob_path, MAP_MAGIC, meta)
    if resolutions != meta.resolutions:
        raise DatasetError(blob_path, f"grid resolutions {resolutions} disagree with {meta_path.name}")
    return NeuralMapParams(
        tree=tree,
        box_min=np.asarray(meta.box_min),
        box_max=np.asarray(meta.box_max),
        resolutions=meta.resolutions,
        n_features=meta.n_features,
        blob_bins=meta.blob_bins,
        geo_feature_dim=meta.geo_feature_dim,
        geo_activations=meta.geo_activations,
        color_activations=meta.color_activations,
    )


# ============================================================================
# Classifier
# ============================================================================

def _save_classifier_arrays(path: str | Path, online: MlpParams | None, prior: MlpParams | None, **meta) -> Path:
    blob_path, meta_path = _paths(path)
    tree: ParamTree = {}
    if online is not None:
        tree.update(online.to_tree("cls"))
    if prior is not None:
        tree.update(prior.to_tree("prior"))
    keys, shapes = _write_blob(blob_path, CLASSIFIER_MAGIC, tree, [])
    record = ClassifierMeta(
        keys=keys,
        shapes=shapes,
        activations=list(CLASSIFIER_ACTIVATIONS),
        has_online=online is not None,
        has_prior=prior is not None,
        **meta,
    )
    meta_path.write_text(record.model_dump_json())
    return blob_path


def _load_classifier_arrays(path: str | Path) -> tuple[ClassifierMeta, MlpParams | None, MlpParams | None]:
    blob_path, meta_path = _paths(path)
    meta = _read_meta(meta_path, ClassifierMeta)
    _, tree = _read_blob(blob_path, CLASSIFIER_MAGIC, meta)
    try:
        online = MlpParams.from_tree(tree, "cls", meta.activations) if meta.has_online else None
        prior = MlpParams.from_tree(tree, "prior", meta.activations) if meta.has_prior else None
    except KeyError as e:
        raise DatasetError(blob_path, f"missing parameter array {e}") from e
    return meta, online, prior


def save_classifier(state: ClassifierState, path: str | Path) -> Path:
    """Write the online classifier, its prior and its replay buffer."""
    return _save_classifier_arrays(
        path,
        state.params,
        state.prior,
        position_mode=state.position_mode,
        room_min=state.room_min.tolist(),
        room_max=state.room_max.tolist(),
        update_count=state.update_count,
        buffer_capacity=state.buffer.capacity,
        buffer=state.buffer.to_list(),
    )


def load_classifier(path: str | Path, config: SlamConfig) -> ClassifierState:
    """Restore an online classifier; the optimizer state starts fresh.

    Raises:
        DatasetError: missing or corrupt files, or a checkpoint without online weights
    """
    meta, online, prior = _load_classifier_arrays(path)
    if online is None or meta.room_min is None or meta.room_max is None:
        raise DatasetError(Path(path), "checkpoint holds no online classifier")
    return ClassifierState(
        params=online,
        adam=AdamState.for_params(
            online.to_tree("cls"), config.classifier_lr,
            beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps,
        ),
        buffer=ReplayBuffer.from_list(meta.buffer, meta.buffer_capacity),
        room_min=np.asarray(meta.room_min),
        room_max=np.asarray(meta.room_max),
        position_mode=meta.position_mode,
        prior=prior,
        update_count=meta.update_count,
        rng=np.random.default_rng([config.seed, 31]),
    )


def save_prior(params: MlpParams, path: str | Path) -> Path:
    blob_path = _save_classifier_arrays(path, None, params)
    logger.info("Saved prior classifier to %s", blob_path)
    return blob_path


def load_prior(path: str | Path, embedding_dim: int | None = None) -> MlpParams:
    """Load prior weights from a prior or full classifier checkpoint.

    Raises:
        DatasetError: no prior weights, or an input width other than ``embedding_dim``
    """
    _, _, prior = _load_classifier_arrays(path)
    if prior is None:
        raise DatasetError(Path(path), "checkpoint holds no prior classifier")
    if embedding_dim is not None and prior.in_width != embedding_dim:
        raise DatasetError(Path(path), f"prior expects {prior.in_width}-d embeddings, run uses {embedding_dim}")
    return prior
