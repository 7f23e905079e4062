"""
Synthetic paired audio-visual classification tasks

Stand-ins for the event-localization, video-parsing and question-answering
datasets. Each class owns one fixed direction per modality; a clip is that
direction broadcast over the tokens of its active timesteps plus Gaussian
noise, so audio and video carry the same class evidence.
"""

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import linalg

from ..errors import ValidationError
from ..utils import dump_json, load_json, fingerprint_arrays, file_sha256

logger = logging.getLogger(__name__)

FLAVORS = ("single_label_temporal", "multi_label", "qa_style")
SPLITS = ("train", "val", "test")
DATASET_SCHEMA_VERSION = 1

# SeedSequence spawn-key namespaces
_KEY_DIRECTIONS = 0
_KEY_CLIPS = 1
_KEY_TEXT = 2


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    flavor: str = "single_label_temporal"
    num_classes: int = 6
    clips_train: int = 600
    clips_val: int = 100
    clips_test: int = 100
    time_steps: int = 5
    video_grid: Tuple[int, int] = (4, 4)
    audio_grid: Tuple[int, int] = (4, 4)
    base_channels: int = 8
    seed: int = 0
    noise_sigma: float = 1.5
    # qa_style: composite class id = question_id * num_answers + answer
    num_questions: int = 1
    # multi_label: each clip has between 1 and max_active active classes
    max_active: int = 2

    @property
    def video_tokens(self):
        return self.video_grid[0] * self.video_grid[1]

    @property
    def audio_tokens(self):
        return self.audio_grid[0] * self.audio_grid[1]

    @property
    def num_answers(self):
        return self.num_classes // self.num_questions

    @property
    def is_multi_label(self):
        return self.flavor == "multi_label"

    def split_sizes(self):
        return {"train": self.clips_train, "val": self.clips_val, "test": self.clips_test}

    def validate(self):
        if not self.task_id or not isinstance(self.task_id, str):
            raise ValidationError("task_id must be a non-empty string")
        if self.flavor not in FLAVORS:
            raise ValidationError(f"{self.task_id}: unknown flavor '{self.flavor}' (expected one of {FLAVORS})")
        if self.num_classes < 2:
            raise ValidationError(f"{self.task_id}: num_classes must be >= 2, got {self.num_classes}")
        for name, n in self.split_sizes().items():
            if n < 1:
                raise ValidationError(f"{self.task_id}: clips_{name} must be >= 1, got {n}")
        if self.time_steps < 1:
            raise ValidationError(f"{self.task_id}: time_steps must be >= 1, got {self.time_steps}")
        for grid_name, grid in (("video_grid", self.video_grid), ("audio_grid", self.audio_grid)):
            if len(grid) != 2 or min(grid) < 1:
                raise ValidationError(f"{self.task_id}: {grid_name} dims must be two positive ints, got {grid}")
        if self.base_channels < 1:
            raise ValidationError(f"{self.task_id}: base_channels must be >= 1")
        if not (0 <= int(self.seed) < 2 ** 64):
            raise ValidationError(f"{self.task_id}: seed must be a 64-bit unsigned int")
        if not np.isfinite(self.noise_sigma) or self.noise_sigma < 0:
            raise ValidationError(f"{self.task_id}: noise_sigma must be a finite value >= 0")
        if self.num_questions < 1 or self.num_classes % self.num_questions:
            raise ValidationError(
                f"{self.task_id}: num_classes ({self.num_classes}) must be a multiple of num_questions ({self.num_questions})")
        if self.flavor != "qa_style" and self.num_questions != 1:
            raise ValidationError(f"{self.task_id}: num_questions only applies to qa_style tasks")
        if self.is_multi_label and not (1 <= self.max_active < self.num_classes):
            raise ValidationError(f"{self.task_id}: max_active must be in [1, num_classes)")
        return self

    def to_dict(self):
        d = asdict(self)
        d["video_grid"] = list(self.video_grid)
        d["audio_grid"] = list(self.audio_grid)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("video_grid", "audio_grid"):
            if key in d:
                d[key] = tuple(int(v) for v in d[key])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"Unknown TaskSpec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AVClip:
    video_raw: np.ndarray
    audio_raw: np.ndarray
    label: object
    question_id: Optional[int] = None


@dataclass
class TaskSplit:
    """All clips of one split, stacked along the first axis"""
    video: np.ndarray          # [N, T, H*W, C] float32
    audio: np.ndarray          # [N, T, L*F, C] float32
    labels: np.ndarray         # [N] int64, or [N, K] uint8 multi-hot
    clip_index: np.ndarray     # [N] int64, global clip index
    question_ids: Optional[np.ndarray] = None

    def __len__(self):
        return int(self.video.shape[0])

    def clip(self, i):
        label = self.labels[i]
        label = label.copy() if label.ndim else int(label)
        qid = None if self.question_ids is None else int(self.question_ids[i])
        return AVClip(self.video[i], self.audio[i], label, qid)

    def arrays(self):
        out = {"video": self.video, "audio": self.audio, "labels": self.labels, "clip_index": self.clip_index}
        if self.question_ids is not None:
            out["question_ids"] = self.question_ids
        return out


@dataclass
class TaskDataset:
    spec: TaskSpec
    splits: Dict[str, TaskSplit] = field(default_factory=dict)

    def fingerprint(self):
        named = {}
        for split_name, split in self.splits.items():
            for arr_name, arr in split.arrays().items():
                named[f"{split_name}/{arr_name}"] = arr
        named["spec"] = np.frombuffer(json.dumps(self.spec.to_dict(), sort_keys=True).encode(), dtype=np.uint8)
        return fingerprint_arrays(named)


def _rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(key)))


def _orthonormal_rows(rng, rows, dim):
    """`rows` mutually orthonormal vectors in R^dim (rows <= dim)"""
    q, _ = linalg.qr(rng.standard_normal((dim, rows)), mode='economic')
    return q.T


def class_directions(spec, modality):
    """Fixed unit direction per class for one modality: [K, C]"""
    modality_key = {"video": 0, "audio": 1}[modality]
    rng = _rng(spec.seed, _KEY_DIRECTIONS, modality_key)
    K, C = spec.num_classes, spec.base_channels
    if K <= C:
        return _orthonormal_rows(rng, K, C)
    # more classes than channels: unit-norm random directions
    d = rng.standard_normal((K, C))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _generate_clip(spec, index, dir_v, dir_a):
    rng = _rng(spec.seed, _KEY_CLIPS, index)
    K, T = spec.num_classes, spec.time_steps

    if spec.is_multi_label:
        k = int(rng.integers(1, spec.max_active + 1))
        active = np.sort(rng.choice(K, size=k, replace=False))
        label = np.zeros(K, dtype=np.uint8)
        label[active] = 1
        weights = label.astype(np.float64) / np.sqrt(k)
    else:
        label = int(rng.integers(K))
        weights = np.zeros(K)
        weights[label] = 1.0

    # event window covering at least half of the clip
    length = int(rng.integers(-(-T // 2), T + 1))
    onset = int(rng.integers(0, T - length + 1))
    envelope = np.zeros(T)
    envelope[onset:onset + length] = 1.0

    signal_v = weights @ dir_v
    signal_a = weights @ dir_a
    video = envelope[:, None, None] * signal_v[None, None, :] \
        + spec.noise_sigma * rng.standard_normal((T, spec.video_tokens, spec.base_channels))
    audio = envelope[:, None, None] * signal_a[None, None, :] \
        + spec.noise_sigma * rng.standard_normal((T, spec.audio_tokens, spec.base_channels))

    question_id = label // spec.num_answers if spec.flavor == "qa_style" else None
    return video.astype(np.float32), audio.astype(np.float32), label, question_id


def make_task(spec):
    """Generate train/val/test splits; a pure function of `spec`"""
    spec.validate()
    dir_v = class_directions(spec, "video")
    dir_a = class_directions(spec, "audio")

    dataset = TaskDataset(spec=spec)
    start = 0
    for split_name, n in spec.split_sizes().items():
        clips = [_generate_clip(spec, start + i, dir_v, dir_a) for i in range(n)]
        labels = np.stack([c[2] for c in clips]).astype(np.uint8 if spec.is_multi_label else np.int64)
        qids = np.array([c[3] for c in clips], dtype=np.int64) if spec.flavor == "qa_style" else None
        dataset.splits[split_name] = TaskSplit(
            video=np.stack([c[0] for c in clips]),
            audio=np.stack([c[1] for c in clips]),
            labels=labels,
            clip_index=np.arange(start, start + n, dtype=np.int64),
            question_ids=qids,
        )
        start += n

    logger.debug(f"Generated task {spec.task_id}: " + ", ".join(f"{k}={v}" for k, v in spec.split_sizes().items()))
    return dataset


def class_text_embeddings(spec, dim):
    """Seed-derived, mutually orthonormal class embeddings: [num_classes, dim] float32"""
    if dim < spec.num_classes:
        raise ValidationError(
            f"{spec.task_id}: text dim {dim} < num_classes {spec.num_classes}; orthonormal embeddings impossible")
    rng = _rng(spec.seed, _KEY_TEXT)
    return _orthonormal_rows(rng, spec.num_classes, dim).astype(np.float32)


def clip_text_targets(spec, labels, embeddings):
    """Per-clip text target: class row, or normalized sum of active rows for multi-hot labels"""
    embeddings = np.asarray(embeddings, dtype=np.float32)
    labels = np.asarray(labels)
    if spec.is_multi_label:
        mixed = labels.astype(np.float32) @ embeddings
        return mixed / np.linalg.norm(mixed, axis=1, keepdims=True)
    return embeddings[labels]


# ---------------------------------------------------------------------------
# persistence: manifest.json + one .npy (little-endian, shape header) per array

def save_task_dataset(dataset, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema_version": DATASET_SCHEMA_VERSION,
        "task_spec": dataset.spec.to_dict(),
        "fingerprint": dataset.fingerprint(),
        "splits": {},
    }
    for split_name, split in dataset.splits.items():
        entries = {}
        for arr_name, arr in split.arrays().items():
            arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder('<'))
            filename = f"{split_name}.{arr_name}.npy"
            np.save(directory / filename, arr, allow_pickle=False)
            entries[arr_name] = {
                "file": filename,
                "shape": list(arr.shape),
                "dtype": arr.dtype.str,
                "sha256": file_sha256(directory / filename),
            }
        manifest["splits"][split_name] = entries
    dump_json(manifest, directory / "manifest.json")
    return directory / "manifest.json"


def read_dataset_manifest(directory):
    path = Path(directory) / "manifest.json"
    if not path.exists():
        return None
    try:
        return load_json(path)
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"Corrupt dataset manifest {path}: {e}")


def load_task_dataset(directory):
    directory = Path(directory)
    manifest = read_dataset_manifest(directory)
    if manifest is None:
        raise ValidationError(f"No dataset manifest in {directory}; run 'generate' first")
    spec = TaskSpec.from_dict(manifest["task_spec"]).validate()
    dataset = TaskDataset(spec=spec)
    for split_name, entries in manifest["splits"].items():
        arrays = {}
        for arr_name, entry in entries.items():
            path = directory / entry["file"]
            try:
                arr = np.load(path, allow_pickle=False)
            except (OSError, ValueError) as e:
                raise ValidationError(f"Cannot read dataset array {split_name}/{arr_name} ({path}): {e}")
            if list(arr.shape) != entry["shape"] or arr.dtype.str != entry["dtype"]:
                raise ValidationError(
                    f"Dataset array {split_name}/{arr_name} has shape {arr.shape} {arr.dtype.str}, "
                    f"manifest says {entry['shape']} {entry['dtype']}")
            arrays[arr_name] = arr
        dataset.splits[split_name] = TaskSplit(
            video=arrays["video"], audio=arrays["audio"], labels=arrays["labels"],
            clip_index=arrays["clip_index"], question_ids=arrays.get("question_ids"))
    if dataset.fingerprint() != manifest["fingerprint"]:
        raise ValidationError(f"Dataset in {directory} does not match its manifest fingerprint")
    return dataset
