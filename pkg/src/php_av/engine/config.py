"""
Experiment configuration

Dataclasses for every configurable piece plus the loader that reads a
JSON/YAML file and applies PHP_ environment overrides.
"""

import copy
import itertools
import logging
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional

import yaml

from ..errors import ValidationError
from ..model.frozen_dual_encoder import EncoderConfig
from ..tasks.synthetic_av_tasks import TaskSpec
from ..utils import derive_seed

logger = logging.getLogger(__name__)

COMPONENTS = ("TMA", "TMDG", "TMI")
BAND_CODES = {"S": "shallow", "M": "middle", "D": "deep"}
ENV_PREFIX = "PHP_"
CONFIG_SECTIONS = ("tasks", "orders", "train", "placement", "encoder", "prompts", "output_dir", "seed")


@dataclass
class PromptConfig:
    pool_size: int = 10          # TMDG pool rows L
    generated_length: int = 4    # TMDG prompts n
    deep_length: int = 4         # TMI prompt length m
    tmi_depth: Optional[int] = None  # prompted layers counted from the top of TMI's band; None = whole band
    attention_heads: int = 1

    def validate(self):
        if self.pool_size < 1:
            raise ValidationError(f"pool_size must be >= 1, got {self.pool_size}")
        if self.generated_length < 1:
            raise ValidationError(f"generated_length must be >= 1, got {self.generated_length}")
        if self.deep_length < 0:
            raise ValidationError(f"deep_length must be >= 0, got {self.deep_length}")
        if self.tmi_depth is not None and self.tmi_depth < 0:
            raise ValidationError(f"tmi_depth must be >= 0, got {self.tmi_depth}")
        if self.attention_heads < 1:
            raise ValidationError("attention_heads must be >= 1")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TrainConfig:
    batch_size: int = 3
    epochs_per_task: int = 10
    lr: float = 3e-4
    weight_decay: float = 2e-4
    schedule: str = "cosine"
    seed: int = 0
    enabled_components: List[str] = field(default_factory=lambda: list(COMPONENTS))
    tma_residual: bool = False
    eval_batch_size: int = 64

    def validate(self):
        if self.batch_size < 1 or self.epochs_per_task < 1 or self.eval_batch_size < 1:
            raise ValidationError("batch_size, epochs_per_task and eval_batch_size must be positive")
        if not self.lr > 0 or self.weight_decay < 0:
            raise ValidationError(f"lr must be > 0 and weight_decay >= 0 (got {self.lr}, {self.weight_decay})")
        if self.schedule != "cosine":
            raise ValidationError(f"Unsupported schedule '{self.schedule}' (only 'cosine')")
        unknown = set(self.enabled_components) - set(COMPONENTS)
        if unknown:
            raise ValidationError(f"Unknown components {sorted(unknown)} (expected subset of {COMPONENTS})")
        if len(set(self.enabled_components)) != len(self.enabled_components):
            raise ValidationError(f"Duplicate components in {self.enabled_components}")
        return self

    def is_enabled(self, component):
        return component in self.enabled_components

    def to_dict(self):
        d = asdict(self)
        d["enabled_components"] = [c for c in COMPONENTS if c in self.enabled_components]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "enabled_components" in d:
            d["enabled_components"] = list(d["enabled_components"])
        return cls(**d)


@dataclass
class PlacementConfig:
    assignment: Dict[str, str] = field(default_factory=lambda: {"TMA": "S", "TMDG": "M", "TMI": "D"})

    def validate(self):
        if set(self.assignment) != set(COMPONENTS):
            raise ValidationError(f"Placement must assign exactly {COMPONENTS}, got {sorted(self.assignment)}")
        codes = [self.assignment[c] for c in COMPONENTS]
        if any(code not in BAND_CODES for code in codes):
            raise ValidationError(f"Placement bands must be S, M or D, got {codes}")
        if len(set(codes)) != len(codes):
            raise ValidationError(f"Placement is not bijective: {self.label}")
        return self

    def band(self, component):
        return BAND_CODES[self.assignment[component]]

    @property
    def label(self):
        return "-".join(self.assignment.get(c, "?") for c in COMPONENTS)

    @classmethod
    def from_label(cls, label):
        codes = [part.strip().upper() for part in label.replace(",", "-").split("-")]
        if len(codes) != len(COMPONENTS):
            raise ValidationError(f"Placement '{label}' must name one band per component, e.g. S-M-D")
        return cls(dict(zip(COMPONENTS, codes))).validate()

    def to_dict(self):
        return {"assignment": dict(self.assignment)}

    @classmethod
    def from_dict(cls, d):
        return cls(assignment=dict(d.get("assignment", d)))


def all_placements():
    """The six bijective placements in ablation row order"""
    labels = ["D-M-S", "M-D-S", "D-S-M", "M-S-D", "S-D-M", "S-M-D"]
    return [PlacementConfig.from_label(label) for label in labels]


def all_component_masks():
    """The eight component subsets in ablation row order"""
    masks = [()]
    masks += [(c,) for c in COMPONENTS]
    masks += [pair for pair in itertools.combinations(COMPONENTS, 2)]
    masks += [COMPONENTS]
    return [list(m) for m in masks]


def default_tasks(seed=0):
    return [
        TaskSpec("AVE", "single_label_temporal", num_classes=6, seed=derive_seed(seed, "AVE")),
        TaskSpec("AVVP", "multi_label", num_classes=5, max_active=2, seed=derive_seed(seed, "AVVP")),
        TaskSpec("AVQA", "qa_style", num_classes=6, num_questions=2, seed=derive_seed(seed, "AVQA")),
    ]


def all_orders(task_ids):
    return [list(p) for p in itertools.permutations(task_ids)]


def order_label(order):
    return "->".join(order)


def order_slug(order):
    """File and directory name for an order (AVE_AVVP_AVQA)"""
    return "_".join(order)


@dataclass
class ExperimentConfig:
    tasks: List[TaskSpec] = field(default_factory=default_tasks)
    orders: List[List[str]] = field(default_factory=list)
    train: TrainConfig = field(default_factory=TrainConfig)
    placement: PlacementConfig = field(default_factory=PlacementConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    output_dir: str = "php_output"
    seed: int = 0

    def __post_init__(self):
        if not self.orders:
            self.orders = all_orders([t.task_id for t in self.tasks])

    @property
    def task_ids(self):
        return [t.task_id for t in self.tasks]

    def task(self, task_id):
        for spec in self.tasks:
            if spec.task_id == task_id:
                return spec
        raise ValidationError(f"Unknown task '{task_id}'; declared: {self.task_ids}")

    def validate(self):
        if not self.tasks:
            raise ValidationError("At least one task must be declared")
        for spec in self.tasks:
            spec.validate()
            if spec.base_channels != self.tasks[0].base_channels:
                raise ValidationError("All tasks must share base_channels (one frozen token embedding)")
            if (spec.time_steps, spec.video_grid, spec.audio_grid) != \
                    (self.tasks[0].time_steps, self.tasks[0].video_grid, self.tasks[0].audio_grid):
                raise ValidationError("All tasks must share time_steps and grids (one shared TMA adapter)")
            if spec.num_classes > self.encoder.model_dim:
                raise ValidationError(
                    f"{spec.task_id}: {spec.num_classes} classes exceed text dim {self.encoder.model_dim}")
        if len(set(self.task_ids)) != len(self.task_ids):
            raise ValidationError(f"Duplicate task ids: {self.task_ids}")
        if not self.orders:
            raise ValidationError("At least one task order is required")
        lengths = {len(o) for o in self.orders}
        if len(lengths) != 1:
            raise ValidationError(f"All orders must have the same length, got {sorted(lengths)}")
        for order in self.orders:
            if len(set(order)) != len(order):
                raise ValidationError(f"Duplicate task in order {order_label(order)}")
            for task_id in order:
                if task_id not in self.task_ids:
                    raise ValidationError(f"Order {order_label(order)} names undeclared task '{task_id}'")
        self.train.validate()
        self.placement.validate()
        self.encoder.validate()
        self.prompts.validate()
        for component in COMPONENTS:
            if self.train.is_enabled(component) and not self.encoder.band_layers(self.placement.band(component)):
                raise ValidationError(f"{component} is enabled but band '{self.placement.band(component)}' is empty")
        return self

    def reseeded(self, seed):
        """Copy with every seed derived from one base seed"""
        cfg = copy.deepcopy(self)
        cfg.seed = int(seed)
        cfg.encoder.seed = derive_seed(seed, "encoder")
        cfg.train.seed = derive_seed(seed, "train")
        cfg.tasks = [TaskSpec.from_dict({**t.to_dict(), "seed": derive_seed(seed, t.task_id)}) for t in self.tasks]
        return cfg

    def to_dict(self):
        return {
            "tasks": [t.to_dict() for t in self.tasks],
            "orders": [list(o) for o in self.orders],
            "train": self.train.to_dict(),
            "placement": self.placement.to_dict(),
            "encoder": self.encoder.to_dict(),
            "prompts": self.prompts.to_dict(),
            "output_dir": str(self.output_dir),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(CONFIG_SECTIONS)
        if unknown:
            raise ValidationError(f"Unknown config sections: {sorted(unknown)}")
        try:
            kwargs = {}
            if "tasks" in d:
                kwargs["tasks"] = [TaskSpec.from_dict(t) for t in d["tasks"]]
            if "orders" in d:
                kwargs["orders"] = [list(o.split("->")) if isinstance(o, str) else list(o) for o in d["orders"]]
            if "train" in d:
                kwargs["train"] = TrainConfig.from_dict(d["train"])
            if "placement" in d:
                p = d["placement"]
                kwargs["placement"] = PlacementConfig.from_label(p) if isinstance(p, str) \
                    else PlacementConfig.from_dict(p)
            if "encoder" in d:
                kwargs["encoder"] = EncoderConfig.from_dict(d["encoder"])
            if "prompts" in d:
                kwargs["prompts"] = PromptConfig.from_dict(d["prompts"])
            for key in ("output_dir", "seed"):
                if key in d:
                    kwargs[key] = d[key]
        except TypeError as e:
            raise ValidationError(f"Malformed config: {e}")
        return cls(**kwargs)


def _apply_override(tree, path, value):
    node = tree
    for key in path[:-1]:
        if not isinstance(node.get(key, {}), dict):
            raise ValidationError(f"Environment override {ENV_PREFIX}{'__'.join(path).upper()} "
                                  f"targets a non-section '{key}'")
        node = node.setdefault(key, {})
    node[path[-1]] = value


def env_overrides(env):
    """
    PHP_SECTION__KEY=value pairs as (path, parsed value), sorted for stable application

    Variables whose first segment is not a config section (PHP_VERSION,
    PHP_INI_DIR, PHP_RUN_SLOW, ...) are skipped with a warning.
    """
    out = []
    for name in sorted(env):
        if not name.startswith(ENV_PREFIX):
            continue
        path = [part.lower() for part in name[len(ENV_PREFIX):].split("__") if part]
        if not path:
            continue
        if path[0] not in CONFIG_SECTIONS:
            logger.warning(f"⚠️ Ignoring {name}: '{path[0]}' is not a config section")
            continue
        try:
            value = yaml.safe_load(env[name])
        except yaml.YAMLError as e:
            raise ValidationError(f"Cannot parse {name}={env[name]!r}: {e}")
        out.append((path, value))
    return out


def load_experiment_config(path=None, env=None):
    """
    Read a JSON/YAML experiment file (or defaults) and apply PHP_ overrides

    PHP_TRAIN__EPOCHS_PER_TASK=2 sets train.epochs_per_task; PHP_SEED=3
    re-derives every seed from 3.
    """
    env = os.environ if env is None else env
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"Config file not found: {path}")
        try:
            with open(path, 'r') as f:
                raw = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ValidationError(f"Cannot parse config {path}: {e}")
        if not isinstance(raw, dict):
            raise ValidationError(f"Config {path} must contain a mapping at top level")

    overrides = env_overrides(env)
    seed_override = None
    base = ExperimentConfig.from_dict(raw).to_dict()
    for key_path, value in overrides:
        if key_path == ["seed"]:
            seed_override = value
            continue
        _apply_override(base, key_path, value)
        logger.debug(f"Config override {'.'.join(key_path)} = {value!r}")

    config = ExperimentConfig.from_dict(base)
    if seed_override is not None:
        config = config.reseeded(int(seed_override))
    return config.validate()
