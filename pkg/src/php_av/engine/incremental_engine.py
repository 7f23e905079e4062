"""
Sequential multi-task training under the PHP freezing policy

For each stage the new task is registered, then the shared adapter, the
new task's pool, prompts and heads, and the temperatures are trained; all
earlier tasks' components stay frozen. After every stage each seen task is
evaluated on its test split with its own components.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np
import torch
from torch.optim.lr_scheduler import LambdaLR

from ..errors import PHPError, ValidationError, NonFiniteLossError
from ..tasks.synthetic_av_tasks import make_task, clip_text_targets, class_text_embeddings
from ..utils import derive_seed
from .config import order_label, order_slug
from .model import PHPModel
from .checkpoints import capture_state, save_checkpoint

logger = logging.getLogger(__name__)


@dataclass
class SequenceResult:
    order: List[str]
    acc: List[List[float]] = field(default_factory=list)
    checkpoints: List[str] = field(default_factory=list)
    ledgers: List[List[str]] = field(default_factory=list)
    fingerprints: List[Dict[str, str]] = field(default_factory=list)
    lr_bounds: List[List[float]] = field(default_factory=list)
    backbone_fingerprint: str = ""

    @property
    def label(self):
        return order_label(self.order)

    @property
    def slug(self):
        return order_slug(self.order)

    @property
    def stages(self):
        return len(self.order)

    def task_accuracies(self, task_id):
        """Accuracy of `task_id` at every stage from the one that introduced it"""
        k = self.order.index(task_id)
        return [row[k] for row in self.acc[k:]]

    def validate(self):
        if len(self.acc) != len(self.order):
            raise ValidationError(f"{self.label}: {len(self.acc)} stage rows for {len(self.order)} tasks")
        for s, row in enumerate(self.acc):
            if len(row) != s + 1:
                raise ValidationError(f"{self.label}: stage {s + 1} has {len(row)} entries, expected {s + 1}")
            for value in row:
                if not 0.0 <= value <= 100.0:
                    raise ValidationError(f"{self.label}: accuracy {value} outside [0, 100]")
        return self

    def to_dict(self):
        return {
            "order": list(self.order), "acc": [list(r) for r in self.acc], "checkpoints": list(self.checkpoints),
            "ledgers": [list(l) for l in self.ledgers], "fingerprints": [dict(f) for f in self.fingerprints],
            "lr_bounds": [list(b) for b in self.lr_bounds], "backbone_fingerprint": self.backbone_fingerprint,
        }

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known}).validate()


def cosine_factor(step, total_steps):
    """Multiplier on the base lr: 1 at the first step, 0 at the last"""
    if total_steps <= 1:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps - 1) / (total_steps - 1)))


class IncrementalEngine:
    def __init__(self, config, datasets=None, checkpoint_dir=None):
        config.validate()
        self.config = config
        self.datasets = datasets if datasets is not None else {s.task_id: make_task(s) for s in config.tasks}
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self._tensor_cache = {}

    def build_model(self):
        return PHPModel(self.config)

    def split_tensors(self, task_id, split):
        key = (task_id, split)
        if key not in self._tensor_cache:
            if task_id not in self.datasets:
                raise ValidationError(f"No dataset for task '{task_id}'")
            spec = self.config.task(task_id)
            data = self.datasets[task_id].splits[split]
            text = clip_text_targets(spec, data.labels, class_text_embeddings(spec, self.config.encoder.model_dim))
            self._tensor_cache[key] = (
                torch.from_numpy(np.ascontiguousarray(data.video, dtype=np.float32)),
                torch.from_numpy(np.ascontiguousarray(data.audio, dtype=np.float32)),
                torch.from_numpy(np.asarray(data.labels)),
                torch.from_numpy(np.ascontiguousarray(text, dtype=np.float32)),
            )
        return self._tensor_cache[key]

    def train_stage(self, model, task_id, stage_index):
        """Train one task; returns (optimizer, ledger names, [first lr, last lr])"""
        train = self.config.train
        video, audio, _, text = self.split_tensors(task_id, "train")
        trainable = model.set_trainable(task_id)
        names = sorted(trainable)
        optimizer = torch.optim.Adam([trainable[n] for n in names], lr=train.lr, weight_decay=train.weight_decay)

        n = video.shape[0]
        steps_per_epoch = math.ceil(n / train.batch_size)
        total_steps = train.epochs_per_task * steps_per_epoch
        scheduler = LambdaLR(optimizer, lambda k: cosine_factor(k, total_steps))
        generator = torch.Generator().manual_seed(derive_seed(train.seed, "shuffle", stage_index, task_id))

        model.train()
        ledger, lrs, step = None, [], 0
        for epoch in range(train.epochs_per_task):
            perm = torch.randperm(n, generator=generator)
            epoch_loss = 0.0
            for start in range(0, n, train.batch_size):
                idx = perm[start:start + train.batch_size]
                loss = model.loss(task_id, video[idx], audio[idx], text[idx])
                if not torch.isfinite(loss):
                    raise NonFiniteLossError(f"Non-finite loss on task {task_id}, epoch {epoch + 1}, step {step}")
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                if ledger is None:
                    ledger = self._check_ledger(model, names, task_id)
                lrs.append(optimizer.param_groups[0]["lr"])
                optimizer.step()
                scheduler.step()
                epoch_loss += loss.item() * idx.numel()
                step += 1
                logger.debug(f"{task_id} step {step}/{total_steps} loss {loss.item():.4f}")
            logger.info(f"   epoch {epoch + 1}/{train.epochs_per_task} - {task_id} loss {epoch_loss / n:.4f}")
        optimizer.zero_grad(set_to_none=True)
        return optimizer, ledger, [lrs[0], lrs[-1]]

    @staticmethod
    def _check_ledger(model, expected, task_id):
        touched = sorted(name for name, p in model.named_parameters() if p.grad is not None)
        if touched != expected:
            extra = sorted(set(touched) - set(expected))
            missing = sorted(set(expected) - set(touched))
            raise PHPError(f"Trainable-parameter ledger mismatch on {task_id}: unexpected {extra}, untouched {missing}")
        return touched

    def evaluate(self, model, task_id, split="test"):
        """Accuracy in percent; subset accuracy for multi-label tasks"""
        spec = model.spec(task_id)
        video, audio, labels, _ = self.split_tensors(task_id, split)
        bs = self.config.train.eval_batch_size
        model.eval()
        correct = 0
        with torch.no_grad():
            for start in range(0, video.shape[0], bs):
                pred = model.predict(task_id, video[start:start + bs], audio[start:start + bs])
                target = labels[start:start + bs]
                if spec.is_multi_label:
                    correct += int((pred == target.bool()).all(dim=-1).sum())
                else:
                    correct += int((pred == target).sum())
        return 100.0 * correct / video.shape[0]

    def run_sequence(self, order):
        if len(set(order)) != len(order):
            raise ValidationError(f"Duplicate task in order {order_label(order)}")
        for task_id in order:
            self.config.task(task_id)

        label = order_label(order)
        logger.info(f"🚀 Order {label}")
        model = self.build_model()
        result = SequenceResult(order=list(order), backbone_fingerprint=model.encoders.fingerprint())

        for s, task_id in enumerate(order):
            logger.info(f"📊 Stage {s + 1}/{len(order)}: training {task_id}")
            model.register_task(self.config.task(task_id))
            optimizer, ledger, lr_bounds = self.train_stage(model, task_id, s)
            row = [self.evaluate(model, seen) for seen in order[:s + 1]]
            result.acc.append(row)
            result.ledgers.append(ledger)
            result.lr_bounds.append(lr_bounds)
            result.fingerprints.append(model.component_fingerprints())
            logger.info("   " + ", ".join(f"{t}={a:.2f}%" for t, a in zip(order, row)))

            if self.checkpoint_dir is not None:
                path = self.checkpoint_dir / f"stage{s + 1}_{task_id}"
                save_checkpoint(capture_state(model, optimizer, self.config, order, s + 1, result.acc), path)
                result.checkpoints.append(str(path))

        if model.encoders.fingerprint() != result.backbone_fingerprint:
            raise PHPError(f"Frozen encoder weights changed during {label}")
        logger.info(f"✅ Order {label} done")
        return result.validate()


def run_sequence(order, config, datasets=None, checkpoint_dir=None):
    return IncrementalEngine(config, datasets, checkpoint_dir).run_sequence(order)


def single_task_baseline(task_id, config, datasets=None):
    """Test accuracy when `task_id` is trained alone through the same pipeline"""
    result = IncrementalEngine(config, datasets).run_sequence([task_id])
    return result.acc[0][0]
