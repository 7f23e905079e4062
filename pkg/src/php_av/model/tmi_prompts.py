"""
Task-specific modality-independent deep prompts

One prompt pair (video, audio) per task and per prompted deep layer.
"""

import logging

import torch
import torch.nn as nn

from ..errors import ValidationError, TaskLookupError

logger = logging.getLogger(__name__)


class TaskPrompts(nn.Module):
    def __init__(self, num_layers, length, dim, init_std=0.02):
        super().__init__()
        self.video = nn.ParameterList(
            nn.Parameter(torch.randn(length, dim) * init_std) for _ in range(num_layers))
        self.audio = nn.ParameterList(
            nn.Parameter(torch.randn(length, dim) * init_std) for _ in range(num_layers))


class TaskBank(nn.Module):
    def __init__(self, dim, length=4, num_layers=1):
        super().__init__()
        if length < 0 or num_layers < 0:
            raise ValidationError("deep prompt length and depth must be >= 0")
        self.dim = dim
        self.length = length
        self.num_layers = num_layers
        self.prompts = nn.ModuleDict()

    def register(self, task_id):
        if task_id in self.prompts:
            raise ValidationError(f"Task '{task_id}' is already registered in the prompt bank")
        self.prompts[task_id] = TaskPrompts(self.num_layers, self.length, self.dim)
        return self.prompts[task_id]

    def select(self, task_id):
        """Live (video, audio) prompt lists for a task, one entry per prompted layer"""
        if task_id not in self.prompts:
            raise TaskLookupError(f"Task '{task_id}' has no deep prompts; registered: {list(self.prompts)}")
        entry = self.prompts[task_id]
        return list(entry.video), list(entry.audio)

    def task_ids(self):
        return list(self.prompts)


def concat_prompts(P, tokens):
    """[P; tokens] along the token axis; P is [m, D], tokens [..., N, D]"""
    if P.shape[-1] != tokens.shape[-1]:
        raise ValidationError(f"prompt dim {P.shape[-1]} != token dim {tokens.shape[-1]}")
    P = P.expand(*tokens.shape[:-2], *P.shape)
    return torch.cat([P, tokens], dim=-2)
