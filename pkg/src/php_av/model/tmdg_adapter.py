"""
Task-specific modality-shared dynamic prompt generation (middle layers)

Every task owns a prompt pool P [L, d] and a selection head delta_s. A
summary of the current clip, taken by one shared self-attention block over
[tokens; P], picks n softmax mixtures of the pool rows. The same pool and
head serve both modalities.
"""

import logging
import math

import torch
import torch.nn as nn

from ..errors import ValidationError, TaskLookupError

logger = logging.getLogger(__name__)


class SharedSelfAttention(nn.Module):
    """Multi-head self-attention with a residual connection: x + O(attn(x))"""

    def __init__(self, dim, heads=1):
        super().__init__()
        if dim % heads:
            raise ValidationError(f"attention dim {dim} is not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def attention(self, x):
        """Per-head scaled dot-product attention before the output projection"""
        B, N, D = x.shape
        hd = D // self.heads
        q = self.q(x).view(B, N, self.heads, hd).transpose(1, 2)
        k = self.k(x).view(B, N, self.heads, hd).transpose(1, 2)
        v = self.v(x).view(B, N, self.heads, hd).transpose(1, 2)
        weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
        return (weights @ v).transpose(1, 2).reshape(B, N, D)

    def forward(self, x):
        return x + self.o(self.attention(x))


class PromptPool(nn.Module):
    def __init__(self, task_id, size, dim, init_std=0.02):
        super().__init__()
        self.task_id = task_id
        self.P = nn.Parameter(torch.randn(size, dim) * init_std)

    @property
    def size(self):
        return self.P.shape[0]


class TaskPromptGenerator(nn.Module):
    """Pool plus selection head for one task"""

    def __init__(self, task_id, pool_size, dim, length):
        super().__init__()
        self.task_id = task_id
        self.length = length
        self.pool = PromptPool(task_id, pool_size, dim)
        self.delta_s = nn.Linear(dim, length * pool_size, bias=False)


def summarize(tokens, pool, attn):
    """S = mean over rows of SelfAttn([tokens; P]); tokens [B, T', d] -> [B, d]"""
    if tokens.shape[-1] != pool.P.shape[-1]:
        raise ValidationError(f"token dim {tokens.shape[-1]} != prompt dim {pool.P.shape[-1]}")
    P = pool.P.unsqueeze(0).expand(tokens.shape[0], -1, -1)
    return attn(torch.cat([tokens, P], dim=1)).mean(dim=1)


def mixture_weights(S, generator):
    """Row-softmax selection weights [B, n, L]"""
    logits = generator.delta_s(S).view(S.shape[0], generator.length, generator.pool.size)
    return torch.softmax(logits, dim=-1)


def generate(S, generator):
    """G = softmax(delta_s(S) as [n, L]) @ P -> [B, n, d]"""
    return mixture_weights(S, generator) @ generator.pool.P


def inject(G, tokens):
    """Prepend generated prompts along the token axis"""
    return torch.cat([G, tokens], dim=-2)


class TMDGAdapter(nn.Module):
    def __init__(self, dim, pool_size=10, length=4, heads=1):
        super().__init__()
        if length < 1:
            raise ValidationError(f"generated prompt length must be >= 1, got {length}")
        if pool_size < length:
            logger.warning(f"⚠️ TMDG pool size {pool_size} is smaller than generated length {length}")
        self.dim = dim
        self.pool_size = pool_size
        self.length = length
        self.self_attn = SharedSelfAttention(dim, heads)
        self.generators = nn.ModuleDict()

    def register(self, task_id):
        if task_id in self.generators:
            raise ValidationError(f"Task '{task_id}' is already registered with the TMDG adapter")
        self.generators[task_id] = TaskPromptGenerator(task_id, self.pool_size, self.dim, self.length)
        return self.generators[task_id]

    def generator(self, task_id):
        if task_id not in self.generators:
            raise TaskLookupError(f"Task '{task_id}' has no TMDG prompt pool")
        return self.generators[task_id]

    def forward(self, video, audio, task_id):
        """
        Generate prompts for both streams from [B, T, S, d] bodies

        Each stream is reduced to one token per timestep (spatial mean)
        before summarization. Returns (G_v, G_a), each [B, n, d].
        """
        gen = self.generator(task_id)
        s_v = summarize(video.mean(dim=2), gen.pool, self.self_attn)
        s_a = summarize(audio.mean(dim=2), gen.pool, self.self_attn)
        return generate(s_v, gen), generate(s_a, gen)
