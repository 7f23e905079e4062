"""
Projection heads, symmetric contrastive objective and text-similarity prediction
"""

import logging
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ValidationError

logger = logging.getLogger(__name__)

NORM_EPS = 1e-8
INIT_TEMPERATURE = 0.07


def projection_mlp(in_dim, out_dim):
    return nn.Sequential(nn.Linear(in_dim, out_dim), nn.ReLU(), nn.Linear(out_dim, out_dim))


class ContrastiveHeads(nn.Module):
    """Per-task heads for video, audio and the two text targets"""

    def __init__(self, dim, proj_dim=None, text_dim=None):
        super().__init__()
        proj_dim = proj_dim or dim
        text_dim = text_dim or dim
        self.mlp_v = projection_mlp(dim, proj_dim)
        self.mlp_a = projection_mlp(dim, proj_dim)
        self.mlp_tv = projection_mlp(text_dim, proj_dim)
        self.mlp_ta = projection_mlp(text_dim, proj_dim)


class LogitScales(nn.Module):
    """Learnable temperatures stored as logit_scale = log(1 / tau)"""

    def __init__(self, temperature=INIT_TEMPERATURE):
        super().__init__()
        self.video = nn.Parameter(torch.tensor(math.log(1.0 / temperature)))
        self.audio = nn.Parameter(torch.tensor(math.log(1.0 / temperature)))

    @property
    def tau_v(self):
        return torch.exp(-self.video)

    @property
    def tau_a(self):
        return torch.exp(-self.audio)


def l2_normalize(x, eps=NORM_EPS):
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms < eps).any()):
        logger.warning(f"⚠️ Degenerate projection: norm below {eps}, clamping to the epsilon floor")
    return x / norms.clamp_min(eps)


def project(video_emb, audio_emb, text_emb, heads, audio_text_emb=None):
    """Returns L2-normalized (F_v, F_a, T_v, T_a)"""
    audio_text_emb = text_emb if audio_text_emb is None else audio_text_emb
    return (l2_normalize(heads.mlp_v(video_emb)),
            l2_normalize(heads.mlp_a(audio_emb)),
            l2_normalize(heads.mlp_tv(text_emb)),
            l2_normalize(heads.mlp_ta(audio_text_emb)))


def contrastive_loss(features, texts, tau):
    """Symmetric cross-entropy over in-batch pairs; similarities are divided by tau"""
    if features.shape[0] == 0:
        raise ValidationError("contrastive_loss needs at least one pair (N = 0)")
    if features.shape != texts.shape:
        raise ValidationError(f"feature/text shapes differ: {tuple(features.shape)} vs {tuple(texts.shape)}")
    logits = features @ texts.t() / tau
    targets = torch.arange(features.shape[0], device=features.device)
    return 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.t(), targets))


def fused_logits(F_v, F_a, class_T_v, class_T_a):
    return 0.5 * (F_v @ class_T_v.t() + F_a @ class_T_a.t())


def predict(F_v, F_a, class_T_v, class_T_a, multi_label=False, center=False):
    """
    Class ids [N] (argmax, lowest id wins ties) or a multi-hot bool mask [N, K]

    Multi-label prediction thresholds the fused logits at 0; with
    `center=True` each clip's logits are first shifted to zero mean.
    """
    if class_T_v.shape[0] < 2:
        raise ValidationError("prediction needs at least two classes")
    logits = fused_logits(F_v, F_a, class_T_v, class_T_a)
    if multi_label:
        if center:
            logits = logits - logits.mean(dim=-1, keepdim=True)
        return logits > 0
    return torch.argmax(logits, dim=-1)
