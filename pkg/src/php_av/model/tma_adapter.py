"""
Task-shared modality aggregating adapter (shallow layers)

Each modality is gated by three maps computed from the *other* modality:
a channel map, a spatial map and a temporal map. The gate is a learnable
weighted sum of the three, broadcast over [T, S, C].
"""

import logging
from dataclasses import dataclass

import torch
import torch.nn as nn

from ..errors import ValidationError

logger = logging.getLogger(__name__)


@dataclass
class AttentionMaps:
    m_vc: torch.Tensor   # [B, C, 1]
    m_ac: torch.Tensor   # [B, C, 1]
    m_vs: torch.Tensor   # [B, 1, S_v]
    m_as: torch.Tensor   # [B, 1, S_a]
    m_vt: torch.Tensor   # [B, T, 1]
    m_at: torch.Tensor   # [B, T, 1]

    def all_maps(self):
        return {"m_vc": self.m_vc, "m_ac": self.m_ac, "m_vs": self.m_vs,
                "m_as": self.m_as, "m_vt": self.m_vt, "m_at": self.m_at}


class TMAAdapter(nn.Module):
    def __init__(self, channels, video_tokens, audio_tokens, rnn_hidden=None, residual=False):
        super().__init__()
        rnn_hidden = rnn_hidden or channels
        self.channels = channels
        self.video_tokens = video_tokens
        self.audio_tokens = audio_tokens
        self.residual = residual

        # channel maps: W(delta(global mean of the other modality))
        self.delta_v = nn.Linear(channels, channels, bias=False)
        self.w_v = nn.Linear(channels, channels, bias=False)
        self.delta_a = nn.Linear(channels, channels, bias=False)
        self.w_a = nn.Linear(channels, channels, bias=False)
        # spatial maps: positional logits for one modality from the other's mean vector
        self.psi_a = nn.Linear(channels, video_tokens, bias=False)
        self.psi_v = nn.Linear(channels, audio_tokens, bias=False)
        # temporal maps: recurrent summary of the other modality
        self.rnn_a = nn.GRU(channels, rnn_hidden, batch_first=True)
        self.rnn_v = nn.GRU(channels, rnn_hidden, batch_first=True)
        self.gamma_a = nn.Linear(rnn_hidden, 1, bias=False)
        self.gamma_v = nn.Linear(rnn_hidden, 1, bias=False)

        self.alpha = nn.Parameter(torch.tensor(1.0 / 3.0))
        self.beta = nn.Parameter(torch.tensor(1.0 / 3.0))
        self.gamma = nn.Parameter(torch.tensor(1.0 / 3.0))

    def check_block(self, video, audio):
        if video.dim() != 4 or audio.dim() != 4:
            raise ValidationError("TMA expects [B, T, S, C] video and audio tokens")
        if video.shape[-1] != self.channels or audio.shape[-1] != self.channels:
            raise ValidationError(
                f"TMA built for {self.channels} channels, got video {video.shape[-1]} / audio {audio.shape[-1]}")
        if video.shape[2] != self.video_tokens or audio.shape[2] != self.audio_tokens:
            raise ValidationError(
                f"TMA built for {self.video_tokens}/{self.audio_tokens} spatial tokens, "
                f"got {video.shape[2]}/{audio.shape[2]}")
        if video.shape[1] != audio.shape[1]:
            raise ValidationError("TMA expects video and audio to share the time axis")

    def forward(self, block):
        return fuse(block, compute_maps(block, self), self)


def channel_attention(block, params):
    params.check_block(block.video, block.audio)
    phi_a = block.audio.mean(dim=(1, 2))
    phi_v = block.video.mean(dim=(1, 2))
    m_vc = torch.sigmoid(params.w_v(params.delta_v(phi_a))).unsqueeze(-1)
    m_ac = torch.sigmoid(params.w_a(params.delta_a(phi_v))).unsqueeze(-1)
    return m_vc, m_ac


def spatial_attention(block, params):
    params.check_block(block.video, block.audio)
    m_vs = torch.sigmoid(params.psi_a(block.audio.mean(dim=(1, 2)))).unsqueeze(1)
    m_as = torch.sigmoid(params.psi_v(block.video.mean(dim=(1, 2)))).unsqueeze(1)
    return m_vs, m_as


def temporal_attention(block, params):
    params.check_block(block.video, block.audio)
    hidden_a, _ = params.rnn_a(block.audio.mean(dim=2))
    hidden_v, _ = params.rnn_v(block.video.mean(dim=2))
    m_vt = torch.sigmoid(params.gamma_a(hidden_a))
    m_at = torch.sigmoid(params.gamma_v(hidden_v))
    return m_vt, m_at


def compute_maps(block, params):
    m_vc, m_ac = channel_attention(block, params)
    m_vs, m_as = spatial_attention(block, params)
    m_vt, m_at = temporal_attention(block, params)
    return AttentionMaps(m_vc, m_ac, m_vs, m_as, m_vt, m_at)


def gate(m_c, m_s, m_t, params):
    """alpha*M_c + beta*M_s + gamma*M_t broadcast to [B, T, S, C]"""
    return (params.alpha * m_c.squeeze(-1)[:, None, None, :]
            + params.beta * m_s.squeeze(1)[:, None, :, None]
            + params.gamma * m_t.squeeze(-1)[:, :, None, None])


def fuse(block, maps, params):
    fused_v = gate(maps.m_vc, maps.m_vs, maps.m_vt, params) * block.video
    fused_a = gate(maps.m_ac, maps.m_as, maps.m_at, params) * block.audio
    if params.residual:
        fused_v, fused_a = fused_v + block.video, fused_a + block.audio
    return block.replace(video=fused_v, audio=fused_a)
