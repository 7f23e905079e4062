"""
Frozen toy transformer encoders for the video and audio streams

Seeded random weights stand in for pretrained backbones. Both towers run
layer by layer in lock-step so that cross-modal hooks see the two streams
at the same depth.
"""

import logging
from dataclasses import dataclass, field, asdict
from typing import Callable, Dict, List, Optional

import torch
import torch.nn as nn

from ..errors import ValidationError, HookShapeError
from ..utils import derive_seed, fingerprint_arrays

logger = logging.getLogger(__name__)

BANDS = ("shallow", "middle", "deep")


def _default_band_map():
    return {"shallow": [0, 1], "middle": [2, 3], "deep": [4, 5]}


@dataclass
class EncoderConfig:
    num_layers: int = 6
    model_dim: int = 32
    heads: int = 2
    mlp_ratio: int = 2
    band_map: Dict[str, List[int]] = field(default_factory=_default_band_map)
    seed: int = 0

    def band_layers(self, band):
        if band not in BANDS:
            raise ValidationError(f"Unknown band '{band}' (expected one of {BANDS})")
        return sorted(int(i) for i in self.band_map.get(band, []))

    def validate(self):
        if self.num_layers < 1 or self.model_dim < 1 or self.heads < 1 or self.mlp_ratio < 1:
            raise ValidationError("num_layers, model_dim, heads and mlp_ratio must be positive")
        if self.model_dim % self.heads:
            raise ValidationError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        unknown = set(self.band_map) - set(BANDS)
        if unknown:
            raise ValidationError(f"Unknown bands in band_map: {sorted(unknown)}")

        seen = {}
        for band in BANDS:
            for layer in self.band_layers(band):
                if not 0 <= layer < self.num_layers:
                    raise ValidationError(f"Band '{band}' layer {layer} outside [0, {self.num_layers})")
                if layer in seen:
                    raise ValidationError(f"Layer {layer} is in both '{seen[layer]}' and '{band}' bands")
                seen[layer] = band

        populated = [self.band_layers(b) for b in BANDS if self.band_layers(b)]
        for lower, upper in zip(populated, populated[1:]):
            if max(lower) >= min(upper):
                raise ValidationError(f"Bands must be ordered shallow < middle < deep, got {self.band_map}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["band_map"] = {k: sorted(int(i) for i in v) for k, v in self.band_map.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "band_map" in d:
            d["band_map"] = {k: [int(i) for i in v] for k, v in d["band_map"].items()}
        return cls(**d)


@dataclass
class ActivationBlock:
    """
    Token streams entering one layer

    `video` / `audio` hold the structured body tokens [B, T, S, D];
    `video_prompts` / `audio_prompts` hold the prompt prefix [B, P, D].
    """
    video: torch.Tensor
    audio: torch.Tensor
    layer_index: int = 0
    video_prompts: Optional[torch.Tensor] = None
    audio_prompts: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.video_prompts is None:
            self.video_prompts = self.video.new_zeros(self.video.shape[0], 0, self.video.shape[-1])
        if self.audio_prompts is None:
            self.audio_prompts = self.audio.new_zeros(self.audio.shape[0], 0, self.audio.shape[-1])

    def token_count(self, modality):
        body = self.video if modality == "video" else self.audio
        prefix = self.video_prompts if modality == "video" else self.audio_prompts
        return prefix.shape[1] + body.shape[1] * body.shape[2]

    def replace(self, **changes):
        fields = dict(video=self.video, audio=self.audio, layer_index=self.layer_index,
                      video_prompts=self.video_prompts, audio_prompts=self.audio_prompts)
        fields.update(changes)
        return ActivationBlock(**fields)

    def detached(self):
        return self.replace(video=self.video.detach(), audio=self.audio.detach(),
                            video_prompts=self.video_prompts.detach(),
                            audio_prompts=self.audio_prompts.detach())


Hook = Callable[[ActivationBlock], ActivationBlock]


class HookSet:
    """Ordered hooks per layer; each hook maps an ActivationBlock to a new one"""

    def __init__(self):
        self._hooks: Dict[int, List[Hook]] = {}

    def register(self, layer_index, hook):
        self._hooks.setdefault(int(layer_index), []).append(hook)
        return self

    def layers(self):
        return sorted(self._hooks)

    def at(self, layer_index):
        return self._hooks.get(layer_index, [])

    def __len__(self):
        return sum(len(v) for v in self._hooks.values())


class EncoderBlock(nn.Module):
    """Pre-norm transformer block"""

    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class EncoderTower(nn.Module):
    def __init__(self, in_channels, config):
        super().__init__()
        self.embed = nn.Linear(in_channels, config.model_dim, bias=False)
        self.blocks = nn.ModuleList(
            EncoderBlock(config.model_dim, config.heads, config.mlp_ratio) for _ in range(config.num_layers))
        self.final_norm = nn.LayerNorm(config.model_dim)

    def run_block(self, index, prompts, body):
        B, T, S, D = body.shape
        tokens = torch.cat([prompts, body.reshape(B, T * S, D)], dim=1)
        out = self.blocks[index](tokens)
        P = prompts.shape[1]
        return out[:, :P], out[:, P:].reshape(B, T, S, D)

    def pool(self, body):
        return self.final_norm(body).mean(dim=(1, 2))


class FrozenEncoders(nn.Module):
    def __init__(self, config, in_channels):
        super().__init__()
        self.config = config
        self.in_channels = in_channels
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(config.seed, "video-tower"))
            self.video = EncoderTower(in_channels, config)
            torch.manual_seed(derive_seed(config.seed, "audio-tower"))
            self.audio = EncoderTower(in_channels, config)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.initial_fingerprint = self.fingerprint()
        logger.debug(f"Frozen encoders ready, fingerprint {self.initial_fingerprint[:12]}")

    def train(self, mode=True):
        # frozen towers stay in eval mode
        return super().train(False)

    def fingerprint(self):
        return fingerprint_arrays({k: v.detach().cpu().numpy() for k, v in self.state_dict().items()})

    def _check_hook_output(self, layer_index, before, after):
        if not isinstance(after, ActivationBlock):
            raise HookShapeError(f"Hook at layer {layer_index} returned {type(after).__name__}, not ActivationBlock")
        for name in ("video", "audio"):
            if getattr(after, name).shape != getattr(before, name).shape:
                raise HookShapeError(
                    f"Hook at layer {layer_index} changed {name} token layout "
                    f"{tuple(getattr(before, name).shape)} -> {tuple(getattr(after, name).shape)}")
            prompts = getattr(after, f"{name}_prompts")
            expected = (before.video.shape[0], before.video.shape[-1])
            if prompts.dim() != 3 or (prompts.shape[0], prompts.shape[2]) != expected:
                raise HookShapeError(
                    f"Hook at layer {layer_index} produced {name} prompts of shape {tuple(prompts.shape)}, "
                    f"expected [B={expected[0]}, P, D={expected[1]}]")

    def forward(self, video_raw, audio_raw, hooks=None, keep_trace=False):
        """
        Run both towers; returns (video_embedding [B, D], audio_embedding [B, D], trace)

        Inputs are [B, T, S, C] (or a single clip [T, S, C]). Hooks registered
        at layer l transform the streams before that layer's block.
        """
        single = video_raw.dim() == 3
        if single:
            video_raw, audio_raw = video_raw.unsqueeze(0), audio_raw.unsqueeze(0)
        if video_raw.shape[-1] != self.in_channels or audio_raw.shape[-1] != self.in_channels:
            raise ValidationError(
                f"Clip channels {video_raw.shape[-1]}/{audio_raw.shape[-1]} != encoder input channels {self.in_channels}")
        if video_raw.shape[1] != audio_raw.shape[1]:
            raise ValidationError("video and audio clips must share the time axis")
        hooks = hooks or HookSet()
        for layer in hooks.layers():
            if not 0 <= layer < self.config.num_layers:
                raise ValidationError(f"Hook registered at layer {layer}, encoder has {self.config.num_layers}")

        block = ActivationBlock(video=self.video.embed(video_raw), audio=self.audio.embed(audio_raw))
        trace = []
        for layer in range(self.config.num_layers):
            block = block.replace(layer_index=layer)
            for hook in hooks.at(layer):
                out = hook(block)
                self._check_hook_output(layer, block, out)
                block = out.replace(layer_index=layer)
            if keep_trace:
                trace.append(block.detached())
            vp, vb = self.video.run_block(layer, block.video_prompts, block.video)
            ap, ab = self.audio.run_block(layer, block.audio_prompts, block.audio)
            block = ActivationBlock(video=vb, audio=ab, video_prompts=vp, audio_prompts=ap)

        block = block.replace(layer_index=self.config.num_layers)
        if keep_trace:
            trace.append(block.detached())
        video_emb, audio_emb = self.video.pool(block.video), self.audio.pool(block.audio)
        if single:
            video_emb, audio_emb = video_emb[0], audio_emb[0]
        return video_emb, audio_emb, trace


def init_frozen(config, in_channels):
    config.validate()
    return FrozenEncoders(config, in_channels)


def forward(encoders, clip, hooks=None):
    """Forward one AVClip; returns (video_embedding [D], audio_embedding [D], trace)"""
    video = torch.as_tensor(clip.video_raw, dtype=torch.float32)
    audio = torch.as_tensor(clip.audio_raw, dtype=torch.float32)
    return encoders(video, audio, hooks=hooks, keep_trace=True)
