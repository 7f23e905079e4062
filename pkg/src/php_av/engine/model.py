"""
PHP model assembly

Frozen towers plus the three injected components and the per-task heads.
The model owns the placement of components onto layer bands and the
per-stage split between trainable and frozen parameters.
"""

import logging

import torch
import torch.nn as nn

from ..errors import ValidationError, TaskLookupError
from ..model.frozen_dual_encoder import init_frozen, HookSet
from ..model.tma_adapter import TMAAdapter
from ..model.tmdg_adapter import TMDGAdapter, inject
from ..model.tmi_prompts import TaskBank, concat_prompts
from ..model.contrastive_heads import (
    ContrastiveHeads, LogitScales, project, contrastive_loss, l2_normalize, predict,
)
from ..tasks.synthetic_av_tasks import class_text_embeddings
from ..utils import derive_seed, fingerprint_arrays

logger = logging.getLogger(__name__)


def _seeded(seed, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


class PHPModel(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        ref = config.tasks[0]
        enc, train, prompts, placement = config.encoder, config.train, config.prompts, config.placement
        dim = enc.model_dim

        self.encoders = init_frozen(enc, ref.base_channels)

        self.tma_layers = enc.band_layers(placement.band("TMA")) if train.is_enabled("TMA") else []
        self.tmdg_layers = enc.band_layers(placement.band("TMDG")) if train.is_enabled("TMDG") else []
        tmi_band = enc.band_layers(placement.band("TMI")) if train.is_enabled("TMI") else []
        depth = len(tmi_band) if prompts.tmi_depth is None else min(prompts.tmi_depth, len(tmi_band))
        self.tmi_layers = tmi_band[len(tmi_band) - depth:]

        self.tma = nn.ModuleDict({
            str(layer): _seeded(derive_seed(train.seed, "tma", layer),
                                lambda: TMAAdapter(dim, ref.video_tokens, ref.audio_tokens,
                                                   residual=train.tma_residual))
            for layer in self.tma_layers
        })
        self.tmdg = None
        if self.tmdg_layers:
            self.tmdg = _seeded(derive_seed(train.seed, "tmdg"),
                                lambda: TMDGAdapter(dim, prompts.pool_size, prompts.generated_length,
                                                    prompts.attention_heads))
            # the shared attention block stays at its seeded weights
            self.tmdg.self_attn.requires_grad_(False)
        self.tmi = TaskBank(dim, prompts.deep_length, len(self.tmi_layers)) if self.tmi_layers else None
        self.heads = nn.ModuleDict()
        self.logit_scales = LogitScales()

        self.task_specs = {}
        self._class_text = {}

    # -- registration -----------------------------------------------------

    def register_task(self, spec):
        task_id = spec.task_id
        if task_id in self.task_specs:
            raise ValidationError(f"Task '{task_id}' is already registered")
        if "." in task_id:
            raise ValidationError(f"Task id '{task_id}' must not contain '.'")

        def build():
            if self.tmdg is not None:
                self.tmdg.register(task_id)
            if self.tmi is not None:
                self.tmi.register(task_id)
            self.heads[task_id] = ContrastiveHeads(self.config.encoder.model_dim)

        _seeded(derive_seed(self.config.train.seed, "task", task_id), build)
        self.task_specs[task_id] = spec
        self._class_text[task_id] = torch.from_numpy(class_text_embeddings(spec, self.config.encoder.model_dim))
        logger.debug(f"Registered task {task_id}")

    def spec(self, task_id):
        if task_id not in self.task_specs:
            raise TaskLookupError(f"Task '{task_id}' is not registered; registered: {list(self.task_specs)}")
        return self.task_specs[task_id]

    # -- forward ----------------------------------------------------------

    def hooks(self, task_id):
        self.spec(task_id)
        hooks = HookSet()
        for layer in self.tma_layers:
            hooks.register(layer, self.tma[str(layer)])
        for layer in self.tmdg_layers:
            hooks.register(layer, self._tmdg_hook(task_id))
        if self.tmi is not None:
            video_prompts, audio_prompts = self.tmi.select(task_id)
            for i, layer in enumerate(self.tmi_layers):
                hooks.register(layer, self._tmi_hook(video_prompts[i], audio_prompts[i]))
        return hooks

    # prompt hooks replace the prefix: new prompts go in front of an emptied prefix

    def _tmdg_hook(self, task_id):
        def hook(block):
            g_v, g_a = self.tmdg(block.video, block.audio, task_id)
            return block.replace(video_prompts=inject(g_v, block.video_prompts[:, :0]),
                                 audio_prompts=inject(g_a, block.audio_prompts[:, :0]))
        return hook

    @staticmethod
    def _tmi_hook(p_v, p_a):
        def hook(block):
            return block.replace(video_prompts=concat_prompts(p_v, block.video_prompts[:, :0]),
                                 audio_prompts=concat_prompts(p_a, block.audio_prompts[:, :0]))
        return hook

    def encode(self, task_id, video, audio, keep_trace=False):
        return self.encoders(video, audio, hooks=self.hooks(task_id), keep_trace=keep_trace)

    def class_targets(self, task_id):
        """Projected class text embeddings (T_v, T_a), each [K, D_p]"""
        self.spec(task_id)
        heads = self.heads[task_id]
        text = self._class_text[task_id].to(self.logit_scales.video.dtype)
        return l2_normalize(heads.mlp_tv(text)), l2_normalize(heads.mlp_ta(text))

    def loss(self, task_id, video, audio, text):
        video_emb, audio_emb, _ = self.encode(task_id, video, audio)
        f_v, f_a, t_v, t_a = project(video_emb, audio_emb, text, self.heads[task_id])
        return (contrastive_loss(f_v, t_v, self.logit_scales.tau_v)
                + contrastive_loss(f_a, t_a, self.logit_scales.tau_a))

    def predict(self, task_id, video, audio):
        spec = self.spec(task_id)
        heads = self.heads[task_id]
        video_emb, audio_emb, _ = self.encode(task_id, video, audio)
        f_v, f_a = l2_normalize(heads.mlp_v(video_emb)), l2_normalize(heads.mlp_a(audio_emb))
        t_v, t_a = self.class_targets(task_id)
        return predict(f_v, f_a, t_v, t_a, multi_label=spec.is_multi_label, center=True)

    # -- parameter bookkeeping -------------------------------------------

    def trainable_prefixes(self, task_id):
        self.spec(task_id)
        prefixes = ["logit_scales.", f"heads.{task_id}."]
        if self.tma_layers:
            prefixes.append("tma.")
        if self.tmdg is not None:
            prefixes.append(f"tmdg.generators.{task_id}.")
        if self.tmi is not None:
            prefixes.append(f"tmi.prompts.{task_id}.")
        return prefixes

    def trainable_named_parameters(self, task_id):
        prefixes = tuple(self.trainable_prefixes(task_id))
        return {name: p for name, p in self.named_parameters() if name.startswith(prefixes)}

    def set_trainable(self, task_id):
        trainable = self.trainable_named_parameters(task_id)
        for name, p in self.named_parameters():
            p.requires_grad_(name in trainable)
        return trainable

    def checkpoint_parameters(self):
        """Every parameter outside the frozen, seed-derived blocks"""
        frozen = ("encoders.", "tmdg.self_attn.")
        return {name: p for name, p in self.named_parameters() if not name.startswith(frozen)}

    def component_fingerprints(self):
        def fp(prefix):
            return fingerprint_arrays({n: p.detach().cpu().numpy() for n, p in self.named_parameters()
                                       if n.startswith(prefix)})

        out = {"backbone": self.encoders.fingerprint(), "tma": fp("tma."), "logit_scales": fp("logit_scales.")}
        if self.tmdg is not None:
            out["tmdg_attention"] = fp("tmdg.self_attn.")
        for task_id in self.task_specs:
            out[f"heads/{task_id}"] = fp(f"heads.{task_id}.")
            if self.tmdg is not None:
                out[f"tmdg/{task_id}"] = fp(f"tmdg.generators.{task_id}.")
            if self.tmi is not None:
                out[f"tmi/{task_id}"] = fp(f"tmi.prompts.{task_id}.")
        return out
