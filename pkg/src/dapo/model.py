"""The tunable model: frozen backbone + prompt bank + prefixes + adapters."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import alignment as al
from . import numerics as nx
from .config import RunConfig
from .encoders import BackboneWeights, PrefixState, Vocabulary, default_vocab, encode_image
from .numerics import RngHandle, Tensor
from .prompts import PromptBank, StatePrototypes, aggregate_abnormal, embed_state_prototypes, init_prompt_bank

TRAINABLE_GROUPS = ("V", "W", "U_text", "U_vision", "adapters")


def group_of(name: str) -> str:
    if name == "prompts.V":
        return "V"
    if name == "prompts.W":
        return "W"
    if name.startswith("prefix.text."):
        return "U_text"
    if name.startswith("prefix.vision."):
        return "U_vision"
    if name.startswith("adapter."):
        return "adapters"
    raise KeyError(name)


@dataclass
class Prediction:
    global_probs: np.ndarray  # (B, 2)
    anomaly_map: np.ndarray  # (B, H, W)
    class_evidence: np.ndarray  # (B, C, H, W) stage-summed, upsampled
    type_labels: np.ndarray  # (B, H, W)
    image_scores: np.ndarray  # (B,)
    multilabel: np.ndarray  # (B, K)
    stage_maps: list[np.ndarray]  # each (B, C, h, w)


class DapoModel:
    def __init__(self, cfg: RunConfig, backbone: BackboneWeights, bank: PromptBank, prefix: PrefixState,
                 adapters: al.AdapterStack):
        self.cfg = cfg
        self.enc = cfg.encoder_config()
        self.backbone = backbone
        self.bank = bank
        self.prefix = prefix
        self.adapters = adapters

    @classmethod
    def create(cls, cfg: RunConfig, backbone: BackboneWeights, defect_names: Sequence[str] | None = None,
               vocab: Vocabulary | None = None) -> DapoModel:
        cfg.validate()
        names = list(defect_names if defect_names is not None else cfg.train_defects)
        rng = RngHandle(cfg.seed, ("dapo-init",))
        enc = cfg.encoder_config()
        backbone.freeze()
        tstats = backbone.token_stats()
        vstats = backbone.vision_stats()
        if cfg.init == "random":
            tstats = vstats = (0.0, 1.0)
        bank = init_prompt_bank(cfg.init, backbone.token_stats(), names, cfg.n_prompts, cfg.context_len, cfg.width,
                                cfg.offset_mult, rng.child("prompts"), vocab or default_vocab())
        prefix = PrefixState.init(enc, rng.child("prefix"), tstats, vstats)
        adapters = al.AdapterStack.init(len(enc.tap_layers), cfg.width, cfg.width)
        return cls(cfg, backbone, bank, prefix, adapters)

    # -- parameters ------------------------------------------------------------
    def trainable(self) -> dict[str, Tensor]:
        out = dict(self.bank.tensors())
        out.update(self.prefix.tensors())
        out.update(self.adapters.tensors())
        return out

    def num_trainable(self) -> int:
        return sum(t.size for t in self.trainable().values())

    def expected_trainable(self) -> int:
        c = self.cfg
        prefix = c.prefix_len * c.width * (c.text_prefix_depth + c.depth)
        adapters = len(c.tap_layers) * (c.width * c.width + c.width)
        return c.n_prompts * c.context_len * c.width * 2 + prefix + adapters

    # -- forward -----------------------------------------------------------------
    def prototypes(self, bank: PromptBank | None = None) -> StatePrototypes:
        return embed_state_prototypes(bank or self.bank, self.backbone, self.enc, self.prefix)

    def encode(self, images: np.ndarray):
        z_x, taps = encode_image(images, self.backbone, self.enc, self.prefix)
        adapted = [al.adapt_patches(taps[layer], self.adapters, i) for i, layer in enumerate(self.enc.tap_layers)]
        return z_x, adapted

    def loss(self, images: np.ndarray, masks: np.ndarray, labels: Sequence[int],
             protos: StatePrototypes | None = None) -> al.LossBreakdown:
        c = self.cfg
        protos = protos or self.prototypes()
        z_x, adapted = self.encode(images)
        z_agg = aggregate_abnormal(protos, c.aggregation, z_x if c.aggregation == "attention" else None, c.tau_agg)
        g = al.global_loss(z_x, protos.z_N, z_agg, labels, c.tau)
        maps = al.similarity_maps(adapted, protos, c.tau)
        l = al.local_loss(maps, masks, c.focal_gamma, c.dice_eps)
        return al.total_loss(g, l, c.lam)

    def predict(self, images: np.ndarray, bank: PromptBank | None = None,
                protos: StatePrototypes | None = None) -> Prediction:
        c = self.cfg
        with nx.no_grad():
            protos = protos or self.prototypes(bank)
            z_x, adapted = self.encode(images)
            z_agg = aggregate_abnormal(protos, c.aggregation, z_x if c.aggregation == "attention" else None,
                                       c.tau_agg)
            s = nx.softmax(al.global_logits(z_x, protos.z_N, z_agg, c.tau), axis=-1).data
            maps = al.similarity_maps(adapted, protos, c.tau)
        H = W = c.image_size
        amap = al.binary_anomaly_map(maps, H, W)
        labels, agg = al.multitype_mask(maps, H, W)
        scores = al.image_score(s, amap, c.beta)
        ml = al.multilabel_probs(z_x.data, protos, c.tau)
        return Prediction(s, amap, agg, labels, np.atleast_1d(scores), ml, maps.arrays())
