"""Full joint captioning/detection network with ablation switches."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .alignment import AlignmentHead, TextAnchor, infonce
from .backbone import Backbone
from .decoders import (CaptionDecoder, DetectionHead, DetectionTokenEncoder, Vocabulary,
                       detection_loss, make_teacher_batch)
from .nn import Module
from .pgcai import PgCai
from .synthscene import caption_vocabulary
from .tamg import Tamg


@dataclass
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch: int = 4
    dim: int = 32
    heads: int = 2
    k: int = 4
    det_channels: tuple = (64, 32)
    det_token_grid: int = 2
    d_lm: int = 64
    lm_heads: int = 2
    lm_layers: int = 2
    max_len: int = 16
    d_t: int = 32
    tau_align: float = 0.07
    gate_bias: float = 2.0
    zero_init_output: bool = False
    mirror_directions: bool = True
    anchor_seed: int = 1234
    seed: int = 0
    # ablation switches
    proto: bool = True
    tamg: bool = True
    det_guided: bool = True
    align: bool = True


@dataclass
class ForwardOutput:
    det_logits: T.Tensor
    prefix: T.Tensor
    task: object
    cam: object
    extras: dict = field(default_factory=dict)


class PTNet(Module):
    def __init__(self, config: ModelConfig | None = None, vocab: Vocabulary | None = None):
        cfg = config or ModelConfig()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        self.vocab = vocab or Vocabulary(caption_vocabulary())
        self.backbone = Backbone(rng, cfg.image_size, cfg.channels, cfg.patch, cfg.dim, cfg.heads)
        grid = self.backbone.grid
        self.pgcai = PgCai(rng, cfg.dim, cfg.heads, grid * grid, cfg.k, cfg.proto, cfg.zero_init_output,
                           cfg.mirror_directions)
        self.tamg = Tamg(cfg.dim, cfg.heads, cfg.tamg, cfg.gate_bias)
        self.det_head = DetectionHead(rng, cfg.dim, grid, cfg.image_size, cfg.det_channels)
        self.det_tokens = (DetectionTokenEncoder(rng, cfg.det_channels[-1], cfg.d_lm,
                                                 cfg.det_token_grid, cfg.det_token_grid)
                           if cfg.det_guided else None)
        n_prefix = 1 + grid * grid + (cfg.det_token_grid ** 2 if cfg.det_guided else 0)
        self.decoder = CaptionDecoder(rng, self.vocab, cfg.dim, cfg.d_lm, cfg.lm_heads,
                                      cfg.lm_layers, cfg.max_len, max_prefix=n_prefix)
        self.align_head = AlignmentHead(rng, cfg.d_lm, cfg.d_t, cfg.tau_align) if cfg.align else None
        self.anchor = TextAnchor(cfg.d_t, seed=cfg.anchor_seed)

    # parameters trained at the reduced learning rate
    def slow_parameter_names(self):
        names = []
        for name, _ in self.named_parameters():
            if name.startswith(("backbone.", "decoder.project.", "align_head.proj.")):
                names.append(name)
        return names

    def forward(self, img1, img2) -> ForwardOutput:
        p1, p2 = self.backbone.pyramid_pair(img1, img2)
        cam = self.pgcai(p1, p2)
        task = self.tamg(cam)
        logits, fs2 = self.det_head(task.detection)
        dd = self.det_tokens(fs2) if self.det_tokens is not None else None
        prefix = self.decoder.assemble(task.caption, dd)
        return ForwardOutput(logits, prefix, task, cam, {"fs2": fs2, "det_tokens": dd})

    def losses(self, img1, img2, masks, captions):
        """Per-task losses for one batch.  ``captions`` are token lists."""
        out = self.forward(img1, img2)
        ld = detection_loss(out.det_logits, masks)
        tb = make_teacher_batch(captions, self.vocab, self.decoder.max_len)
        lc, hidden = self.decoder.caption_loss(out.prefix, tb)
        la = None
        if self.align_head is not None:
            ev = self.align_head.pool_project(hidden, tb.valid)
            et = self.anchor.embed_batch(captions)
            la = infonce(ev, et, self.align_head.tau)
        return {"caption": lc, "detection": ld, "align": la}

    def predict(self, img1, img2, threshold=0.5):
        """Probability maps, binary masks and decoded token lists."""
        with T.no_grad():
            out = self.forward(img1, img2)
            probs = T.sigmoid(out.det_logits).data
            ids = self.decoder.greedy_decode(out.prefix)
        captions = [self.vocab.decode(x) for x in ids]
        return probs, (probs > threshold).astype(np.uint8), captions
