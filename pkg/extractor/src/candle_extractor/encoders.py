"""Frozen CLIP-style dual encoders.

Three model identifiers are supported:

* ``vit-b16-seeded`` — the ViT-B/16 CLIP architecture (224px, patch 16,
  512-dim joint space) with deterministic seeded random weights.  Offline
  stand-in for environments without access to pretrained checkpoints; the
  geometry and interfaces match the real model, the features carry no
  semantics.
* ``tiny-seeded`` — a two-layer miniature with the same 512-dim joint
  space, for fast tests.
* any other string — forwarded to ``transformers`` ``from_pretrained``
  (hub id or local path with real weights).

Text goes through a byte-level fallback tokenizer (UTF-8 bytes shifted
into the vocabulary, BOS/EOS framed) so no tokenizer download is needed;
the EOS token carries the pooled representation, as in CLIP.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch
from transformers import CLIPConfig, CLIPModel, CLIPTextConfig, CLIPVisionConfig

BOS_ID = 49406
EOS_ID = 49407
MAX_TEXT_LEN = 77


def _seed_from(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")


def _seeded_model(config: CLIPConfig, name: str) -> CLIPModel:
    torch.manual_seed(_seed_from(name))
    model = CLIPModel(config)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def _vit_b16_config() -> CLIPConfig:
    return CLIPConfig(
        projection_dim=512,
        vision_config=CLIPVisionConfig(
            hidden_size=768, intermediate_size=3072, num_hidden_layers=12,
            num_attention_heads=12, image_size=224, patch_size=16,
        ).to_dict(),
        text_config=CLIPTextConfig(
            hidden_size=512, intermediate_size=2048, num_hidden_layers=12,
            num_attention_heads=8,
        ).to_dict(),
    )


def _tiny_config() -> CLIPConfig:
    return CLIPConfig(
        projection_dim=512,
        vision_config=CLIPVisionConfig(
            hidden_size=96, intermediate_size=192, num_hidden_layers=2,
            num_attention_heads=4, image_size=224, patch_size=32,
        ).to_dict(),
        text_config=CLIPTextConfig(
            hidden_size=64, intermediate_size=128, num_hidden_layers=2,
            num_attention_heads=4,
        ).to_dict(),
    )


class ClipStyleEncoder:
    """Wraps a frozen CLIPModel; all outputs are L2-normalized numpy rows."""

    def __init__(self, model_name: str = "vit-b16-seeded", device: str = "cpu"):
        self.model_name = model_name
        self.device = torch.device(device)
        if model_name == "vit-b16-seeded":
            self.model = _seeded_model(_vit_b16_config(), model_name)
            self.pretrained = False
        elif model_name == "tiny-seeded":
            self.model = _seeded_model(_tiny_config(), model_name)
            self.pretrained = False
        else:
            self.model = CLIPModel.from_pretrained(model_name).eval()
            self.pretrained = True
        self.model.to(self.device)

    @property
    def dim(self) -> int:
        return int(self.model.config.projection_dim)

    @property
    def image_size(self) -> int:
        return int(self.model.config.vision_config.image_size)

    def encode_images(self, pixel_batch: np.ndarray) -> np.ndarray:
        """(N, 3, H, W) preprocessed pixels -> (N, dim) unit rows."""
        with torch.no_grad():
            pixels = torch.from_numpy(np.ascontiguousarray(pixel_batch)).to(self.device)
            vision = self.model.vision_model(pixel_values=pixels)
            pooled = vision.pooler_output if hasattr(vision, "pooler_output") else vision[1]
            feats = self.model.visual_projection(pooled)
            feats = feats / feats.norm(dim=-1, keepdim=True)
        return feats.cpu().numpy().astype(np.float32)

    def tokenize(self, text: str) -> tuple[np.ndarray, np.ndarray]:
        """Byte-level fallback tokenization framed with BOS/EOS."""
        body = [1 + b for b in text.lower().encode("utf-8")][: MAX_TEXT_LEN - 2]
        ids = [BOS_ID] + body + [EOS_ID]
        mask = [1] * len(ids)
        pad = MAX_TEXT_LEN - len(ids)
        ids += [0] * pad
        mask += [0] * pad
        return np.asarray(ids, dtype=np.int64), np.asarray(mask, dtype=np.int64)

    def encode_texts(self, prompts: list[str]) -> np.ndarray:
        ids = []
        masks = []
        for prompt in prompts:
            i, m = self.tokenize(prompt)
            ids.append(i)
            masks.append(m)
        with torch.no_grad():
            input_ids = torch.from_numpy(np.stack(ids)).to(self.device)
            attention = torch.from_numpy(np.stack(masks)).to(self.device)
            text = self.model.text_model(input_ids=input_ids, attention_mask=attention)
            pooled = text.pooler_output if hasattr(text, "pooler_output") else text[1]
            feats = self.model.text_projection(pooled)
            feats = feats / feats.norm(dim=-1, keepdim=True)
        return feats.cpu().numpy().astype(np.float32)
