"""Vision backbones producing fixed-length patch embeddings.

Two presets: ViT-B/16 (d_v = 768, the classification head removed) and
ResNet-34 (d_v = 512, the fc layer removed).  Images are resized so the
shorter side is 224 and center-cropped to 224x224, then normalized with
the standard ImageNet statistics.

Pretrained weights are loaded from `--weights` when provided; otherwise
the architecture is instantiated with a seeded deterministic
initialization (this build environment has no network access to weight
hubs), which preserves the embedding contract and byte-reproducible
exports.  Inference is single-threaded for reproducibility.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
from torchvision import models, transforms

_PREPROCESS = transforms.Compose([
    transforms.Resize(224),
    transforms.CenterCrop(224),
    transforms.ToTensor(),
    transforms.Normalize(mean=[0.485, 0.456, 0.406],
                         std=[0.229, 0.224, 0.225]),
])


class Backbone:
    def __init__(self, name: str, model: nn.Module, d_v: int):
        self.name = name
        self.d_v = d_v
        self._model = model.eval()

    @torch.no_grad()
    def embed(self, images) -> np.ndarray:
        """PIL images -> (N, d_v) float32 embeddings, row i from image i."""
        batch = torch.stack([_PREPROCESS(img.convert("RGB"))
                             for img in images])
        out = self._model(batch)
        return out.detach().cpu().numpy().astype(np.float32)


def _build_vit_b_16() -> tuple[nn.Module, int]:
    model = models.vit_b_16(weights=None)
    model.heads = nn.Identity()
    return model, 768


def _build_resnet34() -> tuple[nn.Module, int]:
    model = models.resnet34(weights=None)
    model.fc = nn.Identity()
    return model, 512


_BUILDERS = {"vit_b_16": _build_vit_b_16, "resnet34": _build_resnet34}

BACKBONE_DIMS = {"vit_b_16": 768, "resnet34": 512}


def load_backbone(name: str, weights_path=None, seed: int = 0) -> Backbone:
    if name not in _BUILDERS:
        raise ValueError(f"unknown backbone {name!r}; "
                         f"choose from {sorted(_BUILDERS)}")
    torch.set_num_threads(1)
    torch.manual_seed(seed)
    model, d_v = _BUILDERS[name]()
    if weights_path is not None:
        state = torch.load(weights_path, map_location="cpu",
                           weights_only=True)
        model.load_state_dict(state, strict=False)
    return Backbone(name, model, d_v)
