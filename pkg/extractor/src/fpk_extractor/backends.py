"""Encoder backends.

A backend turns images into a pre-pooling spatial feature map plus a
global image feature, and prompt strings into text features. The
extractor itself never does any classification math; backends are the
only place model specifics live.

``ToyPatchBackend`` is a deterministic, dependency-light encoder built
from per-patch image statistics pushed through fixed random
projections; it exists so the full export -> consume pipeline can be
exercised without pretrained weights. ``ClipBackend`` wraps a
contrastive vision-language model when torch, open_clip and weights
are available, exporting the encoder's feature grid from just before
its final attention pooling layer.
"""

from __future__ import annotations

import hashlib

import numpy as np
from PIL import Image

from .errors import MissingWeights

_PATCH = 8  # pixels per feature-map cell side in the toy backend


def _unit(a: np.ndarray, axis=-1) -> np.ndarray:
    norm = np.linalg.norm(a, axis=axis, keepdims=True)
    return a / np.maximum(norm, 1e-30)


def _patch_stats(block: np.ndarray) -> np.ndarray:
    """Eight simple statistics of an (P, P, 3) pixel block."""
    means = block.mean(axis=(0, 1))
    stds = block.std(axis=(0, 1))
    dx = np.abs(np.diff(block, axis=1)).mean()
    dy = np.abs(np.diff(block, axis=0)).mean()
    return np.concatenate([means, stds, [dx, dy]])


class ToyPatchBackend:
    """Deterministic patch-statistics encoder for tests and smoke runs.

    The same image always yields the same features; the projection
    matrices are fixed functions of the requested dimensions.
    """

    def __init__(self, h: int = 7, w: int = 7, c: int = 32, c_t: int = 32):
        self.h, self.w, self.c, self.c_t = h, w, c, c_t
        # Seed derives from the dims alone so features are reproducible
        # across processes.
        rng = np.random.default_rng(1_000_003 * h + 10_007 * w + 101 * c + c_t)
        self._map_proj = rng.standard_normal((8, c)) / np.sqrt(8)
        self._glob_proj = rng.standard_normal((16, c_t)) / np.sqrt(16)
        self.tau = 0.01

    @property
    def dims(self):
        return self.h, self.w, self.c, self.c_t

    def _pixels(self, image: Image.Image) -> np.ndarray:
        img = image.convert("RGB").resize(
            (self.w * _PATCH, self.h * _PATCH), Image.BILINEAR
        )
        return np.asarray(img, dtype=np.float64) / 255.0

    def image_map(self, image: Image.Image) -> np.ndarray:
        px = self._pixels(image)
        rows = np.empty((self.h * self.w, self.c))
        for i in range(self.h):
            for j in range(self.w):
                block = px[i * _PATCH:(i + 1) * _PATCH, j * _PATCH:(j + 1) * _PATCH]
                rows[i * self.w + j] = _patch_stats(block) @ self._map_proj
        return _unit(rows)

    def image_global(self, image: Image.Image) -> np.ndarray:
        px = self._pixels(image)
        half_h, half_w = px.shape[0] // 2, px.shape[1] // 2
        quads = [px[:half_h, :half_w], px[:half_h, half_w:],
                 px[half_h:, :half_w], px[half_h:, half_w:]]
        stats = np.concatenate([
            np.concatenate([q.mean(axis=(0, 1)), [q.std()]]) for q in quads
        ])
        return _unit(stats @ self._glob_proj)

    def text_features(self, prompts) -> np.ndarray:
        rows = np.empty((len(prompts), self.c_t))
        for i, prompt in enumerate(prompts):
            digest = hashlib.sha256(prompt.encode("utf-8")).digest()
            seed = int.from_bytes(digest[:8], "little")
            rows[i] = np.random.default_rng(seed).standard_normal(self.c_t)
        return _unit(rows)


class ClipBackend:
    """Contrastive vision-language encoder via torch + open_clip.

    Exports the image trunk's feature grid from before the final
    attention pooling layer, the pooled global feature, prompt text
    features, and the model's learned temperature. Raises
    MissingWeights when the stack or the pretrained weights are not
    available.
    """

    def __init__(self, model_name: str = "RN50", weights: str | None = None):
        try:
            import open_clip
            import torch
        except ImportError as exc:
            raise MissingWeights(
                f"clip backend needs torch and open_clip: {exc}"
            ) from exc
        if weights is None:
            raise MissingWeights(
                "clip backend needs a local pretrained checkpoint (--weights)"
            )
        try:
            model, _, preprocess = open_clip.create_model_and_transforms(
                model_name, pretrained=weights
            )
        except Exception as exc:
            raise MissingWeights(f"could not load weights {weights!r}: {exc}") from exc
        self._torch = torch
        self._tokenize = open_clip.get_tokenizer(model_name)
        self._model = model.eval()
        self._preprocess = preprocess
        if not hasattr(model.visual, "attnpool"):
            raise MissingWeights(
                f"{model_name} has no attention-pooling trunk to split"
            )
        self.tau = float(1.0 / model.logit_scale.exp().item())
        with torch.no_grad():
            probe = torch.zeros(1, 3, 224, 224)
            grid = self._trunk(probe)
        self.h, self.w, self.c = grid.shape[2], grid.shape[3], grid.shape[1]
        self.c_t = model.text_projection.shape[1] if hasattr(
            model, "text_projection") else model.visual.output_dim

    @property
    def dims(self):
        return self.h, self.w, self.c, self.c_t

    def _trunk(self, batch):
        """Image tower up to, but not including, the attention pool."""
        visual = self._model.visual
        x = visual.act1(visual.bn1(visual.conv1(batch)))
        x = visual.act2(visual.bn2(visual.conv2(x)))
        x = visual.act3(visual.bn3(visual.conv3(x)))
        x = visual.avgpool(x)
        for layer in (visual.layer1, visual.layer2, visual.layer3, visual.layer4):
            x = layer(x)
        return x

    def image_map(self, image: Image.Image) -> np.ndarray:
        with self._torch.no_grad():
            batch = self._preprocess(image.convert("RGB")).unsqueeze(0)
            grid = self._trunk(batch)[0]  # (C, H, W)
        rows = grid.permute(1, 2, 0).reshape(-1, grid.shape[0]).numpy()
        return _unit(rows.astype(np.float64))

    def image_global(self, image: Image.Image) -> np.ndarray:
        with self._torch.no_grad():
            batch = self._preprocess(image.convert("RGB")).unsqueeze(0)
            feat = self._model.encode_image(batch)[0].numpy().astype(np.float64)
        return _unit(feat)

    def text_features(self, prompts) -> np.ndarray:
        with self._torch.no_grad():
            tokens = self._tokenize(list(prompts))
            feats = self._model.encode_text(tokens).numpy().astype(np.float64)
        return _unit(feats)


BACKENDS = {"toy": ToyPatchBackend, "clip": ClipBackend}
