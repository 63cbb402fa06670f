"""Visual and text embedding backends.

The default ``seeded`` backend is deterministic and fully offline: it
embeds images through a fixed seeded random projection of the pooled
grayscale image, and text through averaged per-token hash projections.
The ``pretrained`` backend wraps hub-downloaded encoders when they are
installed and reachable; it fails with a clear error otherwise instead
of silently degrading.
"""

from __future__ import annotations

import hashlib
from functools import lru_cache

import numpy as np

from .emb1 import EMBED_DIM
from .freq import _pool_weights, _resize_weights

_VISUAL_SEED = 271828
_SIZE = 320
_POOL = 24, 32  # pooled grayscale grid fed to the projection


class BackendUnavailable(RuntimeError):
    """Raised when a requested embedding backend cannot run here."""


@lru_cache(maxsize=None)
def _visual_projection() -> np.ndarray:
    rng = np.random.default_rng(_VISUAL_SEED)
    return rng.normal(0.0, 1.0 / np.sqrt(EMBED_DIM), size=(EMBED_DIM, EMBED_DIM))


def _unit(vec: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


class SeededBackend:
    """Deterministic offline encoders built on fixed seeded projections."""

    name = "seeded"

    def embed_image(self, pixels: np.ndarray) -> np.ndarray:
        arr = np.asarray(pixels, dtype=np.float64)
        if arr.ndim == 3:
            gray = arr[:, :, 0] if arr.shape[2] == 1 else arr @ np.array([0.299, 0.587, 0.114])
        else:
            gray = arr
        h, w = gray.shape
        resized = _resize_weights(h, _SIZE) @ gray @ _resize_weights(w, _SIZE).T
        pooled = _pool_weights(_SIZE, _POOL[0]) @ resized @ _pool_weights(_SIZE, _POOL[1]).T
        return _unit(_visual_projection() @ pooled.reshape(EMBED_DIM))

    def caption(self, pixels: np.ndarray) -> str:
        """Deterministic stand-in caption from simple image statistics."""
        arr = np.asarray(pixels, dtype=np.float64)
        h, w = arr.shape[:2]
        mean = arr.mean()
        tone = "dark" if mean < 0.33 else "bright" if mean > 0.66 else "midtone"
        contrast = "flat" if arr.std() < 0.1 else "contrasty"
        return f"a {tone} {contrast} image of size {w} by {h}"

    def embed_text(self, text: str) -> np.ndarray:
        tokens = text.lower().split() or [""]
        acc = np.zeros(EMBED_DIM)
        for token in tokens:
            digest = hashlib.sha256(token.encode("utf-8")).digest()
            seed = int.from_bytes(digest[:8], "little")
            acc += np.random.default_rng(seed).normal(size=EMBED_DIM)
        return _unit(acc / len(tokens))


class PretrainedBackend:
    """Hub-downloaded vision encoder and captioner (optional extra)."""

    name = "pretrained"

    def __init__(self, visual_model: str = "openai/clip-vit-large-patch14",
                 caption_model: str = "Salesforce/blip-image-captioning-base"):
        try:
            import torch  # noqa: F401
            from transformers import (  # noqa: F401
                AutoProcessor,
                BlipForConditionalGeneration,
                CLIPModel,
            )
        except ImportError as exc:
            raise BackendUnavailable(
                f"pretrained backend needs transformers and torch: {exc}"
            ) from exc
        try:
            from transformers import AutoProcessor, BlipForConditionalGeneration, CLIPModel

            self._clip = CLIPModel.from_pretrained(visual_model)
            self._clip_proc = AutoProcessor.from_pretrained(visual_model)
            self._blip = BlipForConditionalGeneration.from_pretrained(caption_model)
            self._blip_proc = AutoProcessor.from_pretrained(caption_model)
        except Exception as exc:  # hub unreachable, weights missing, ...
            raise BackendUnavailable(
                f"could not load pretrained weights ({visual_model}, {caption_model}): {exc}"
            ) from exc

    def embed_image(self, pixels: np.ndarray) -> np.ndarray:
        import torch
        from PIL import Image

        img = Image.fromarray((np.asarray(pixels) * 255).astype(np.uint8))
        inputs = self._clip_proc(images=img, return_tensors="pt")
        with torch.no_grad():
            feats = self._clip.get_image_features(**inputs)[0].numpy().astype(np.float64)
        if feats.shape != (EMBED_DIM,):
            raise ValueError(f"visual encoder produced {feats.shape}, need ({EMBED_DIM},)")
        return _unit(feats)

    def caption(self, pixels: np.ndarray) -> str:
        import torch
        from PIL import Image

        img = Image.fromarray((np.asarray(pixels) * 255).astype(np.uint8))
        inputs = self._blip_proc(images=img, return_tensors="pt")
        with torch.no_grad():
            ids = self._blip.generate(**inputs, max_new_tokens=30, do_sample=False)
        return self._blip_proc.decode(ids[0], skip_special_tokens=True)

    def embed_text(self, text: str) -> np.ndarray:
        import torch

        inputs = self._clip_proc(text=[text], return_tensors="pt", padding=True)
        with torch.no_grad():
            feats = self._clip.get_text_features(**inputs)[0].numpy().astype(np.float64)
        if feats.shape != (EMBED_DIM,):
            raise ValueError(f"text encoder produced {feats.shape}, need ({EMBED_DIM},)")
        return _unit(feats)


def make_backend(name: str, **kwargs):
    if name == "seeded":
        return SeededBackend()
    if name == "pretrained":
        return PretrainedBackend(**kwargs)
    raise ValueError(f"unknown backend {name!r}, expected seeded or pretrained")
