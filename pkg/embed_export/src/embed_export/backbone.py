"""Backbones mapping images and texts into one embedding space.

Shipping real vision-language checkpoints is out of scope for an offline
tool, so the registry holds a deterministic stand-in: images are decoded,
resized, and passed through a fixed seeded random projection; texts are
character-trigram hashed into a bag vector and projected the same way.
Embeddings are a pure function of the input bytes and the backbone name, so
repeated exports produce identical files.  A checkpoint-backed encoder can
be added by registering another object with the same three methods.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
from PIL import Image


def _projection(name: str, kind: str, out_dim: int, in_dim: int) -> np.ndarray:
    seed = np.random.SeedSequence([zlib.crc32(name.encode()),
                                   zlib.crc32(kind.encode())])
    rng = np.random.default_rng(seed)
    return rng.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if (norms == 0.0).any():
        raise ValueError("cannot normalize a zero embedding")
    return x / norms


@dataclass
class ToyProjectionBackbone:
    """Random-projection encoder: fast, weight-free, bit-reproducible."""

    name: str
    dim: int = 256
    image_size: int = 32
    text_buckets: int = 4096
    logit_scale: float = 100.0
    _image_proj: np.ndarray | None = field(default=None, repr=False)
    _text_proj: np.ndarray | None = field(default=None, repr=False)

    def _image_matrix(self) -> np.ndarray:
        if self._image_proj is None:
            in_dim = 3 * self.image_size * self.image_size
            self._image_proj = _projection(self.name, "image", self.dim, in_dim)
        return self._image_proj

    def _text_matrix(self) -> np.ndarray:
        if self._text_proj is None:
            self._text_proj = _projection(self.name, "text", self.dim,
                                          self.text_buckets)
        return self._text_proj

    def embed_images(self, paths) -> np.ndarray:
        pixels = []
        for path in paths:
            try:
                with Image.open(path) as img:
                    rgb = img.convert("RGB").resize(
                        (self.image_size, self.image_size), Image.BILINEAR)
            except (OSError, ValueError) as exc:
                raise ValueError(f"unreadable image {path}: {exc}") from exc
            flat = np.asarray(rgb, dtype=np.float64).reshape(-1) / 255.0
            pixels.append(flat - flat.mean())
        if not pixels:
            raise ValueError("no images to embed")
        return _unit_rows(np.stack(pixels) @ self._image_matrix().T)

    def embed_texts(self, texts) -> np.ndarray:
        if not texts:
            raise ValueError("no texts to embed")
        bags = np.zeros((len(texts), self.text_buckets))
        for i, text in enumerate(texts):
            padded = f" {text.lower()} "
            for j in range(len(padded) - 2):
                bucket = zlib.crc32(padded[j:j + 3].encode()) % self.text_buckets
                bags[i, bucket] += 1.0
            if not bags[i].any():
                raise ValueError(f"text {text!r} produced no trigrams")
        return _unit_rows(bags @ self._text_matrix().T)


_REGISTRY = {
    "toy/rp-256": lambda: ToyProjectionBackbone(name="toy/rp-256"),
}


def available_backbones() -> tuple:
    return tuple(sorted(_REGISTRY))


def get_backbone(name: str):
    try:
        return _REGISTRY[name]()
    except KeyError:
        raise ValueError(f"unknown backbone {name!r}; "
                         f"available: {', '.join(available_backbones())}") from None
