"""Deterministic toy backbone."""

import numpy as np
import pytest
from PIL import Image

from embed_export.backbone import available_backbones, get_backbone


def _write_png(path, rgb, size=(40, 40), seed=0):
    rng = np.random.default_rng(seed)
    base = np.tile(np.array(rgb, dtype=np.float64), (*size, 1))
    noisy = np.clip(base + rng.normal(0.0, 12.0, base.shape), 0, 255)
    Image.fromarray(noisy.astype(np.uint8)).save(path)


def test_registry():
    assert "toy/rp-256" in available_backbones()
    bb = get_backbone("toy/rp-256")
    assert bb.dim == 256
    with pytest.raises(ValueError, match="unknown backbone"):
        get_backbone("toy/nope")


def test_image_embeddings_unit_and_deterministic(tmp_path):
    paths = []
    for i, rgb in enumerate([(200, 30, 30), (30, 200, 30), (30, 30, 200)]):
        p = tmp_path / f"img{i}.png"
        _write_png(p, rgb, seed=i)
        paths.append(p)
    bb = get_backbone("toy/rp-256")
    emb = bb.embed_images(paths)
    assert emb.shape == (3, 256)
    np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-9)
    again = get_backbone("toy/rp-256").embed_images(paths)
    np.testing.assert_array_equal(emb, again)
    # distinct colors land in distinct directions
    gram = emb @ emb.T
    off_diag = gram[~np.eye(3, dtype=bool)]
    assert np.all(off_diag < 0.99)


def test_text_embeddings_unit_and_sensitive():
    bb = get_backbone("toy/rp-256")
    emb = bb.embed_texts(["a photo of a cat", "a photo of a dog", "a photo of a cat"])
    assert emb.shape == (3, 256)
    np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(emb[0], emb[2])
    assert not np.array_equal(emb[0], emb[1])


def test_empty_text_rejected():
    bb = get_backbone("toy/rp-256")
    with pytest.raises(ValueError, match="no trigrams"):
        bb.embed_texts([""])


def test_unreadable_image_raises(tmp_path):
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"not an image at all")
    bb = get_backbone("toy/rp-256")
    with pytest.raises(ValueError, match="unreadable image"):
        bb.embed_images([bad])
