"""Folder-per-class image dataset discovery."""

from __future__ import annotations

import os

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp")


def discover(root) -> tuple[list, list, list]:
    """Return (class names, image paths, labels), everything sorted.

    Classes are the immediate subdirectories of ``root``; labels index into
    the sorted class-name list so the mapping is stable across machines.
    """
    if not os.path.isdir(root):
        raise ValueError(f"dataset root {root!r} is not a directory")
    class_names = sorted(entry.name for entry in os.scandir(root)
                         if entry.is_dir())
    if not class_names:
        raise ValueError(f"no class subdirectories under {root!r}")
    paths = []
    labels = []
    for label, name in enumerate(class_names):
        class_dir = os.path.join(root, name)
        files = sorted(f for f in os.listdir(class_dir)
                       if f.lower().endswith(IMAGE_EXTENSIONS))
        for fname in files:
            paths.append(os.path.join(class_dir, fname))
            labels.append(label)
    if not paths:
        raise ValueError(f"no images with extensions {IMAGE_EXTENSIONS} "
                         f"under {root!r}")
    return class_names, paths, labels
