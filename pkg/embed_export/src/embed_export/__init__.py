"""Offline embedding exporter for the conda-adapt pipeline.

Walks a folder-per-class image dataset, embeds images and class prompts with
a registered backbone, and writes everything the adaptation tool ingests:
feature matrices, zero-shot logits, optional linear-probe logits, a
caption-similarity matrix, and a manifest with per-file checksums.  All
outputs use the conda-adapt embedding-file format and are byte-reproducible.
"""

__version__ = "0.1.0"
