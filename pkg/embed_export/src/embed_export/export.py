"""Export orchestration: dataset walk, embedding, logits, manifest."""

from __future__ import annotations

import json
import os

import numpy as np

from . import __version__, embfile
from .backbone import get_backbone
from .dataset import discover
from .probe import load_probe, probe_logits

MANIFEST_SCHEMA = "export-manifest/v1"
DEFAULT_TEMPLATE = "A photo of {class_name}"


def render_prompt(template: str, class_name: str) -> str:
    try:
        rendered = template.format(class_name=class_name)
    except (KeyError, IndexError) as exc:
        raise ValueError(f"bad prompt template {template!r}: {exc}") from exc
    if rendered == template:
        raise ValueError(f"template {template!r} does not use {{class_name}}")
    return rendered


def class_text_embeddings(backbone, templates, class_names) -> np.ndarray:
    """One unit embedding per class: template ensemble mean, renormalized."""
    per_template = []
    for template in templates:
        prompts = [render_prompt(template, name) for name in class_names]
        per_template.append(backbone.embed_texts(prompts))
    mean = np.mean(per_template, axis=0)
    return mean / np.linalg.norm(mean, axis=1, keepdims=True)


def caption_set(templates, class_names, extra_captions) -> list:
    captions = [render_prompt(t, name) for t in templates for name in class_names]
    captions.extend(extra_captions)
    return captions


def _write(out_dir, name, array, dtype):
    path = os.path.join(out_dir, name)
    embfile.write_emb(path, array, dtype)
    return {"rows": int(array.shape[0]), "cols": int(array.shape[1]),
            "crc32": embfile.file_crc(path)}


def run_export(data_dir, backbone_name: str, templates, out_dir,
               captions_path=None, probe_path=None) -> dict:
    backbone = get_backbone(backbone_name)
    class_names, paths, labels = discover(data_dir)
    templates = list(templates) or [DEFAULT_TEMPLATE]

    extra_captions = []
    if captions_path:
        with open(captions_path, "r", encoding="utf-8") as fh:
            extra_captions = [line.rstrip("\n") for line in fh if line.strip()]

    features = backbone.embed_images(paths)
    class_text = class_text_embeddings(backbone, templates, class_names)
    zs_logits = backbone.logit_scale * (features @ class_text.T)
    captions = caption_set(templates, class_names, extra_captions)
    simmat = features @ backbone.embed_texts(captions).T

    os.makedirs(out_dir, exist_ok=True)
    labels_arr = np.asarray(labels, dtype=np.int64).reshape(-1, 1)
    files = {
        "features.emb": _write(out_dir, "features.emb", features, "f4"),
        "labels.emb": _write(out_dir, "labels.emb", labels_arr, "u4"),
        "zs_logits.emb": _write(out_dir, "zs_logits.emb", zs_logits, "f4"),
        "simmat.emb": _write(out_dir, "simmat.emb", simmat, "f4"),
    }

    if probe_path:
        probe = load_probe(probe_path)
        if probe["backbone"] != backbone_name:
            raise ValueError(f"backbone mismatch: probe was fit on "
                             f"{probe['backbone']!r}, exporting with "
                             f"{backbone_name!r}")
        if probe["class_names"] != class_names:
            raise ValueError(f"class mismatch: probe classes "
                             f"{probe['class_names']} vs dataset {class_names}")
        lp = probe_logits(features, probe["weights"], probe["bias"])
        files["lp_logits.emb"] = _write(out_dir, "lp_logits.emb", lp, "f4")

    captions_file = os.path.join(out_dir, "captions.txt")
    with open(captions_file, "w", encoding="utf-8") as fh:
        fh.write("\n".join(captions) + "\n")

    manifest = {
        "schema": MANIFEST_SCHEMA,
        "exporter_version": __version__,
        "backbone": backbone_name,
        "logit_scale": backbone.logit_scale,
        "dataset": os.path.basename(os.path.abspath(data_dir)),
        "prompt_templates": templates,
        "class_names": class_names,
        "dim": int(features.shape[1]),
        "num_images": int(features.shape[0]),
        "num_classes": len(class_names),
        "num_captions": len(captions),
        "files": files,
        "aux_files": {"captions.txt": {"crc32": embfile.file_crc(captions_file)}},
    }
    with open(os.path.join(out_dir, "manifest.json"), "wb") as fh:
        fh.write((json.dumps(manifest, sort_keys=True, indent=2) + "\n").encode())
    return manifest


def read_manifest(out_dir) -> dict:
    with open(os.path.join(out_dir, "manifest.json"), "rb") as fh:
        obj = json.loads(fh.read().decode())
    if obj.get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"not an export manifest: schema {obj.get('schema')!r}")
    return obj


def verify_export(out_dir) -> dict:
    """Re-checksum every listed file; returns the manifest on success."""
    manifest = read_manifest(out_dir)
    listed = dict(manifest["files"])
    listed.update(manifest["aux_files"])
    for name, entry in listed.items():
        path = os.path.join(out_dir, name)
        if not os.path.exists(path):
            raise ValueError(f"manifest lists missing file {name}")
        actual = embfile.file_crc(path)
        if actual != entry["crc32"]:
            raise ValueError(f"{name}: CRC {actual:#x} does not match "
                             f"manifest {entry['crc32']:#x}")
        if "rows" in entry:
            arr = embfile.read_emb(path)
            if arr.shape != (entry["rows"], entry["cols"]):
                raise ValueError(f"{name}: shape {arr.shape} does not match "
                                 f"manifest")
    return manifest
