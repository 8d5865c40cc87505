"""File formats: binary embedding matrices, JSON envelopes, text configs.

Embedding matrix file ("EmbFile"), version 1:

    magic   4 bytes  b"CEM1"
    version u16 LE   1
    dtype   u8       0 = float32, 1 = float64, 2 = uint32 (label files)
    rows    u64 LE
    cols    u64 LE
    payload rows*cols elements, row-major, little-endian
    crc     u32 LE   CRC-32 (zlib) of the payload bytes

Readers widen float32 to float64 and uint32 to int64.  Distinct errors for a
wrong magic, a CRC mismatch, and a wrong byte count, so callers can tell
corruption from truncation from "not our file".

Model, statistics, and world snapshots are JSON envelopes whose array fields
are whole EmbFiles, base64-encoded; keys are sorted and floats round-trip via
repr, so identical state always serializes to identical bytes.

Run configs are plain ``key=value`` text with ``#`` comments.  Unknown keys
and out-of-range values are rejected up front with the offending line.
"""

from __future__ import annotations

import base64
import json
import struct
import zlib

import numpy as np

from .losses import AdaptConfig
from .model import CbmModel, ConceptBank, LinearHead, ResidualBranch
from .shiftsim import ScenarioSpec, SyntheticWorld
from .stats import ClassStats

MAGIC = b"CEM1"
VERSION = 1
_HEADER = struct.Struct("<4sHBQQ")
_CRC = struct.Struct("<I")

DTYPE_F32, DTYPE_F64, DTYPE_U32 = 0, 1, 2
_DTYPES = {DTYPE_F32: "<f4", DTYPE_F64: "<f8", DTYPE_U32: "<u4"}


class FormatError(ValueError):
    """Base for embedding-file format violations."""


class BadMagicError(FormatError):
    """The file does not start with the embedding-file magic."""


class CrcMismatchError(FormatError):
    """Payload checksum disagrees with the stored CRC: data corruption."""


class TruncatedFileError(FormatError):
    """The byte count does not match the declared shape: truncated or padded."""


class ConfigError(ValueError):
    """A config line failed to parse or validate."""


def emb_bytes(array: np.ndarray, dtype: str | None = None) -> bytes:
    """Serialize a 2-D array; dtype one of 'f4', 'f8', 'u4' (inferred if None)."""
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise ValueError(f"embedding files hold 2-D matrices, got shape {arr.shape}")
    if dtype is None:
        dtype = "u4" if arr.dtype.kind in "iu" else "f8"
    code = {"f4": DTYPE_F32, "f8": DTYPE_F64, "u4": DTYPE_U32}.get(dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {dtype!r}")
    if code == DTYPE_U32:
        if arr.dtype.kind not in "iu":
            raise ValueError("u4 files require integer data")
        if arr.size and (arr.min() < 0 or arr.max() > np.iinfo(np.uint32).max):
            raise ValueError("integer data outside the uint32 range")
    elif not np.all(np.isfinite(arr)):
        raise ValueError("refusing to serialize NaN or Inf")
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    header = _HEADER.pack(MAGIC, VERSION, code, arr.shape[0], arr.shape[1])
    return header + payload + _CRC.pack(zlib.crc32(payload) & 0xFFFFFFFF)


def parse_emb(buf: bytes) -> np.ndarray:
    """Decode an embedding file; floats widen to f64, u32 labels to int64."""
    if len(buf) < _HEADER.size:
        raise TruncatedFileError(f"file too short for a header ({len(buf)} bytes)")
    magic, version, code, rows, cols = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    np_dtype = np.dtype(_DTYPES[code])
    expected = _HEADER.size + rows * cols * np_dtype.itemsize + _CRC.size
    if len(buf) != expected:
        raise TruncatedFileError(f"expected {expected} bytes, got {len(buf)}")
    payload = buf[_HEADER.size:expected - _CRC.size]
    (stored,) = _CRC.unpack_from(buf, expected - _CRC.size)
    if zlib.crc32(payload) & 0xFFFFFFFF != stored:
        raise CrcMismatchError(f"payload CRC {zlib.crc32(payload) & 0xFFFFFFFF:#x} "
                               f"!= stored {stored:#x}")
    arr = np.frombuffer(payload, dtype=np_dtype).reshape(rows, cols)
    if code == DTYPE_U32:
        return arr.astype(np.int64)
    return arr.astype(np.float64)


def write_emb(path, array: np.ndarray, dtype: str | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(emb_bytes(array, dtype))


def read_emb(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_emb(fh.read())


def write_labels(path, labels: np.ndarray) -> None:
    lab = np.asarray(labels)
    if lab.ndim != 1:
        raise ValueError("labels must be 1-D")
    write_emb(path, lab.reshape(-1, 1), dtype="u4")


def read_labels(path) -> np.ndarray:
    arr = read_emb(path)
    if arr.shape[1] != 1 or arr.dtype.kind not in "iu":
        raise FormatError(f"not a label file: shape {arr.shape}, dtype {arr.dtype}")
    return arr[:, 0]


def file_crc(path) -> int:
    """CRC-32 of a whole file, for manifests."""
    with open(path, "rb") as fh:
        return zlib.crc32(fh.read()) & 0xFFFFFFFF


# ---------------------------------------------------------------------------
# JSON envelopes

def _encode_block(array: np.ndarray, dtype: str = "f8") -> str:
    return base64.b64encode(emb_bytes(array, dtype)).decode("ascii")


def _decode_block(text: str) -> np.ndarray:
    return parse_emb(base64.b64decode(text.encode("ascii")))


def dump_json(obj) -> bytes:
    """Canonical JSON bytes: sorted keys, two-space indent, one trailing \\n."""
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode("utf-8")


def write_json(path, obj) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_json(obj))


def read_json(path) -> dict:
    with open(path, "rb") as fh:
        return json.loads(fh.read().decode("utf-8"))


def _require(envelope: dict, schema: str) -> None:
    got = envelope.get("schema")
    if got != schema:
        raise FormatError(f"expected schema {schema!r}, got {got!r}")


def save_model(path, model: CbmModel) -> None:
    obj = {
        "schema": "cbm-model/v1",
        "class_count": model.num_classes,
        "concept_count": model.bank.m,
        "residual_count": model.residual.r,
        "feature_dim": model.bank.dim,
        "captions": model.bank.captions,
        "blocks": {
            "bank": _encode_block(model.bank.vectors),
            "source_bank": _encode_block(np.asarray(model.bank.source_vectors)),
            "head_weights": _encode_block(model.head.weights),
            "head_bias": _encode_block(model.head.bias.reshape(1, -1)),
            "residual_vectors": _encode_block(model.residual.vectors),
            "residual_weights": _encode_block(model.residual.weights),
            "residual_bias": _encode_block(model.residual.bias.reshape(1, -1)),
        },
    }
    write_json(path, obj)


def load_model(path) -> CbmModel:
    obj = read_json(path)
    _require(obj, "cbm-model/v1")
    blocks = obj["blocks"]
    bank = ConceptBank(vectors=_decode_block(blocks["bank"]),
                       captions=obj.get("captions"),
                       source_vectors=_decode_block(blocks["source_bank"]))
    head = LinearHead(weights=_decode_block(blocks["head_weights"]),
                      bias=_decode_block(blocks["head_bias"])[0])
    residual = ResidualBranch(vectors=_decode_block(blocks["residual_vectors"]),
                              weights=_decode_block(blocks["residual_weights"]),
                              bias=_decode_block(blocks["residual_bias"])[0])
    model = CbmModel(bank=bank, head=head, residual=residual)
    for name, declared, actual in (
        ("class_count", obj["class_count"], model.num_classes),
        ("concept_count", obj["concept_count"], model.bank.m),
        ("residual_count", obj["residual_count"], model.residual.r),
        ("feature_dim", obj["feature_dim"], model.bank.dim),
    ):
        if declared != actual:
            raise FormatError(f"declared {name}={declared} but blocks give {actual}")
    return model


def save_stats(path, stats: ClassStats) -> None:
    blocks = {
        "means": _encode_block(stats.means),
        "counts": _encode_block(stats.counts.reshape(1, -1), dtype="u4"),
    }
    for c in range(stats.num_classes):
        blocks[f"cov_{c}"] = _encode_block(stats.covariances[c])
        blocks[f"inv_{c}"] = _encode_block(stats.inverses[c])
    write_json(path, {
        "schema": "class-stats/v1",
        "class_count": stats.num_classes,
        "concept_count": stats.m,
        "blocks": blocks,
    })


def load_stats(path) -> ClassStats:
    obj = read_json(path)
    _require(obj, "class-stats/v1")
    blocks = obj["blocks"]
    means = _decode_block(blocks["means"])
    ell = obj["class_count"]
    if means.shape[0] != ell or means.shape[1] != obj["concept_count"]:
        raise FormatError("means block does not match declared dimensions")
    covs = np.stack([_decode_block(blocks[f"cov_{c}"]) for c in range(ell)])
    invs = np.stack([_decode_block(blocks[f"inv_{c}"]) for c in range(ell)])
    counts = _decode_block(blocks["counts"])[0]
    return ClassStats(means=means, covariances=covs, inverses=invs, counts=counts)


def save_world(path, world: SyntheticWorld) -> None:
    spec = world.spec
    obj = {
        "schema": "synthetic-world/v1",
        "spec": {
            "kind": spec.kind,
            "feature_dim": spec.feature_dim,
            "concept_count": spec.concept_count,
            "class_count": spec.class_count,
            "n_source": spec.n_source,
            "n_target": spec.n_target,
            "severity": spec.severity,
            "spurious_concept_index": spec.spurious_concept_index,
            "dropped_concept_index": spec.dropped_concept_index,
            "noise_sigma": spec.noise_sigma,
            "seed": spec.seed,
        },
        "sigma_v": world.sigma_v,
        "zs_scale": world.zs_scale,
        "blocks": {
            "basis": _encode_block(world.basis),
            "true_bank": _encode_block(world.true_bank),
            "handed_bank": _encode_block(world.handed_bank),
            "class_means": _encode_block(world.class_means),
            "target_class_means": _encode_block(world.target_class_means),
            "causal_mask": _encode_block(world.causal_mask.reshape(1, -1)),
            "rule_weights": _encode_block(world.rule_weights),
            "rule_bias": _encode_block(world.rule_bias.reshape(1, -1)),
        },
    }
    if world.rotation is not None:
        obj["blocks"]["rotation"] = _encode_block(world.rotation)
    write_json(path, obj)


def load_world(path) -> SyntheticWorld:
    obj = read_json(path)
    _require(obj, "synthetic-world/v1")
    spec = ScenarioSpec(**obj["spec"])
    blocks = obj["blocks"]
    return SyntheticWorld(
        spec=spec,
        basis=_decode_block(blocks["basis"]),
        true_bank=_decode_block(blocks["true_bank"]),
        handed_bank=_decode_block(blocks["handed_bank"]),
        class_means=_decode_block(blocks["class_means"]),
        target_class_means=_decode_block(blocks["target_class_means"]),
        sigma_v=float(obj["sigma_v"]),
        causal_mask=_decode_block(blocks["causal_mask"])[0],
        rule_weights=_decode_block(blocks["rule_weights"]),
        rule_bias=_decode_block(blocks["rule_bias"])[0],
        rotation=_decode_block(blocks["rotation"]) if "rotation" in blocks else None,
        zs_scale=float(obj["zs_scale"]),
    )


# ---------------------------------------------------------------------------
# key=value configs

def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "on", "yes"):
        return True
    if low in ("0", "false", "off", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_k_coh(text: str):
    if text.lower() == "auto":
        return None
    return int(text)


def _parse_opt_int(text: str):
    if text.lower() == "none":
        return None
    return int(text)


# config key -> (target dataclass, field name, parser); "seed" goes to both
_ADAPT_KEYS = {
    "lambda_frob": ("lambda_frob", float),
    "lambda_sparse": ("lambda_sparse", float),
    "lambda_sim": ("lambda_sim", float),
    "lambda_coh": ("lambda_coh", float),
    "alpha": ("alpha", float),
    "n_grad": ("n_grad", int),
    "batch_size": ("batch_size", int),
    "r": ("residual_count", int),
    "k_coh": ("k_coh", _parse_k_coh),
    "csa_optimizer": ("csa_optimizer", str),
    "csa_lr": ("csa_lr", float),
    "lpa_optimizer": ("lpa_optimizer", str),
    "lpa_lr": ("lpa_lr", float),
    "rcb_optimizer": ("rcb_optimizer", str),
    "rcb_lr": ("rcb_lr", float),
    "zs_temperature": ("zs_temperature", float),
    "csa": ("csa_enabled", _parse_bool),
    "lpa": ("lpa_enabled", _parse_bool),
    "rcb": ("rcb_enabled", _parse_bool),
}

_SCENARIO_KEYS = {
    "scenario": ("kind", str),
    "feature_dim": ("feature_dim", int),
    "concept_count": ("concept_count", int),
    "class_count": ("class_count", int),
    "n_source": ("n_source", int),
    "n_target": ("n_target", int),
    "severity": ("severity", float),
    "spurious_index": ("spurious_concept_index", _parse_opt_int),
    "dropped_index": ("dropped_concept_index", _parse_opt_int),
    "noise_sigma": ("noise_sigma", float),
}

CONFIG_KEYS = tuple(sorted(list(_ADAPT_KEYS) + list(_SCENARIO_KEYS) + ["seed"]))


def parse_config_text(text: str) -> tuple[AdaptConfig, ScenarioSpec]:
    """Parse ``key=value`` lines into an adapt config and a scenario spec.

    Missing keys take defaults (scenario defaults to the low-level regime);
    ``seed`` seeds both.  Unknown or duplicate keys and invalid values raise
    ConfigError naming the line.
    """
    adapt_kwargs: dict = {}
    scen_kwargs: dict = {}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        try:
            if key == "seed":
                seed = int(value)
                adapt_kwargs["seed"] = seed
                scen_kwargs["seed"] = seed
            elif key in _ADAPT_KEYS:
                field_name, parser = _ADAPT_KEYS[key]
                adapt_kwargs[field_name] = parser(value)
            elif key in _SCENARIO_KEYS:
                field_name, parser = _SCENARIO_KEYS[key]
                scen_kwargs[field_name] = parser(value)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    scen_kwargs.setdefault("kind", "low_level")
    kind = scen_kwargs.pop("kind")
    try:
        base = ScenarioSpec.default(kind, seed=scen_kwargs.pop("seed", 42))
        scenario_fields = {
            "feature_dim": base.feature_dim, "concept_count": base.concept_count,
            "class_count": base.class_count, "n_source": base.n_source,
            "n_target": base.n_target, "severity": base.severity,
            "spurious_concept_index": base.spurious_concept_index,
            "dropped_concept_index": base.dropped_concept_index,
            "noise_sigma": base.noise_sigma,
        }
        scenario_fields.update(scen_kwargs)
        scenario = ScenarioSpec(kind=kind, seed=base.seed, **scenario_fields)
        adapt = AdaptConfig(**adapt_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return adapt, scenario


def read_config(path) -> tuple[AdaptConfig, ScenarioSpec]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def apply_overrides(adapt: AdaptConfig, scenario: ScenarioSpec,
                    pairs) -> tuple[AdaptConfig, ScenarioSpec]:
    """Apply ``KEY=VALUE`` override strings on top of parsed configs."""
    import dataclasses

    adapt_updates: dict = {}
    scen_updates: dict = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        try:
            if key == "seed":
                adapt_updates["seed"] = int(value)
                scen_updates["seed"] = int(value)
            elif key in _ADAPT_KEYS:
                field_name, parser = _ADAPT_KEYS[key]
                adapt_updates[field_name] = parser(value)
            elif key in _SCENARIO_KEYS:
                field_name, parser = _SCENARIO_KEYS[key]
                scen_updates[field_name] = parser(value)
            else:
                raise ConfigError(f"unknown key {key!r}")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from exc
    try:
        new_adapt = dataclasses.replace(adapt, **adapt_updates) if adapt_updates else adapt
        new_scen = dataclasses.replace(scenario, **scen_updates) if scen_updates else scenario
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return new_adapt, new_scen


def adapt_config_to_dict(cfg: AdaptConfig) -> dict:
    return {
        "lambda_frob": cfg.lambda_frob, "lambda_sparse": cfg.lambda_sparse,
        "lambda_sim": cfg.lambda_sim, "lambda_coh": cfg.lambda_coh,
        "alpha": cfg.alpha, "n_grad": cfg.n_grad, "batch_size": cfg.batch_size,
        "r": cfg.residual_count, "k_coh": cfg.k_coh,
        "csa_optimizer": cfg.csa_optimizer, "csa_lr": cfg.csa_lr,
        "lpa_optimizer": cfg.lpa_optimizer, "lpa_lr": cfg.lpa_lr,
        "rcb_optimizer": cfg.rcb_optimizer, "rcb_lr": cfg.rcb_lr,
        "zs_temperature": cfg.zs_temperature, "seed": cfg.seed,
        "csa": cfg.csa_enabled, "lpa": cfg.lpa_enabled, "rcb": cfg.rcb_enabled,
    }


def scenario_to_dict(spec: ScenarioSpec) -> dict:
    return {
        "scenario": spec.kind, "feature_dim": spec.feature_dim,
        "concept_count": spec.concept_count, "class_count": spec.class_count,
        "n_source": spec.n_source, "n_target": spec.n_target,
        "severity": spec.severity,
        "spurious_index": spec.spurious_concept_index,
        "dropped_index": spec.dropped_concept_index,
        "noise_sigma": spec.noise_sigma, "seed": spec.seed,
    }
