"""Linear probe on exported features: plain softmax regression.

Full-batch gradient descent from zero weights; no randomness, so a probe
fit twice on the same export is identical.  The probe file records the
backbone and class list it was fit with, letting the exporter refuse to
apply it to embeddings from a different space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

PROBE_SCHEMA = "embed-probe/v1"


@dataclass
class ProbeConfig:
    epochs: int = 300
    learning_rate: float = 1.0
    weight_decay: float = 1e-4

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def fit_probe(features: np.ndarray, labels: np.ndarray, num_classes: int,
              config: ProbeConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    config = config or ProbeConfig()
    config.validate()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise ValueError("features must be (n, d) with one label per row")
    if y.min() < 0 or y.max() >= num_classes:
        raise ValueError(f"labels outside [0, {num_classes})")
    n, d = x.shape
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), y] = 1.0
    w = np.zeros((num_classes, d))
    b = np.zeros(num_classes)
    for _ in range(config.epochs):
        g = (_softmax(x @ w.T + b) - onehot) / n
        w -= config.learning_rate * (g.T @ x + config.weight_decay * w)
        b -= config.learning_rate * g.sum(axis=0)
    return w, b


def probe_logits(features: np.ndarray, weights: np.ndarray,
                 bias: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.shape[1] != weights.shape[1]:
        raise ValueError(f"features have dim {x.shape[1]}, "
                         f"probe expects {weights.shape[1]}")
    return x @ weights.T + bias


def save_probe(path, weights: np.ndarray, bias: np.ndarray,
               backbone: str, class_names: list) -> None:
    obj = {
        "schema": PROBE_SCHEMA,
        "backbone": backbone,
        "class_names": list(class_names),
        "dim": int(weights.shape[1]),
        "weights": [[float(v) for v in row] for row in weights],
        "bias": [float(v) for v in bias],
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(obj, sort_keys=True, indent=2) + "\n").encode())


def load_probe(path) -> dict:
    with open(path, "rb") as fh:
        obj = json.loads(fh.read().decode())
    if obj.get("schema") != PROBE_SCHEMA:
        raise ValueError(f"not a probe file: schema {obj.get('schema')!r}")
    obj["weights"] = np.asarray(obj["weights"], dtype=np.float64)
    obj["bias"] = np.asarray(obj["bias"], dtype=np.float64)
    return obj
