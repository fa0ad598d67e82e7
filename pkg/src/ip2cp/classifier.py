"""Soft-margin linear SVM over the learned embeddings.

Fitting minimizes lambda/2 * ||w||^2 + mean hinge loss by deterministic
subgradient descent: each epoch visits the samples in a seeded shuffled
order, applies one step on the mean subgradient with step size
1 / (lambda * t), and projects w back onto the ball of radius
1 / sqrt(lambda). The bias is unregularized. Prediction is the sign rule
over w . x + b with boundary points classified as damaged (the conservative
call for a damage detector).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._binio import Reader, u32_bytes
from .errors import (
    DataError,
    ModelFileError,
    NotAModelFileError,
    ShapeError,
)
from .embedder import Embedding, EmbedderNet, forward
from .raster import BinaryLabel

SVM_MAGIC = b"IP2CPSVM"
SVM_VERSION = 1


@dataclass(frozen=True)
class SvmConfig:
    regularization: float = 1e-3
    epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.regularization <= 0:
            raise ValueError(f"regularization must be > 0, got {self.regularization}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class SvmModel:
    weights: np.ndarray
    bias: float
    trained: bool = False
    objective_history: tuple[float, ...] = field(default=(), repr=False)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.weights, dtype=np.float64)
        if arr.ndim != 1:
            raise ShapeError(f"svm weights must be 1-D, got shape {arr.shape}")
        if not (np.all(np.isfinite(arr)) and np.isfinite(self.bias)):
            raise DataError("non-finite SVM parameters")
        self.weights = arr

    @property
    def dim(self) -> int:
        return self.weights.shape[0]


def hinge_objective(w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray,
                    lam: float) -> float:
    """Regularized hinge objective: lam/2 ||w||^2 + mean(max(0, 1 - y(w.x+b)))."""
    margins = y * (x @ w + b)
    return float(0.5 * lam * np.dot(w, w) + np.mean(np.maximum(0.0, 1.0 - margins)))


def _as_matrix(points) -> np.ndarray:
    rows = [p.coords if isinstance(p, Embedding) else np.asarray(p, dtype=np.float64)
            for p in points]
    return np.stack(rows).astype(np.float64)


def fit_svm(points, labels, cfg: SvmConfig | None = None) -> SvmModel:
    """Fit the linear decision rule on embedded points.

    Labels encode NO_DAMAGE as -1 and WITH_DAMAGE as +1. Both classes must
    be present. The returned model carries the per-epoch objective values in
    objective_history.
    """
    cfg = cfg or SvmConfig()
    if len(points) != len(labels):
        raise DataError(f"{len(points)} points but {len(labels)} labels")
    if len(points) == 0:
        raise DataError("no points to fit")
    x = _as_matrix(points)
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite embedding fed to the SVM")
    y = np.asarray(
        [1.0 if lbl == BinaryLabel.WITH_DAMAGE else -1.0 for lbl in labels]
    )
    if not (np.any(y > 0) and np.any(y < 0)):
        raise DataError("SVM training needs both classes present")
    lam = cfg.regularization
    rng = np.random.default_rng(cfg.seed)
    n, dim = x.shape
    w = np.zeros(dim)
    b = 0.0
    radius = 1.0 / np.sqrt(lam)
    history = []
    for t in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        xp, yp = x[perm], y[perm]
        margins = yp * (xp @ w + b)
        viol = margins < 1.0
        # mean subgradient over the epoch's (shuffled) samples
        gw = lam * w - (yp[viol] @ xp[viol]) / n
        gb = -float(yp[viol].sum()) / n
        eta = 1.0 / (lam * t)
        w = w - eta * gw
        b = b - eta * gb
        norm = float(np.linalg.norm(w))
        if norm > radius:
            w *= radius / norm
        history.append(hinge_objective(w, b, x, y, lam))
    return SvmModel(w, float(b), trained=True, objective_history=tuple(history))


def svm_predict(model: SvmModel, point: Embedding | np.ndarray) -> BinaryLabel:
    """Classify one embedding; scores >= 0 (including the boundary) are damaged."""
    if not model.trained:
        raise DataError("SVM model is untrained")
    coords = point.coords if isinstance(point, Embedding) else np.asarray(point, dtype=np.float64)
    if coords.shape != model.weights.shape:
        raise ShapeError(
            f"point dim {coords.shape} does not match model dim {model.weights.shape}"
        )
    score = float(model.weights @ coords) + model.bias
    return BinaryLabel.WITH_DAMAGE if score >= 0.0 else BinaryLabel.NO_DAMAGE


def predict_patch(net: EmbedderNet, model: SvmModel, pixels: np.ndarray) -> BinaryLabel:
    """End-to-end patch prediction: classify the embedded patch."""
    return svm_predict(model, forward(net, pixels))


def save_svm(model: SvmModel, path: str | Path) -> None:
    """Write magic "IP2CPSVM", version u32, dim u32, then dim+1 little-endian
    float32 values (weights then bias)."""
    if not model.trained:
        raise DataError("refusing to save an untrained SVM model")
    payload = np.concatenate([model.weights, [model.bias]]).astype("<f4")
    Path(path).write_bytes(
        SVM_MAGIC + u32_bytes(SVM_VERSION) + u32_bytes(model.dim) + payload.tobytes()
    )


def load_svm(path: str | Path) -> SvmModel:
    data = Path(path).read_bytes()
    reader = Reader(data, "svm file")
    if reader.take(len(SVM_MAGIC), "magic") != SVM_MAGIC:
        raise NotAModelFileError(f"{path} is not an SVM model file (bad magic)")
    version = reader.u32("version")
    if version != SVM_VERSION:
        raise ModelFileError(f"{path}: unsupported SVM version {version}")
    dim = reader.u32("dim")
    values = reader.f32(dim + 1, "parameters")
    reader.expect_end()
    return SvmModel(values[:dim].astype(np.float64), float(values[dim]), trained=True)
