"""Pooled-feature surrogate classifiers used as the attribution black box.

The surrogate sees one feature per grid patch (the patch-mean intensity) and
is either a logistic regression trained by full-batch gradient descent, or an
identity-link additive model. The additive form is the analytic probe for the
Shapley oracle tests: with a zero-fill baseline its exact Shapley value for
patch i is simply weight_i * patch_mean_i.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError
from .phantom import DatasetManifest
from .volume import PatchGrid, Volume, patch_means

logger = logging.getLogger(__name__)

LINKS = ("identity", "logistic")


@dataclass
class SurrogateParams:
    weights: np.ndarray  # one weight per grid patch
    bias: float
    link: str = "logistic"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if self.link not in LINKS:
            raise InvalidArgumentError(f"link must be one of {LINKS}, got {self.link!r}")
        if not np.all(np.isfinite(self.weights)) or not np.isfinite(self.bias):
            raise InvalidArgumentError("surrogate parameters must be finite")


class SurrogatePredictor:
    """Predictor over volumes: P(class 1) = link(w . patch_means(v) + b)."""

    supports_concurrency = True

    def __init__(self, params: SurrogateParams, grid: PatchGrid):
        if params.weights.size != len(grid):
            raise InvalidArgumentError(
                f"{params.weights.size} weights for a grid of {len(grid)} patches"
            )
        self.params = params
        self.grid = grid

    def score(self, v: Volume) -> float:
        z = float(self.params.weights @ patch_means(v, self.grid) + self.params.bias)
        if self.params.link == "logistic":
            return float(1.0 / (1.0 + np.exp(-z)))
        return z

    def predict(self, v: Volume) -> np.ndarray:
        p1 = self.score(v)
        return np.array([1.0 - p1, p1], dtype=np.float64)

    def to_json(self) -> dict:
        return {
            "weights": self.params.weights.tolist(),
            "bias": self.params.bias,
            "link": self.params.link,
            "grid": self.grid.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SurrogatePredictor":
        grid = PatchGrid.from_json(obj["grid"])
        return cls(SurrogateParams(np.array(obj["weights"]), float(obj["bias"]), obj["link"]), grid)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "SurrogatePredictor":
        return cls.from_json(json.loads(Path(path).read_text()))


def additive_probe(weights, bias: float, grid: PatchGrid) -> SurrogatePredictor:
    """Identity-link surrogate with fixed weights (the analytic Shapley probe)."""
    return SurrogatePredictor(SurrogateParams(np.asarray(weights), bias, "identity"), grid)


def surrogate_features(manifest: DatasetManifest, grid: PatchGrid) -> tuple[np.ndarray, np.ndarray]:
    feats = np.stack(
        [patch_means(manifest.load_volume(i), grid) for i in range(len(manifest.entries))]
    )
    return feats, manifest.labels()


def surrogate_train(
    manifest: DatasetManifest,
    grid: PatchGrid,
    link: str = "logistic",
    *,
    lr: float = 0.5,
    max_iter: int = 2000,
    tol: float = 1e-6,
) -> tuple[SurrogatePredictor, dict]:
    """Fit the surrogate by full-batch gradient descent on mean cross-entropy.

    Features are mean-centered while fitting (otherwise gradient descent leaks
    the intercept into bright-but-uninformative patches, which corrupts the
    attribution maps downstream); the centering is folded back into the bias,
    so the returned model is a plain sigma(w . x + b). Stops when the gradient
    infinity-norm falls below ``tol``; otherwise warns and returns the best
    (lowest-loss) iterate seen.
    """
    if link != "logistic":
        raise InvalidArgumentError("only the logistic link is trainable")
    x, y = surrogate_features(manifest, grid)
    if np.sum(y == 0) < 2 or np.sum(y == 1) < 2:
        raise InvalidArgumentError("need >= 2 samples per class to train the surrogate")
    n, k = x.shape
    mu = x.mean(axis=0)
    xc = x - mu
    w = np.zeros(k, dtype=np.float64)
    b = 0.0
    best = (np.inf, w.copy(), b)
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        z = xc @ w + b
        p = 1.0 / (1.0 + np.exp(-z))
        eps = 1e-12
        loss = -float(np.mean(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps)))
        if loss < best[0]:
            best = (loss, w.copy(), b)
        residual = p - y
        gw = xc.T @ residual / n
        gb = float(residual.mean())
        if max(np.abs(gw).max(), abs(gb)) < tol:
            converged = True
            break
        w -= lr * gw
        b -= lr * gb
    if not converged:
        logger.warning(
            "surrogate training hit max_iter=%d (best loss %.4g); returning best iterate",
            max_iter,
            best[0],
        )
        _, w, b = best
    bias = float(b - w @ mu)
    predictor = SurrogatePredictor(SurrogateParams(w, bias, "logistic"), grid)
    preds = (x @ w + bias) > 0
    info = {
        "iterations": iterations,
        "converged": converged,
        "loss": float(best[0]),
        "train_acc": float((preds == y).mean()),
    }
    return predictor, info
