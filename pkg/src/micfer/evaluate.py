"""Expression accuracy and identity leakage (linear probes, held-out MI)."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .mine import ConvergedMi, estimate_mi_converged
from .model import ModelBundle, encode_expression, encode_identity, loss_cross_entropy
from .nn import Linear
from .optim import Adam
from .tensor import Tensor, backward, no_grad, recording
from .train import SplitData, embed, stratified_holdout


@dataclass
class EvalReport:
    accuracy: float
    confusion: list[list[int]]
    n: int
    identity_probe_accuracy: float | None = None
    chance: float | None = None
    mi_ze_zi: float | None = None
    fps: float | None = None

    def to_json(self, timing: bool = False) -> str:
        d = asdict(self)
        if not timing:
            d.pop("fps")
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


def confusion_matrix(labels: np.ndarray, preds: np.ndarray, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm


def report_from_predictions(labels, preds, n_classes: int) -> EvalReport:
    cm = confusion_matrix(labels, preds, n_classes)
    n = int(cm.sum())
    return EvalReport(float(np.trace(cm) / n), cm.tolist(), n)


def evaluate(bundle: ModelBundle, data: SplitData, batch_size: int = 64) -> EvalReport:
    """Per-sequence argmax accuracy and confusion matrix; fps over the expression branch only."""
    if len(data) == 0:
        raise ValueError("cannot evaluate an empty split")
    preds = []
    frames = 0
    elapsed = 0.0
    with no_grad():
        for start in range(0, len(data), batch_size):
            res = data.residuals[start:start + batch_size]
            t0 = time.perf_counter()
            probs = bundle.cls(encode_expression(bundle, res)).data
            elapsed += time.perf_counter() - t0
            frames += res.shape[0] * res.shape[1]
            preds.append(np.argmax(probs, axis=1))
    report = report_from_predictions(data.labels, np.concatenate(preds), bundle.dims.n_classes)
    report.fps = frames / elapsed if elapsed > 0 else math.inf
    return report


# ---------------------------------------------------------------------------
# probes


@dataclass
class ProbeResult:
    accuracy: float
    chance: float
    n_classes: int


def standardize(train: np.ndarray, *others: np.ndarray):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return [(a - mu) / sd for a in (train,) + others]


def linear_probe(x_train: np.ndarray, y_train: np.ndarray, x_test: np.ndarray, y_test: np.ndarray,
                 epochs: int = 1000, seed: int = 0, lr: float = 0.1) -> ProbeResult:
    """Full-batch softmax regression on standardized features; held-out accuracy."""
    classes = np.unique(np.concatenate([y_train, y_test]))
    if len(classes) < 2:
        raise ValueError("probe needs at least 2 classes")
    yt = np.searchsorted(classes, y_train)
    yv = np.searchsorted(classes, y_test)
    xt, xv = standardize(np.asarray(x_train, float), np.asarray(x_test, float))
    layer = Linear(xt.shape[1], len(classes), np.random.default_rng(seed))
    opt = Adam(layer.parameters(), lr=lr)
    for _ in range(epochs):
        with recording():
            loss = loss_cross_entropy(T.softmax(layer(Tensor(xt))), yt)
            grads = backward(loss, layer.parameters())
        opt.step(grads)
    with no_grad():
        pred = np.argmax(layer(Tensor(xv)).data, axis=1)
    return ProbeResult(float(np.mean(pred == yv)), 1.0 / len(classes), len(classes))


def probe_split(groups: np.ndarray, seed: int, holdout: float = 0.25) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 41]))
    return stratified_holdout(groups, holdout, rng)


def probe_features(features: np.ndarray, targets: np.ndarray, epochs: int = 1000, seed: int = 0,
                   holdout: float = 0.25, folds: int = 5) -> ProbeResult:
    """Linear probe with a held-out part of every target class, averaged over ``folds``
    independently drawn holdouts."""
    if len(np.unique(targets)) < 2:
        raise ValueError("probe needs at least 2 distinct targets")
    if folds < 1:
        raise ValueError("folds must be >= 1")
    results = []
    for k in range(folds):
        held = probe_split(targets, seed * 1009 + k, holdout)
        results.append(linear_probe(features[~held], targets[~held], features[held],
                                    targets[held], epochs, seed * 1009 + k))
    return ProbeResult(float(np.mean([r.accuracy for r in results])), results[0].chance,
                       results[0].n_classes)


def probe_identity(bundle: ModelBundle, data: SplitData, epochs: int = 1000, seed: int = 0,
                   folds: int = 5) -> ProbeResult:
    """Identity leakage: linear probe from frozen z_E to identity on this split."""
    if len(np.unique(data.identities)) < 2:
        raise ValueError("identity probe needs a split with at least 2 identities")
    return probe_features(embed(bundle, data.residuals), data.identities, epochs, seed,
                          folds=folds)


def probe_expression_from_identity(bundle: ModelBundle, train: SplitData, test: SplitData,
                                   epochs: int = 1000, seed: int = 0) -> ProbeResult:
    """Expression from frozen z_I: trained on ``train``, scored on ``test``."""
    zi_train = encode_identity(bundle, train.i_frames)
    zi_test = encode_identity(bundle, test.i_frames)
    return linear_probe(zi_train, train.labels, zi_test, test.labels, epochs, seed)


# ---------------------------------------------------------------------------
# mutual information


def measure_mi_features(ze: np.ndarray, zi: np.ndarray, steps: int = 3000, seed: int = 0,
                        lr: float = 1e-3) -> ConvergedMi:
    """MI between paired features; T is fit on one half and scored on the other."""
    n = len(ze)
    if n < 64:
        raise ValueError(f"MI measurement needs at least 64 pairs, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 53]))
    order = rng.permutation(n)
    fit_idx, held_idx = order[: n // 2], order[n // 2:]
    ze_s, = standardize(ze)
    zi_s, = standardize(zi)
    fit_pairs = (ze_s[fit_idx], zi_s[fit_idx])
    held_pairs = (ze_s[held_idx], zi_s[held_idx])
    return estimate_mi_converged(lambda _: fit_pairs, ze.shape[1], zi.shape[1], steps, lr, rng,
                                 eval_sampler=lambda _: held_pairs)


def measure_mi(bundle: ModelBundle, data: SplitData, steps: int = 3000, seed: int = 0) -> ConvergedMi:
    ze = embed(bundle, data.residuals)
    zi = encode_identity(bundle, data.i_frames)
    return measure_mi_features(ze, zi, steps, seed)
