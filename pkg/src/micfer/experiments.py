"""Reusable experiment drivers: the Gaussian MINE benchmark and ablation arms.

Shared by the acceptance suite and the scripts in ``scripts/``.
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .evaluate import evaluate, measure_mi, probe_identity
from .mine import estimate_mi_converged, gaussian_mi, gaussian_sampler
from .model import IdentityEncoder
from .synth import generate_dataset, load_manifest
from .train import FitResult, SplitData, TrainConfig, dims_for, fit, identity_pretrain, load_split


@dataclass
class BenchResult:
    rho: float
    dim: int
    seed: int
    estimate: float
    raw: float
    truth: float
    seconds: float


def gaussian_bench(rho: float, seed: int, dim: int = 1, batch: int = 512, steps: int = 2000,
                   lr: float = 1e-3) -> BenchResult:
    t0 = time.perf_counter()
    res = estimate_mi_converged(gaussian_sampler(rho, dim, batch), dim, dim, steps, lr,
                                np.random.default_rng(seed))
    return BenchResult(rho, dim, seed, res.value, res.raw, gaussian_mi(rho, dim),
                       time.perf_counter() - t0)


@dataclass
class Workspace:
    """A generated dataset with its splits and a pretrained, frozen identity encoder."""
    root: Path
    train: SplitData
    test: SplitData
    identity: IdentityEncoder
    n_classes: int
    _motion: tuple[SplitData, SplitData] | None = dataclasses.field(default=None, repr=False)

    def splits(self, with_motion: bool) -> tuple[SplitData, SplitData]:
        if not with_motion:
            return self.train, self.test
        if self._motion is None:
            m = load_manifest(self.root)
            self._motion = load_split(m.root, m.train, True), load_split(m.root, m.test, True)
        return self._motion


def prepare(root, seed: int = 0, d_i: int = 32, **dataset_kw) -> Workspace:
    """Generate the dataset under ``root`` unless present, load it, pretrain f_I."""
    root = Path(root)
    if not (root / "manifest.csv").exists():
        generate_dataset(root, split_seed=seed, **dataset_kw)
    m = load_manifest(root)
    train = load_split(m.root, m.train)
    test = load_split(m.root, m.test)
    n_classes = 1 + int(max(train.labels.max(), test.labels.max()))
    dims = dims_for(train, TrainConfig(d_i=d_i), n_classes)
    enc = identity_pretrain(train, dims, seed=seed).encoder
    return Workspace(root, train, test, enc, n_classes)


@dataclass
class ArmResult:
    name: str
    accuracy: float
    identity_probe: float
    probe_chance: float
    mi: float
    mi_raw: float
    best_epoch: int
    train_seconds: float
    fit: FitResult = dataclasses.field(repr=False, default=None)


ABLATIONS = {
    "MIC": {},
    "MIC-MI": {"alpha": 0.0},
    "MIC-Irec": {"beta_start": 0.0},
    "MIC+T": {"input_mode": "residual+motion"},
}


def run_arm(ws: Workspace, config: TrainConfig, name: str = "", seed: int = 0) -> ArmResult:
    """Train one configuration, then score expression accuracy on the test split and
    identity leakage (probe and MI) on the training split."""
    train, test = ws.splits(config.with_motion)
    t0 = time.perf_counter()
    res = fit(config, train, ws.identity, ws.n_classes)
    seconds = time.perf_counter() - t0
    rep = evaluate(res.bundle, test)
    probe = probe_identity(res.bundle, train, seed=seed)
    mi = measure_mi(res.bundle, train, seed=seed)
    return ArmResult(name, rep.accuracy, probe.accuracy, probe.chance, mi.value, mi.raw,
                     res.best_epoch, seconds, res)
