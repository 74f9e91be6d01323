"""Mutual information neural estimation with the Donsker-Varadhan bound.

    MI(zE; zI) >= mean_i T(zE_i, zI_i) - log mean_i exp T(zE_i, zI_pi(i))

where ``pi`` is a random within-batch permutation, so the second average runs
over (approximate) samples of the product of marginals. ``T`` is trained by
gradient ascent; the gradient of the log term uses an exponential moving
average of the denominator instead of the batch mean, which removes most of
the minibatch bias.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .nn import MLP, Module
from .optim import Adam
from .tensor import Tensor, backward, no_grad, recording


class MiEstimationError(FloatingPointError):
    pass


@dataclass(frozen=True)
class MiEstimate:
    value: float
    joint_term: float
    marginal_log_term: float
    n: int


class StatisticsNet(Module):
    """T(zE, zI): relu MLP on the concatenated pair, scalar output."""

    def __init__(self, d_e: int, d_i: int, rng: np.random.Generator, hidden: int = 128):
        self.d_e, self.d_i = d_e, d_i
        self.mlp = MLP([d_e + d_i, hidden, hidden, 1], rng)

    def __call__(self, ze, zi) -> Tensor:
        return self.mlp(T.concat([ze, zi], axis=1)).reshape(-1)


@dataclass
class EmaState:
    rate: float = 0.99
    ema: float | None = None

    def update(self, batch_mean: float) -> float:
        if self.ema is None:
            self.ema = batch_mean
        else:
            self.ema = self.rate * self.ema + (1.0 - self.rate) * batch_mean
        if not self.ema > 0:
            raise MiEstimationError(f"moving average of exp(T) is non-positive ({self.ema})")
        return self.ema


def marginal_pairing(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation of ``0..n-1`` (fixed points allowed)."""
    if n < 2:
        raise ValueError(f"marginal pairing needs n >= 2, got {n}")
    return rng.permutation(n)


def statistics(net: StatisticsNet, ze, zi, pi: np.ndarray) -> tuple[Tensor, Tensor]:
    """T on joint pairs and on permuted (marginal) pairs."""
    n = ze.shape[0]
    if zi.shape[0] != n:
        raise T.ShapeError(f"estimate: zE has {n} rows, zI has {zi.shape[0]}")
    pi = np.asarray(pi)
    if pi.shape != (n,) or not np.array_equal(np.sort(pi), np.arange(n)):
        raise ValueError("pi must be a permutation of 0..n-1")
    zi_marg = zi[pi] if isinstance(zi, Tensor) else Tensor(np.asarray(zi)[pi])
    return net(ze, zi), net(ze, zi_marg)


def dv_bound(t_joint: Tensor, t_marg: Tensor) -> Tensor:
    """Differentiable batch DV estimate (no moving-average correction)."""
    n = t_marg.shape[0]
    return T.mean(t_joint) - (T.logsumexp(t_marg) - math.log(n))


def corrected_objective(t_joint: Tensor, t_marg: Tensor, ema: float) -> Tensor:
    """Surrogate whose gradient is grad mean(T_joint) - grad mean(exp T_marg) / ema."""
    return T.mean(t_joint) - T.mean(T.exp(t_marg - math.log(ema)))


def summarize(t_joint: np.ndarray, t_marg: np.ndarray) -> MiEstimate:
    n = t_marg.shape[0]
    if not (np.all(np.isfinite(t_joint)) and np.all(np.isfinite(t_marg))):
        raise MiEstimationError("statistics network produced non-finite output")
    m = float(np.max(t_marg))
    shifted_log = math.log(float(np.mean(np.exp(t_marg - m))))
    # both terms relative to m, so constant statistics cancel exactly
    value = float(np.mean(t_joint - m)) - shifted_log
    return MiEstimate(value, float(np.mean(t_joint)), m + shifted_log, n)


def estimate_mi_batch(ze, zi, pi: np.ndarray, net: StatisticsNet) -> MiEstimate:
    if np.array_equal(np.asarray(pi), np.arange(len(pi))):
        warnings.warn("identity marginal pairing reuses joint samples; estimate is degenerate",
                      RuntimeWarning, stacklevel=2)
    with no_grad():
        tj, tm = statistics(net, ze, zi, pi)
    return summarize(tj.data, tm.data)


def mine_train_step(ze, zi, net: StatisticsNet, ema: EmaState, rng: np.random.Generator,
                    lr: float, opt: Adam | None = None) -> tuple[StatisticsNet, MiEstimate]:
    """One ascent step on the DV bound. The returned estimate is the exact batch value."""
    ze, zi = T.as_tensor(ze).detach(), T.as_tensor(zi).detach()
    n = ze.shape[0]
    pi = marginal_pairing(n, rng)
    opt = Adam(net.parameters(), lr=lr) if opt is None else opt
    with recording():
        tj, tm = statistics(net, ze, zi, pi)
        est = summarize(tj.data, tm.data)
        ema.update(math.exp(est.marginal_log_term))
        objective = corrected_objective(tj, tm, ema.ema)
        grads = backward(-objective, net.parameters())
    opt.step(grads, lr=lr)
    return net, est


class MineTrainer:
    """Owns a statistics network, its optimizer and the moving average."""

    def __init__(self, net: StatisticsNet, lr: float = 1e-3, ema_rate: float = 0.99):
        self.net = net
        self.lr = lr
        self.ema = EmaState(ema_rate)
        self.opt = Adam(net.parameters(), lr=lr)

    def step(self, ze, zi, rng: np.random.Generator) -> MiEstimate:
        _, est = mine_train_step(ze, zi, self.net, self.ema, rng, self.lr, self.opt)
        return est


@dataclass
class ConvergedMi:
    value: float          # clipped to [0, ln n]
    raw: float
    saturated: bool
    n: int
    trace: list[MiEstimate] = field(default_factory=list)


Sampler = Callable[[np.random.Generator], tuple[np.ndarray, np.ndarray]]


def estimate_mi_converged(sampler: Sampler, d_e: int, d_i: int, steps: int, lr: float,
                          rng: np.random.Generator, hidden: int = 128, ema_rate: float = 0.99,
                          eval_sampler: Sampler | None = None,
                          on_step: Callable[[int, MiEstimate], None] | None = None) -> ConvergedMi:
    """Train a fresh statistics network and average the last 10% of per-step estimates.

    With ``eval_sampler`` the per-step estimate is computed on its batches
    (held-out pairs) instead of the training batch.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    trainer = MineTrainer(StatisticsNet(d_e, d_i, rng, hidden), lr=lr, ema_rate=ema_rate)
    trace: list[MiEstimate] = []
    for step in range(steps):
        ze, zi = sampler(rng)
        try:
            est = trainer.step(ze, zi, rng)
            if eval_sampler is not None:
                ve, vi = eval_sampler(rng)
                est = estimate_mi_batch(ve, vi, marginal_pairing(len(ve), rng), trainer.net)
        except (MiEstimationError, FloatingPointError) as exc:
            raise MiEstimationError(f"MI estimation diverged at step {step}: {exc}") from exc
        if not math.isfinite(est.value):
            raise MiEstimationError(f"MI estimate is not finite at step {step}")
        trace.append(est)
        if on_step is not None:
            on_step(step, est)
    tail = trace[-max(1, steps // 10):]
    raw = float(np.mean([e.value for e in tail]))
    n = tail[-1].n
    cap = math.log(n)
    return ConvergedMi(min(max(raw, 0.0), cap), raw, raw >= cap, n, trace)


def gaussian_sampler(rho: float, dim: int, batch: int) -> Sampler:
    """Pairs with componentwise correlation ``rho``; true MI is -dim/2 * ln(1 - rho^2)."""
    def draw(rng: np.random.Generator):
        x = rng.standard_normal((batch, dim))
        e = rng.standard_normal((batch, dim))
        return x, rho * x + math.sqrt(1.0 - rho * rho) * e
    return draw


def gaussian_mi(rho: float, dim: int = 1) -> float:
    return -0.5 * dim * math.log(1.0 - rho * rho)
