"""Identity pretraining and the joint training loop.

Per step, with z_E from the expression branch and z_I from the frozen
identity encoder:

* Cls follows the gradient of the cross-entropy only;
* f_E and the LSTM follow ``L_CE + alpha * MI + beta * L_rec``;
* T ascends the MI bound (moving-average corrected);
* Dec follows the gradient of ``L_rec`` only.

The heads are evaluated on a detached copy of z_E, their z_E-gradients are
combined with the weights above, and the sum is pushed back through the
encoder once.
"""
from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .codec import accumulate_to_apex
from .mine import (EmaState, corrected_objective, dv_bound, marginal_pairing, statistics,
                   summarize)
from .model import (IdentityEncoder, ModelBundle, ModelDims, encode_expression, encode_identity,
                    frames_to_nchw, gop_residuals, loss_cross_entropy, loss_reconstruction,
                    module_rng)
from .nn import Linear
from .optim import Adam
from .synth import ManifestEntry, load_gop
from .tensor import Tensor, backward, backward_from, no_grad, recording

METRICS_HEADER = ["epoch", "loss_ce", "mi_hat", "loss_recon", "train_acc", "val_acc"]


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.1
    beta_start: float = 1.0
    beta_end: float = 0.0
    beta_epochs: int = 30
    lr: float = 1e-3
    lr_decay_epoch: int = 30
    lr_decay: float = 0.1
    mine_lr: float = 1e-3
    mine_inner_steps: int = 0   # extra T ascent steps per batch before the encoder sees T
    ema_rate: float = 0.99
    weight_decay: float = 1e-5
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    input_mode: str = "residual"
    disable_mi: bool = False
    disable_recon: bool = False
    d_e: int = 64
    d_i: int = 32
    val_fraction: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.input_mode not in ("residual", "residual+motion"):
            raise ConfigError(f"input_mode must be 'residual' or 'residual+motion', got {self.input_mode!r}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.beta_epochs < 1:
            raise ConfigError("beta_epochs must be >= 1")

    def beta(self, epoch: int) -> float:
        """Linear from beta_start to beta_end over beta_epochs, constant afterwards."""
        frac = min(1.0, epoch / self.beta_epochs)
        return self.beta_start + (self.beta_end - self.beta_start) * frac

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay if epoch >= self.lr_decay_epoch else self.lr

    @property
    def with_motion(self) -> bool:
        return self.input_mode == "residual+motion"


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    """``key = value`` lines, ``#`` comments; keys are TrainConfig fields."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}; valid keys: {', '.join(types)}")
        kind = types[key]
        try:
            if kind == "bool":
                if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(raw)
                values[key] = raw.lower() in ("true", "1", "yes")
            elif kind == "int":
                values[key] = int(raw)
            elif kind == "float":
                values[key] = float(raw)
            else:
                values[key] = raw
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad {kind} value {raw!r} for {key!r}") from None
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


# ---------------------------------------------------------------------------
# data


@dataclass
class SplitData:
    residuals: np.ndarray   # (n, steps, c_in, h, w)
    i_frames: np.ndarray    # (n, h, w, c) uint8
    apex: np.ndarray        # (n, h, w, c) in [0, 1]
    labels: np.ndarray
    identities: np.ndarray
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "SplitData":
        idx = np.asarray(idx)
        return SplitData(self.residuals[idx], self.i_frames[idx], self.apex[idx], self.labels[idx],
                         self.identities[idx], [self.entries[i] for i in idx])


def load_split(root, entries: list[ManifestEntry], with_motion: bool = False) -> SplitData:
    """Parse every GOP once; apex targets are decoded here and cached."""
    if not entries:
        raise ValueError("empty split")
    res, iframes, apex = [], [], []
    for e in entries:
        gop = load_gop(root, e)
        res.append(gop_residuals(gop, with_motion))
        iframes.append(gop.i_frame)
        apex.append(accumulate_to_apex(gop, e.apex_idx).astype(np.float64) / 255.0)
    return SplitData(np.stack(res), np.stack(iframes), np.stack(apex),
                     np.array([e.expression_label for e in entries]),
                     np.array([e.identity_label for e in entries]), list(entries))


def dims_for(data: SplitData, config: TrainConfig, n_classes: int) -> ModelDims:
    _, h, w, c = data.i_frames.shape
    return ModelDims(c, h, w, config.d_e, config.d_i, n_classes, config.with_motion)


# ---------------------------------------------------------------------------
# identity encoder


@dataclass
class PretrainResult:
    encoder: IdentityEncoder
    heldout_accuracy: float
    identities: list[int]


def stratified_holdout(groups: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask selecting ~``fraction`` of each group's members (at least one)."""
    mask = np.zeros(len(groups), dtype=bool)
    for g in np.unique(groups):
        members = np.flatnonzero(groups == g)
        k = max(1, int(round(fraction * len(members))))
        mask[rng.permutation(members)[:k]] = True
    return mask


def identity_pretrain(data: SplitData, dims: ModelDims, epochs: int = 30, seed: int = 0,
                      lr: float = 1e-3, batch_size: int = 32, min_accuracy: float = 0.6
                      ) -> PretrainResult:
    """Train f_I + a throwaway identity head on I frames, then freeze f_I."""
    idents = sorted(set(data.identities.tolist()))
    if len(idents) < 2:
        raise ValueError("identity pretraining needs at least 2 identities")
    target = np.searchsorted(idents, data.identities)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 31]))
    held = stratified_holdout(target, 0.2, rng)
    x_all = frames_to_nchw(data.i_frames)
    enc = IdentityEncoder(dims.channels, dims.height, dims.width, dims.d_i, module_rng(seed, "fI"))
    head = Linear(dims.d_i, len(idents), module_rng(seed, "fI.head"))
    params = enc.parameters() + head.parameters()
    opt = Adam(params, lr=lr)
    train_idx = np.flatnonzero(~held)
    for _ in range(epochs):
        order = rng.permutation(train_idx)
        for start in range(0, len(order), batch_size):
            b = order[start:start + batch_size]
            if len(b) < 2:
                continue
            with recording():
                probs = T.softmax(head(enc(Tensor(x_all[b]))))
                loss = loss_cross_entropy(probs, target[b])
                grads = backward(loss, params)
            opt.step(grads)
    with no_grad():
        pred = np.argmax(head(enc(Tensor(x_all[held]))).data, axis=1)
    acc = float(np.mean(pred == target[held]))
    if acc < min_accuracy:
        raise TrainingError(f"identity pretraining reached only {acc:.3f} held-out accuracy "
                            f"(< {min_accuracy}); dataset or config defect")
    enc.freeze()
    return PretrainResult(enc, acc, idents)


# ---------------------------------------------------------------------------
# joint training


@dataclass
class LossBreakdown:
    loss_ce: float
    mi_hat: float
    loss_recon: float
    correct: int
    n: int


@dataclass
class EpochMetrics:
    epoch: int
    loss_ce: float
    mi_hat: float
    loss_recon: float
    train_acc: float
    val_acc: float
    beta: float
    lr: float


class Optimizers:
    def __init__(self, bundle: ModelBundle, config: TrainConfig):
        wd = config.weight_decay
        self.encoder = Adam(bundle.encoder_parameters(), lr=config.lr, weight_decay=wd)
        self.cls = Adam(bundle.cls.parameters(), lr=config.lr, weight_decay=wd)
        self.dec = Adam(bundle.dec.parameters(), lr=config.lr, weight_decay=wd)
        self.T = Adam(bundle.T.parameters(), lr=config.mine_lr, weight_decay=wd)


def _check(name: str, value: float, step: int) -> None:
    if math.isnan(value):
        raise TrainingError(f"{name} is NaN at step {step}")


@dataclass
class StepGradients:
    encoder: dict
    cls: dict
    T: dict | None
    dec: dict | None
    breakdown: LossBreakdown


def step_gradients(bundle: ModelBundle, batch: SplitData, z_i: np.ndarray, alpha: float,
                   beta: float, ema: EmaState | None, pi: np.ndarray | None, recon: bool = True,
                   step: int = 0, refine=None) -> StepGradients:
    """Gradients for one step; ``pi=None`` skips the MI branch, ``recon=False`` the decoder.

    ``refine(ze)``, if given, runs before the MI branch and may update T on the
    batch's (detached) embeddings.
    """
    n = len(batch)
    with recording():
        ze = encode_expression(bundle, batch.residuals)
        ze_head = Tensor(ze.data, requires_grad=True)
        if refine is not None and pi is not None:
            refine(ze.data)

        probs = bundle.cls(ze_head)
        l_ce = loss_cross_entropy(probs, batch.labels)
        _check("loss_ce", l_ce.item(), step)
        g_ce = backward(l_ce, bundle.cls.parameters() + [ze_head])
        seed = g_ce[ze_head]

        mi_hat, g_mi = float("nan"), None
        if pi is not None:
            tj, tm = statistics(bundle.T, ze_head, z_i, pi)
            est = summarize(tj.data, tm.data)
            mi_hat = est.value
            _check("mi_hat", mi_hat, step)
            ema.update(math.exp(est.marginal_log_term))
            g_mi = backward(corrected_objective(tj, tm, ema.ema), bundle.T.parameters() + [ze_head])
            seed = seed + alpha * g_mi[ze_head]

        l_rec, g_rec = float("nan"), None
        if recon:
            rec = loss_reconstruction(bundle.dec(ze_head, z_i), batch.apex)
            l_rec = rec.item()
            _check("loss_recon", l_rec, step)
            g_rec = backward(rec, bundle.dec.parameters() + [ze_head])
            seed = seed + beta * g_rec[ze_head]

        g_enc = backward_from(ze, seed, bundle.encoder_parameters())
    correct = int(np.sum(np.argmax(probs.data, axis=1) == batch.labels))
    breakdown = LossBreakdown(l_ce.item(), mi_hat, l_rec, correct, n)
    g_t = None if g_mi is None else {p: g_mi[p] for p in bundle.T.parameters()}
    return StepGradients(g_enc, g_ce, g_t, g_rec, breakdown)


def joint_objective(bundle: ModelBundle, batch: SplitData, z_i: np.ndarray, alpha: float,
                    beta: float, pi: np.ndarray) -> Tensor:
    """``L_CE + alpha * DV + beta * L_rec`` as one scalar (batch DV, no moving average)."""
    ze = encode_expression(bundle, batch.residuals)
    l_ce = loss_cross_entropy(bundle.cls(ze), batch.labels)
    tj, tm = statistics(bundle.T, ze, z_i, pi)
    rec = loss_reconstruction(bundle.dec(ze, z_i), batch.apex)
    return l_ce + T.scale(dv_bound(tj, tm), alpha) + T.scale(rec, beta)


def train_step(bundle: ModelBundle, batch: SplitData, z_i: np.ndarray, config: TrainConfig,
               epoch: int, ema: EmaState, rng: np.random.Generator, opts: Optimizers,
               step: int = 0) -> LossBreakdown:
    n = len(batch)
    if n < 2:
        raise ValueError("train_step needs a batch of at least 2 sequences")
    alpha = 0.0 if config.disable_mi else config.alpha
    beta = 0.0 if config.disable_recon else config.beta(epoch)
    lr = config.lr_at(epoch)
    pi = None if config.disable_mi else marginal_pairing(n, rng)

    def refine(ze: np.ndarray) -> None:
        for _ in range(config.mine_inner_steps):
            tj, tm = statistics(bundle.T, ze, z_i, marginal_pairing(n, rng))
            ema.update(math.exp(summarize(tj.data, tm.data).marginal_log_term))
            g_t = backward(corrected_objective(tj, tm, ema.ema), bundle.T.parameters())
            opts.T.step({p: -v for p, v in g_t.items()})

    g = step_gradients(bundle, batch, z_i, alpha, beta, ema, pi, not config.disable_recon, step,
                       refine if config.mine_inner_steps else None)
    opts.encoder.step(g.encoder, lr=lr)
    opts.cls.step(g.cls, lr=lr)
    if g.T is not None:
        # T ascends the bound
        opts.T.step({p: -v for p, v in g.T.items()})
    if g.dec is not None:
        opts.dec.step(g.dec, lr=lr)
    return g.breakdown


def predict(bundle: ModelBundle, residuals: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Class probabilities for a stack of residual sequences."""
    out = []
    with no_grad():
        for start in range(0, len(residuals), batch_size):
            ze = encode_expression(bundle, residuals[start:start + batch_size])
            out.append(bundle.cls(ze).data)
    return np.concatenate(out)


def embed(bundle: ModelBundle, residuals: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(residuals), batch_size):
            out.append(encode_expression(bundle, residuals[start:start + batch_size]).data)
    return np.concatenate(out)


def _mean(values: list[float]) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class FitResult:
    bundle: ModelBundle
    metrics: list[EpochMetrics]
    best_epoch: int
    final: ModelBundle


def fit(config: TrainConfig, train: SplitData, identity: IdentityEncoder, n_classes: int,
        log=None) -> FitResult:
    """Full training run; returns the best-by-validation bundle (latest epoch on ties)."""
    dims = dims_for(train, config, n_classes)
    bundle = ModelBundle(dims, config.seed, identity=identity)
    split_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 11]))
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 12]))
    pair_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 13]))
    if config.val_fraction > 0:
        val_mask = stratified_holdout(train.labels * 100003 + train.identities, config.val_fraction,
                                      split_rng) if len(train) >= 20 else np.zeros(len(train), bool)
    else:
        val_mask = np.zeros(len(train), bool)
    fit_data = train.subset(np.flatnonzero(~val_mask))
    val_data = train.subset(np.flatnonzero(val_mask)) if val_mask.any() else None
    z_i = encode_identity(bundle, fit_data.i_frames)
    opts = Optimizers(bundle, config)
    ema = EmaState(config.ema_rate)
    metrics: list[EpochMetrics] = []
    best_state, best_acc, best_epoch = None, -1.0, -1
    step = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(fit_data))
        parts: list[LossBreakdown] = []
        for start in range(0, len(order), config.batch_size):
            b = order[start:start + config.batch_size]
            if len(b) < 2:
                continue
            parts.append(train_step(bundle, fit_data.subset(b), z_i[b], config, epoch, ema,
                                    pair_rng, opts, step))
            step += 1
        if val_data is not None:
            val_acc = float(np.mean(np.argmax(predict(bundle, val_data.residuals), axis=1)
                                    == val_data.labels))
        else:
            val_acc = float("nan")
        m = EpochMetrics(epoch, _mean([p.loss_ce for p in parts]), _mean([p.mi_hat for p in parts]),
                         _mean([p.loss_recon for p in parts]),
                         sum(p.correct for p in parts) / max(1, sum(p.n for p in parts)),
                         val_acc, config.beta(epoch) if not config.disable_recon else 0.0,
                         config.lr_at(epoch))
        metrics.append(m)
        if log is not None:
            log(m)
        score = val_acc if not math.isnan(val_acc) else m.train_acc
        if score >= best_acc:
            best_acc, best_epoch = score, epoch
            best_state = copy.deepcopy({k: p.data for k, p in bundle.named_parameters().items()})
    final = bundle
    best = copy.deepcopy(bundle)
    for k, p in best.named_parameters().items():
        p.data = best_state[k]
    return FitResult(best, metrics, best_epoch, final)


def write_metrics(path, metrics: list[EpochMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for m in metrics:
            w.writerow([m.epoch, repr(m.loss_ce), repr(m.mi_hat), repr(m.loss_recon),
                        repr(m.train_acc), repr(m.val_acc)])
