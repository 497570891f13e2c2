"""Adam, early stopping and the epoch loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .augment import AffineRanges, affine_augment, sample_affine
from .data_io import CtSlice, DataError, Fold, preprocess
from .losses import LossConfig, hybrid_loss_tensor
from .network import ModelParams, cpb_penalty, forward
from .tensor import GradTape, Tensor, add

log = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    def __init__(self, layer: str):
        super().__init__(f"non-finite gradient in {layer}")
        self.layer = layer


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``checkpoint`` holds the best parameters seen so far."""

    def __init__(self, epoch: int, checkpoint: ModelParams):
        super().__init__(f"training diverged at epoch {epoch}")
        self.epoch = epoch
        self.checkpoint = checkpoint


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState) -> OptimizerState:
    """Bias-corrected Adam update applied in place to ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        g = g.astype(np.float32, copy=False)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
    return state


@dataclass
class TrainSchedule:
    max_epochs: int = 100
    patience: int = 10
    batch_size: int = 4
    seed: int = 0
    augmentation: bool = True
    l2_coefficient: float = 1e-4
    learning_rate: float = 1e-3
    min_delta: float = 1e-6

    def validate(self) -> list[str]:
        problems = []
        if self.max_epochs < 1:
            problems.append("max_epochs: must be >= 1")
        if not 0 <= self.patience <= self.max_epochs:
            problems.append("patience: must lie in [0, max_epochs]")
        if self.batch_size < 1:
            problems.append("batch_size: must be >= 1")
        if self.l2_coefficient < 0:
            problems.append("l2_coefficient: must be >= 0")
        if self.learning_rate <= 0:
            problems.append("learning_rate: must be > 0")
        return problems


class EarlyStopping:
    """Stop once ``patience`` epochs pass without beating the best loss by ``min_delta``."""

    def __init__(self, patience: int, min_delta: float = 1e-6):
        self.patience = patience
        self.min_delta = min_delta
        self.best = float("inf")
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record ``loss`` for ``epoch``; return True when training should stop."""
        if loss < self.best - self.min_delta:
            self.best = loss
            self.best_epoch = epoch
            self.stale = 0
            return False
        self.stale += 1
        return self.stale >= self.patience


class EpochSampler:
    """Shuffled index order where every sample is consumed exactly once per epoch."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.uses = np.zeros(n, dtype=np.int64)

    def batches(self, batch_size: int):
        self.uses[:] = 0
        order = self.rng.permutation(self.n)
        for start in range(0, self.n, batch_size):
            idx = order[start:start + batch_size]
            self.uses[idx] += 1
            yield idx
        assert np.all(self.uses == 1)


@dataclass
class Example:
    image: np.ndarray  # (H, W) standardised
    mask: np.ndarray  # (H, W) uint8


def prepare_examples(slices: Sequence[CtSlice], normalized: bool = False) -> list[Example]:
    """Standardised image/mask pairs; slices without lung or known mask are dropped."""
    out = []
    for s in slices:
        if not s.has_lung:
            continue
        if s.infection_mask is not None:
            mask = s.infection_mask
        elif s.label is False:
            mask = np.zeros_like(s.lung_mask)
        else:
            continue
        img = s.image.astype(np.float32) if normalized else preprocess(s)[0]
        out.append(Example(img, mask.astype(np.uint8)))
    return out


def _stack(examples: Sequence[Example]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([e.image for e in examples])[:, None].astype(np.float32)
    y = np.stack([e.mask for e in examples])[:, None].astype(np.float64)
    return x, y


def train_step(params: ModelParams, x: np.ndarray, y: np.ndarray, loss_cfg: LossConfig,
               l2_coefficient: float, state: OptimizerState) -> float:
    with GradTape() as tape:
        probs = forward(params, Tensor(x), mode="train")
        loss = add(hybrid_loss_tensor(probs, y, loss_cfg), cpb_penalty(params, l2_coefficient))
    names = params.names()
    grads = tape.gradient(loss, params.trainable())
    adam_step(params, dict(zip(names, grads)), state)
    return float(loss.data)


def evaluate_loss(params: ModelParams, examples: Sequence[Example], loss_cfg: LossConfig,
                  batch_size: int) -> float:
    """Mean eval-mode hybrid loss over consecutive batches."""
    losses = []
    for start in range(0, len(examples), batch_size):
        x, y = _stack(examples[start:start + batch_size])
        probs = forward(params, Tensor(x), mode="eval")
        losses.append(float(hybrid_loss_tensor(probs, y, loss_cfg).data))
    return float(np.mean(losses))


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    elapsed: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.train_loss:.8f}\t{self.val_loss:.8f}\t{self.elapsed:.3f}"


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochLog]
    best_epoch: int
    epochs_run: int


def train(params: ModelParams, fold: Fold, schedule: TrainSchedule, data: Sequence[CtSlice],
          loss_cfg: LossConfig, extra_train: Sequence[CtSlice] = (), log_path=None,
          validate: Callable[[ModelParams, int], float] | None = None,
          ranges: AffineRanges = AffineRanges()) -> TrainResult:
    """Train on ``fold.train`` and keep the parameters of the best validation epoch.

    ``extra_train`` slices (synthetic composites, already standardised) join
    the training pool. ``validate`` overrides the validation loss, mainly for
    exercising the stopping rule.
    """
    train_ids, val_ids = set(fold.train), set(fold.val)
    train_ex = prepare_examples([s for s in data if s.patient_id in train_ids])
    train_ex += prepare_examples(extra_train, normalized=True)
    val_ex = prepare_examples([s for s in data if s.patient_id in val_ids])
    if not train_ex or not val_ex:
        raise DataError(f"empty partition: {len(train_ex)} training and {len(val_ex)} validation slices")

    rng = np.random.default_rng(schedule.seed)
    sampler = EpochSampler(len(train_ex), rng)
    state = OptimizerState(lr=schedule.learning_rate)
    stopper = EarlyStopping(schedule.patience, schedule.min_delta)
    best = params.snapshot()
    history: list[EpochLog] = []
    log_fh = open(log_path, "w") if log_path else None
    if log_fh:
        log_fh.write("epoch\ttrain_loss\tval_loss\telapsed_s\n")
    t0 = time.perf_counter()
    epoch = 0
    try:
        for epoch in range(1, schedule.max_epochs + 1):
            batch_losses = []
            for idx in sampler.batches(schedule.batch_size):
                batch = [train_ex[i] for i in idx]
                if schedule.augmentation:
                    batch = [_augmented(e, rng, ranges) for e in batch]
                x, y = _stack(batch)
                batch_losses.append(train_step(params, x, y, loss_cfg, schedule.l2_coefficient, state))
            train_loss = float(np.mean(batch_losses))
            val_loss = validate(params, epoch) if validate else evaluate_loss(params, val_ex, loss_cfg, schedule.batch_size)
            if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
                raise TrainingDiverged(epoch, best)
            entry = EpochLog(epoch, train_loss, val_loss, time.perf_counter() - t0)
            history.append(entry)
            if log_fh:
                log_fh.write(entry.line() + "\n")
            log.info("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
            stop = stopper.update(epoch, val_loss)
            if stopper.best_epoch == epoch:
                best = params.snapshot()
            if stop:
                break
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(best, history, stopper.best_epoch, epoch)


def _augmented(e: Example, rng: np.random.Generator, ranges: AffineRanges) -> Example:
    img, mask = affine_augment(e.image, e.mask, sample_affine(rng, e.image.shape, ranges))
    return Example(img, mask)


@dataclass
class ProbeResult:
    dsc: float
    losses: list[float]


def mean_dsc(params: ModelParams, examples: Sequence[Example], mode: str = "eval",
             threshold: float = metrics.BINARIZE_THRESHOLD) -> float:
    x, y = _stack(examples)
    probs = forward(params, Tensor(x), mode=mode).data[:, 0]
    scores = [metrics.dsc(metrics.confusion(metrics.binarize(p, threshold), m[0] > 0.5))
              for p, m in zip(probs, y)]
    return float(np.mean(scores))


def overfit_probe(params: ModelParams, tiny_set: Sequence[Example], steps: int = 300,
                  loss_cfg: LossConfig | None = None, learning_rate: float = 1e-3,
                  l2_coefficient: float = 1e-4) -> ProbeResult:
    """Fit a handful of pairs in one batch without augmentation; report in-sample DSC."""
    if len(tiny_set) > 8:
        raise ValueError("overfit probe takes at most 8 pairs")
    if any(not e.mask.any() for e in tiny_set):
        raise ValueError("overfit probe needs non-empty masks")
    loss_cfg = loss_cfg or LossConfig()
    state = OptimizerState(lr=learning_rate)
    x, y = _stack(tiny_set)
    losses = [train_step(params, x, y, loss_cfg, l2_coefficient, state) for _ in range(steps)]
    return ProbeResult(mean_dsc(params, tiny_set), losses)
