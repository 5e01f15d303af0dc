"""Lower-bound objective, gradient estimators, and the epoch loop.

The objective for one pair (x, y) is

    E_{p(s|x)}[log p(y|s)] + w * log p(x)

estimated with a single posterior tree sample s' and a self-critical
baseline at the Viterbi tree.  One surrogate scalar carries all three
gradient paths: the reward term trains the transducer by backprop
through the inside pass on s', the (detached) advantage times the
sampled tree's log-conditional trains the parser, and log p(x) is the
monolingual regularizer.

``training_step`` only accumulates into gradient slots; ``apply_update``
is the sole parameter mutator.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .model import LatentQcfgModel
from .numerics import gradients, zero_gradients
from .qcfg import QcfgError


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    """A step produced a non-finite loss; no gradients were accumulated."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 4              # effective size, via gradient accumulation
    learning_rate: float = 5e-4
    beta1: float = 0.75
    beta2: float = 0.999
    weight_decay: float = 1e-5
    clip_norm: float = 3.0
    regularizer_weight: float = 1.0
    seed: int = 0
    num_restarts: int = 1
    validation_metric: str = "exact_match"   # or "surrogate"
    decode_samples: int = 10
    max_validation_examples: Optional[int] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainingError("epochs must be >= 1")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.validation_metric not in ("exact_match", "surrogate"):
            raise TrainingError(f"unknown validation metric {self.validation_metric!r}")


@dataclass
class StepStats:
    surrogate_loss: float
    advantage: float
    log_px: float
    reward: float


def training_step(
    model: LatentQcfgModel,
    x: Sequence[int],
    y: Sequence[int],
    rng: np.random.Generator,
    regularizer_weight: float = 1.0,
) -> StepStats:
    """Accumulate gradients for one pair; raises on non-finite loss."""
    if len(y) < 2:
        raise TrainingError("target length must be >= 2 (replicate singletons upstream)")
    sampled_tree, log_cond, log_px = model.sample_source_tree(x, rng)
    reward = model.target_logprob(sampled_tree, y)
    map_tree = model.map_source_tree(x)
    with torch.no_grad():
        baseline = model.target_logprob(map_tree, y)
    advantage = float(reward.detach() - baseline)
    surrogate = -(reward + advantage * log_cond + regularizer_weight * log_px)
    if not torch.isfinite(surrogate):
        raise NonFiniteLossError(
            f"non-finite surrogate loss {surrogate.item()} "
            f"(reward {reward.item():.4g}, advantage {advantage:.4g}, log_px {log_px.item():.4g})"
        )
    gradients(surrogate, list(model.parameters()))
    return StepStats(
        surrogate_loss=float(surrogate.detach()),
        advantage=advantage,
        log_px=float(log_px.detach()),
        reward=float(reward.detach()),
    )


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    # Decoupled weight decay realizes the L2 penalty independent of Adam's
    # adaptive scaling.
    return torch.optim.AdamW(
        model.parameters(),
        lr=config.learning_rate,
        betas=(config.beta1, config.beta2),
        weight_decay=config.weight_decay,
    )


def apply_update(model: torch.nn.Module, optimizer: torch.optim.Optimizer, clip_norm: float = 3.0) -> float:
    """Clip, step, zero; returns the pre-clip gradient norm."""
    norm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), clip_norm))
    optimizer.step()
    zero_gradients(model.parameters())
    return norm


@dataclass
class EpochRecord:
    epoch: int
    examples: int
    mean_loss: float
    mean_advantage: float
    validation: float
    skipped_steps: int = 0


@dataclass
class TrainResult:
    best_state: dict
    best_metric: float
    best_epoch: int
    history: list[EpochRecord] = field(default_factory=list)
    seed: int = 0
    best_optimizer_state: Optional[dict] = None


LogFn = Callable[[str], None]


def _validate(model, validation, config: TrainConfig, rng: np.random.Generator) -> float:
    from .inference import DecodeConfig, DecodeError, decode, exact_match

    pairs = validation
    if config.max_validation_examples is not None:
        pairs = pairs[: config.max_validation_examples]
    if config.validation_metric == "exact_match":
        dec = DecodeConfig(num_samples=config.decode_samples)
        preds, refs = [], []
        for x, y in pairs:
            try:
                result = decode(model, x, dec, rng)
                preds.append(result.best_yield)
            except (DecodeError, QcfgError):
                preds.append(())
            refs.append(tuple(y))
        return exact_match(preds, refs)
    total = 0.0
    with torch.no_grad():
        for x, y in pairs:
            tree = model.map_source_tree(x)
            total += float(model.target_logprob(tree, y))
    # Higher is better for every metric; surrogate uses mean log-likelihood
    # of the target under the MAP tree.
    return total / max(1, len(pairs))


def train_single_seed(
    model: LatentQcfgModel,
    train_pairs: Sequence[tuple],
    validation_pairs: Sequence[tuple],
    config: TrainConfig,
    log: Optional[LogFn] = None,
) -> TrainResult:
    if not train_pairs:
        raise TrainingError("empty training set")
    if not validation_pairs:
        raise TrainingError("empty validation set")
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    optimizer = make_optimizer(model, config)
    zero_gradients(model.parameters())
    best_state, best_metric, best_epoch = None, -math.inf, -1
    best_optim: Optional[dict] = None
    history: list[EpochRecord] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_pairs))
        losses, advantages, skipped, accumulated = [], [], 0, 0
        for idx in order:
            x, y = train_pairs[idx]
            try:
                stats = training_step(model, x, y, rng, config.regularizer_weight)
            except NonFiniteLossError as exc:
                skipped += 1
                zero_gradients(model.parameters())
                accumulated = 0
                if log:
                    log(f"event=skipped_step epoch={epoch} reason={exc}")
                continue
            losses.append(stats.surrogate_loss)
            advantages.append(stats.advantage)
            accumulated += 1
            if accumulated >= config.batch_size:
                apply_update(model, optimizer, config.clip_norm)
                accumulated = 0
        if accumulated:
            apply_update(model, optimizer, config.clip_norm)
        metric = _validate(model, validation_pairs, config, np.random.default_rng(config.seed))
        record = EpochRecord(
            epoch=epoch,
            examples=len(losses),
            mean_loss=float(np.mean(losses)) if losses else math.nan,
            mean_advantage=float(np.mean(advantages)) if advantages else math.nan,
            validation=metric,
            skipped_steps=skipped,
        )
        history.append(record)
        if log:
            log(
                f"epoch={epoch} examples={record.examples} loss={record.mean_loss:.4f} "
                f"advantage={record.mean_advantage:.4f} validation={metric:.4f} skipped={skipped}"
            )
        if metric > best_metric:
            best_metric, best_epoch = metric, epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            best_optim = copy.deepcopy(optimizer.state_dict())
    if best_state is None:
        raise TrainingError("no epoch produced a finite validation metric")
    return TrainResult(best_state, best_metric, best_epoch, history, config.seed, best_optim)


def train(
    model_factory: Callable[[int], LatentQcfgModel],
    train_pairs: Sequence[tuple],
    validation_pairs: Sequence[tuple],
    config: TrainConfig,
    log: Optional[LogFn] = None,
) -> tuple[LatentQcfgModel, TrainResult]:
    """Best result across ``num_restarts`` seed restarts."""
    best: Optional[TrainResult] = None
    best_model: Optional[LatentQcfgModel] = None
    failures: list[str] = []
    for i in range(config.num_restarts):
        seed = config.seed + i
        run_config = replace(config, seed=seed)
        model = model_factory(seed)
        try:
            result = train_single_seed(model, train_pairs, validation_pairs, run_config, log)
        except TrainingError as exc:
            failures.append(f"seed {seed}: {exc}")
            continue
        if log:
            log(f"event=restart_done seed={seed} best={result.best_metric:.4f} epoch={result.best_epoch}")
        if best is None or result.best_metric > best.best_metric:
            best, best_model = result, model
    if best is None:
        raise TrainingError("all seed restarts failed: " + "; ".join(failures))
    best_model.load_state_dict(best.best_state)
    return best_model, best
