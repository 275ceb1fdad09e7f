"""
Losses, AdamW, learning-rate schedules, the progressive-unfreezing
controller and the epoch loop with early stopping.
"""
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

import autodiff as ad
from augment import AugmentConfig, augment
from autodiff import Tensor
from errors import Divergence, EmptySplit, InvalidConfig, MissingGrad, OutOfRange, ShapeMismatch
from metrics import dice
from network import ParameterSet, UNet3D, binarize, set_trainable, tag_sort_key
from volume_io import Mask3, Volume3

logger = logging.getLogger(__name__)


# --- configuration ---------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    eps: float = 1e-8

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidConfig("betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise InvalidConfig("weight decay must be non-negative")


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "warmup_cosine"
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    warmup_epochs: int = 50
    horizon_epochs: int = 1000
    # first epoch of every segment after the first (stagewise only)
    restart_boundaries: Tuple[int, ...] = ()
    restart_decay: float = 10.0
    # stagewise segments decay to segment lr_max times this ratio
    segment_min_ratio: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "restart_boundaries", tuple(int(b) for b in self.restart_boundaries))
        if self.kind not in ("warmup_cosine", "stagewise_cosine"):
            raise InvalidConfig(f"unknown schedule kind {self.kind!r}")
        if self.lr_min > self.lr_max:
            raise InvalidConfig("lr_min must not exceed lr_max")
        if self.horizon_epochs < 1 or self.warmup_epochs < 0:
            raise InvalidConfig("horizon must be positive and warmup non-negative")
        bounds = (0,) + self.restart_boundaries + (self.horizon_epochs,)
        if any(b <= a for a, b in zip(bounds, bounds[1:])):
            raise InvalidConfig(f"restart boundaries must be strictly increasing inside (0, {self.horizon_epochs})")
        lengths = [b - a for a, b in zip(bounds, bounds[1:])]
        check = lengths if self.kind == "stagewise_cosine" else lengths[:1]
        if any(self.warmup_epochs >= n for n in check):
            raise InvalidConfig(f"warmup of {self.warmup_epochs} epochs does not fit segments of {lengths}")

    @classmethod
    def stage1(cls, horizon_epochs: int = 1000, warmup_epochs: int = 50) -> "ScheduleConfig":
        return cls("warmup_cosine", 1e-3, 1e-6, warmup_epochs, horizon_epochs)

    @classmethod
    def stage2(cls, boundaries: Sequence[int] = (61, 181), horizon_epochs: int = 1000,
               warmup_epochs: int = 10) -> "ScheduleConfig":
        return cls("stagewise_cosine", 1e-3, 1e-6, warmup_epochs, horizon_epochs, tuple(boundaries))

    def segments(self) -> List[Tuple[int, int]]:
        bounds = (0,) + (self.restart_boundaries if self.kind == "stagewise_cosine" else ()) + (self.horizon_epochs,)
        return list(zip(bounds, bounds[1:]))


@dataclass(frozen=True)
class UnfreezeSchedule:
    step_a_end: int = 60
    step_b_end: int = 180
    # encoder stages 1..cutoff are shallow, the rest deep
    deep_stage_cutoff: int = 3
    max_epochs: int = 1000
    n_stages: int = 7

    def __post_init__(self):
        if not 0 < self.step_a_end < self.step_b_end < self.max_epochs:
            raise InvalidConfig("unfreeze boundaries need 0 < step_a_end < step_b_end < max_epochs")
        if not 0 <= self.deep_stage_cutoff <= self.n_stages:
            raise InvalidConfig("deep_stage_cutoff must index an encoder stage")

    def scaled(self, max_epochs: int) -> "UnfreezeSchedule":
        """Move both step boundaries proportionally to a new epoch budget (60/180/1000 -> 6/18/100)."""
        a = max(1, round(self.step_a_end * max_epochs / self.max_epochs))
        b = max(a + 1, round(self.step_b_end * max_epochs / self.max_epochs))
        return dataclasses.replace(self, step_a_end=a, step_b_end=b, max_epochs=max_epochs)

    def restart_boundaries(self) -> Tuple[int, int]:
        """First epochs of Step B and Step C, for aligning scheduler restarts."""
        return self.step_a_end + 1, self.step_b_end + 1


@dataclass(frozen=True)
class LossConfig:
    dice_eps: float = 1e-5
    focal_gamma: float = 2.0
    focal_alpha: float = 0.5
    focal_weight: float = 1.0
    prob_clamp: float = 1e-7

    def __post_init__(self):
        if self.focal_gamma < 0 or not 0 <= self.focal_alpha <= 1:
            raise InvalidConfig("focal loss needs gamma >= 0 and alpha in [0, 1]")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    max_epochs: int = 1000
    early_stop_patience: int = 50
    # absolute validation-dice gain that counts as improvement
    min_delta: float = 1e-4
    # patience is only counted from this epoch on
    early_stop_start: int = 0
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    record_wall_clock: bool = True
    threshold: float = 0.5

    def __post_init__(self):
        if self.batch_size < 1 or self.early_stop_patience < 1 or self.max_epochs < 1:
            raise InvalidConfig("batch_size, patience and max_epochs must be at least 1")


@dataclass
class Sample:
    case_id: str
    image: Volume3
    label: Mask3


# --- loss ------------------------------------------------------------------

def dice_focal_loss(logits: Tensor, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """Soft Dice over the whole batch plus weighted focal cross-entropy on sigmoid probabilities."""
    g = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if g.shape != logits.shape:
        raise ShapeMismatch(f"logits {logits.shape} and target {g.shape} differ")
    z = logits.data.astype(np.float64)
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    n = p.size
    eps, gamma, alpha = cfg.dice_eps, cfg.focal_gamma, cfg.focal_alpha

    inter, psum, gsum = (p * g).sum(), p.sum(), g.sum()
    denom = psum + gsum + eps
    l_dice = 1.0 - (2.0 * inter + eps) / denom

    pc = np.clip(p, cfg.prob_clamp, 1.0 - cfg.prob_clamp)
    inside = (p > cfg.prob_clamp) & (p < 1.0 - cfg.prob_clamp)
    log_p, log_q = np.log(pc), np.log1p(-pc)
    pos = alpha * g * (1.0 - pc) ** gamma * log_p
    neg = (1.0 - alpha) * (1.0 - g) * pc ** gamma * log_q
    l_focal = -(pos + neg).mean()

    value = l_dice + cfg.focal_weight * l_focal

    def _backward(out_grad):
        d_dice = -(2.0 * g * denom - (2.0 * inter + eps)) / denom ** 2
        # d/dx of x**gamma, zero for gamma == 0
        dpow_q = gamma * (1.0 - pc) ** (gamma - 1.0) if gamma > 0 else 0.0
        dpow_p = gamma * pc ** (gamma - 1.0) if gamma > 0 else 0.0
        d_pos = alpha * g * (-dpow_q * log_p + (1.0 - pc) ** gamma / pc)
        d_neg = (1.0 - alpha) * (1.0 - g) * (dpow_p * log_q - pc ** gamma / (1.0 - pc))
        d_focal = -(d_pos + d_neg) / n * inside
        dp = d_dice + cfg.focal_weight * d_focal
        dz = float(out_grad) * dp * p * (1.0 - p)
        return (dz.astype(logits.dtype),)

    return Tensor._from_op(np.asarray(value, dtype=logits.dtype), (logits,), _backward, "dice_focal_loss")


# --- optimizer -------------------------------------------------------------

@dataclass
class MomentState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adamw_update(theta: np.ndarray, grad: np.ndarray, state: MomentState, lr: float,
                 cfg: OptimizerConfig) -> np.ndarray:
    """One decoupled-weight-decay Adam step; advances ``state`` and returns the new value."""
    state.t += 1
    state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    m_hat = state.m / (1.0 - cfg.beta1 ** state.t)
    v_hat = state.v / (1.0 - cfg.beta2 ** state.t)
    return theta - lr * (m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * theta)


class AdamW:
    """AdamW over a ParameterSet; frozen parameters and their moments are left alone.

    A parameter that becomes trainable again restarts from zero moments and t = 0.
    """

    def __init__(self, params: ParameterSet, cfg: OptimizerConfig = OptimizerConfig()):
        self.params = params
        self.cfg = cfg
        self.state: Dict[str, MomentState] = {}
        self._frozen = {p.name for p in params if not p.trainable}

    def step(self, lr: float) -> None:
        for p in self.params:
            if not p.trainable:
                self._frozen.add(p.name)
                continue
            if p.name in self._frozen:
                self._frozen.discard(p.name)
                self.state.pop(p.name, None)
            grad = p.tensor.grad
            if grad is None:
                raise MissingGrad(f"trainable parameter {p.name} has no gradient")
            st = self.state.get(p.name)
            if st is None:
                st = self.state[p.name] = MomentState(np.zeros_like(p.data), np.zeros_like(p.data))
            p.tensor.data = adamw_update(p.data, grad, st, lr, self.cfg).astype(p.data.dtype)


# --- schedules -------------------------------------------------------------

def _warmup_cosine(e: int, length: int, warmup: int, lr_max: float, lr_min: float) -> float:
    if e < warmup:
        return lr_max * ((e + 1) / warmup)
    span = length - 1 - warmup
    if span <= 0:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * (e - warmup) / span))


def lr_at(cfg: ScheduleConfig, epoch: int) -> float:
    """Learning rate for an epoch: linear warmup then cosine decay, restarted per segment."""
    if not 0 <= epoch < cfg.horizon_epochs:
        raise OutOfRange(f"epoch {epoch} outside schedule horizon [0, {cfg.horizon_epochs})")
    if cfg.kind == "warmup_cosine":
        return _warmup_cosine(epoch, cfg.horizon_epochs, cfg.warmup_epochs, cfg.lr_max, cfg.lr_min)
    for k, (start, end) in enumerate(cfg.segments()):
        if start <= epoch < end:
            peak = cfg.lr_max / cfg.restart_decay ** k
            return _warmup_cosine(epoch - start, end - start, cfg.warmup_epochs, peak, peak * cfg.segment_min_ratio)
    raise OutOfRange(f"epoch {epoch} falls in no schedule segment")


# --- progressive unfreezing ------------------------------------------------

def unfreeze_state(sched: UnfreezeSchedule, epoch: int) -> FrozenSet[str]:
    """Trainable stage tags: Step A head/decoder/bottleneck, Step B plus deep encoder, Step C all."""
    if not 0 <= epoch < sched.max_epochs:
        raise OutOfRange(f"epoch {epoch} outside [0, {sched.max_epochs})")
    n = sched.n_stages
    tags = {"head", "bottleneck"} | {f"dec.stage{k}" for k in range(1, n)}
    if epoch > sched.step_a_end:
        tags |= {f"enc.stage{k}" for k in range(sched.deep_stage_cutoff + 1, n + 1)}
    if epoch > sched.step_b_end:
        tags |= {f"enc.stage{k}" for k in range(1, n + 1)}
    return frozenset(tags)


def apply_trainable_tags(params: ParameterSet, tags) -> None:
    present = set(params.tags())
    set_trainable(params, present, False)
    set_trainable(params, present & set(tags), True)


# --- epoch loop ------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    val_dice: float
    trainable_tags: List[str]
    wall_clock_s: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainResult:
    best_params: ParameterSet
    best_epoch: int
    best_val_dice: float
    log: List[EpochRecord]
    stopped_early: bool


def subsample_cases(samples: Sequence[Sample], n: int, seed: int) -> List[Sample]:
    """A seeded subset of ``n`` cases, kept in their original order."""
    if not 1 <= n <= len(samples):
        raise InvalidConfig(f"cannot draw {n} cases from {len(samples)}")
    keep = np.sort(np.random.default_rng(seed).choice(len(samples), size=n, replace=False))
    return [samples[i] for i in keep]


def validation_dice(model: UNet3D, samples: Sequence[Sample], threshold: float = 0.5) -> float:
    scores = []
    for s in samples:
        pred = binarize(model.predict(s.image.data), threshold)
        scores.append(dice(Mask3(pred, s.label.spacing), s.label))
    return float(np.mean(scores))


def _batches(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start:start + size]


def train(model: UNet3D, train_samples: Sequence[Sample], val_samples: Sequence[Sample],
          cfg: TrainConfig, schedule: ScheduleConfig, loss_cfg: LossConfig = LossConfig(),
          optim_cfg: OptimizerConfig = OptimizerConfig(), unfreeze: Optional[UnfreezeSchedule] = None,
          log_path=None, on_step: Optional[Callable[[int, int, ParameterSet], None]] = None) -> TrainResult:
    """Epoch loop: augment, forward, DiceFocal, backward, AdamW at lr_at(epoch), validate, early-stop."""
    if not train_samples:
        raise EmptySplit("training split is empty")
    if not val_samples:
        raise EmptySplit("validation split is empty")
    shared = {s.case_id for s in train_samples} & {s.case_id for s in val_samples}
    if shared:
        raise InvalidConfig(f"train and validation share cases: {sorted(shared)[:3]}")
    if schedule.horizon_epochs < cfg.max_epochs:
        raise OutOfRange(f"schedule horizon {schedule.horizon_epochs} shorter than max_epochs {cfg.max_epochs}")
    if unfreeze is not None:
        unfreeze = dataclasses.replace(unfreeze, n_stages=model.spec.n_stages)
    # progressive runs only count patience once every group is trainable
    patience_from = max(cfg.early_stop_start, unfreeze.step_b_end + 1) if unfreeze is not None else cfg.early_stop_start

    params = model.params
    dtype = next(iter(params)).data.dtype
    rng = np.random.default_rng(cfg.seed)
    references = [s.image.data for s in train_samples]
    optimizer = AdamW(params, optim_cfg)
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("")

    if unfreeze is None:
        apply_trainable_tags(params, params.tags())
    active: Optional[FrozenSet[str]] = None

    logger.info("Training on %d cases for up to %d epochs (%d validation cases)...",
                len(train_samples), cfg.max_epochs, len(val_samples))
    log: List[EpochRecord] = []
    best_dice, best_epoch, best_params = -math.inf, -1, params.copy()
    bad_epochs, stopped_early = 0, False

    for epoch in range(cfg.max_epochs):
        started = time.perf_counter()
        if unfreeze is not None:
            tags = unfreeze_state(unfreeze, epoch)
            if tags != active:
                apply_trainable_tags(params, tags)
                active = tags
                logger.info("  Epoch %d/%d: trainable groups %s", epoch + 1, cfg.max_epochs,
                            ", ".join(sorted(params.trainable_tags(), key=tag_sort_key)))
        lr = lr_at(schedule, epoch)

        losses = []
        for step, idx in enumerate(_batches(rng.permutation(len(train_samples)), cfg.batch_size)):
            images, masks = [], []
            for i in idx:
                v, m = augment(train_samples[i].image, train_samples[i].label, cfg.augment, rng, references)
                images.append(v.data)
                masks.append(m.data)
            x = Tensor(np.stack(images)[:, None], dtype=dtype)
            y = np.stack(masks)[:, None]

            params.zero_grad()
            loss = dice_focal_loss(model(x), y, loss_cfg)
            if not np.isfinite(loss.data).all():
                raise Divergence(f"non-finite loss at epoch {epoch}, step {step}")
            ad.backward(loss)
            optimizer.step(lr)
            losses.append(loss.item())
            if on_step is not None:
                on_step(epoch, step, params)

        val = validation_dice(model, val_samples, cfg.threshold)
        improved = val > best_dice + cfg.min_delta
        if val > best_dice:
            best_dice, best_epoch, best_params = val, epoch, params.copy()
        if epoch >= patience_from:
            bad_epochs = 0 if improved else bad_epochs + 1

        record = EpochRecord(
            epoch=epoch,
            loss=float(np.mean(losses)),
            lr=lr,
            val_dice=val,
            trainable_tags=sorted(params.trainable_tags(), key=tag_sort_key),
            wall_clock_s=round(time.perf_counter() - started, 3) if cfg.record_wall_clock else 0.0,
        )
        log.append(record)
        if log_path is not None:
            with open(log_path, "a") as f:
                f.write(json.dumps(record.to_dict()) + "\n")
        logger.info("  Epoch %d/%d: loss %.4f, lr %.2e, val Dice %.4f", epoch + 1, cfg.max_epochs, record.loss, lr, val)

        if bad_epochs >= cfg.early_stop_patience:
            stopped_early = True
            logger.info("  Early stop after %d/%d epochs, best val Dice %.4f at epoch %d",
                        epoch + 1, cfg.max_epochs, best_dice, best_epoch)
            break

    return TrainResult(best_params, best_epoch, best_dice, log, stopped_early)
