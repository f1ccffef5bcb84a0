"""Adam training loop with a warmup/decay schedule and two-phase curriculum.

Phase one trains on the supervised endpoint loss alone; after the configured
boundary the reconstruction term switches on (with its balance weight) and,
unless a fixed rate is forced, the learning rate drops to the fine-tune value.
Every iteration appends ``iter<TAB>lr<TAB>loss[<TAB>val_epe]`` to the metrics
log.  All randomness is derived from the config seed, so reruns reproduce the
loss curve bit for bit.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import AugmentPolicy, SamplePair, augment_pair
from .evaluator import mean_epe
from .flow_ops import total_loss
from .model import (ModelConfig, ModelParams, ModelOutput, forward,
                    init_model_params, to_model_input, write_model_config)
from .tensor import Tape, Tensor, default_dtype

__all__ = [
    "LrSchedule", "lr_at", "TrainConfig", "OptimizerState", "adam_step",
    "NonFiniteGradient", "NonFiniteLoss", "train", "TrainResult",
    "validation_split", "pool_flow", "pool_mask", "zero_flow_baseline",
]


class NonFiniteGradient(RuntimeError):
    """A parameter gradient came back NaN/inf; the step is rejected."""

    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


class NonFiniteLoss(RuntimeError):
    """The training loss became NaN/inf; training aborts."""

    def __init__(self, iteration: int):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class LrSchedule:
    """Warmup at a low rate, a long plateau, then periodic halving.

    All breakpoints scale by ``scale`` so the same shape runs at desk size
    (scale=0.01 turns 10k/300k/100k into 100/3000/1000).
    """

    warmup_lr: float = 1e-6
    warmup_iters: int = 10_000
    main_lr: float = 1e-4
    main_iters: int = 300_000
    decay_every: int = 100_000
    decay_factor: float = 0.5
    scale: float = 1.0


def lr_at(iteration: int, schedule: LrSchedule = LrSchedule()) -> float:
    """Learning rate at an iteration.

    Warmup holds ``warmup_lr`` for the first warmup_iters; the plateau holds
    ``main_lr`` until one decay period past the end of the main block (so with
    defaults: 1e-6 below 10k, 1e-4 through 410k, then halved every 100k).
    """
    if iteration < 0:
        raise ValueError("lr_at: iteration must be >= 0")
    s = schedule.scale
    warm = int(round(schedule.warmup_iters * s))
    main_end = warm + int(round(schedule.main_iters * s))
    step = max(1, int(round(schedule.decay_every * s)))
    if iteration < warm:
        return schedule.warmup_lr
    halvings = max(0, (iteration - main_end) // step)
    return schedule.main_lr * schedule.decay_factor ** halvings


@dataclass
class OptimizerState:
    """Per-parameter Adam moments plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "OptimizerState":
        return cls(m={n: np.zeros_like(t.data) for n, t in params.items()},
                   v={n: np.zeros_like(t.data) for n, t in params.items()})


def adam_step(params: ModelParams, grads: Mapping[str, np.ndarray],
              state: OptimizerState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place.

    A non-finite gradient rejects the whole step before any state changes,
    raising ``NonFiniteGradient`` with the offending parameter's name.
    """
    for name, _ in params.items():
        g = grads.get(name)
        if g is None:
            raise ValueError(f"adam_step: no gradient supplied for parameter {name!r}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient(name)
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, tensor in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        tensor.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@dataclass
class TrainConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    max_iters: int = 1000
    seed: int = 0
    checkpoint_every: int = 500
    eval_every: int = 250
    schedule: LrSchedule = field(default_factory=lambda: LrSchedule(scale=0.01))
    fixed_lr: float | None = None          # overrides the schedule in both phases
    phase2_start: int | None = None        # iteration where the reconstruction term starts
    phase2_lr: float = 1.25e-5
    lambda_rec: float = 0.005
    loss_eps: float = 1e-8
    augment: AugmentPolicy | None = None
    val_fraction: float = 0.05

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("TrainConfig: beta1 and beta2 must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("TrainConfig: batch_size must be >= 1")
        if self.lambda_rec < 0:
            raise ValueError("TrainConfig: lambda_rec must be >= 0")


def validation_split(n: int, seed: int, fraction: float = 0.05) -> tuple[list[int], list[int]]:
    """Seed-stable hashing split of sample indices into (train, validation)."""
    if n < 2:
        return list(range(n)), []

    def unit(i: int) -> float:
        digest = hashlib.sha1(f"{seed}:{i}".encode()).digest()
        return int.from_bytes(digest[:8], "little") / 2.0 ** 64

    units = [unit(i) for i in range(n)]
    val = [i for i in range(n) if units[i] < fraction]
    if not val:
        val = [int(np.argmin(units))]
    train = [i for i in range(n) if i not in set(val)]
    return train, val


def pool_flow(flow: np.ndarray, stride: int) -> np.ndarray:
    """Average-pool a (B, 2, H, W) flow and rescale vectors to the new grid."""
    b, c, h, w = flow.shape
    pooled = flow.reshape(b, c, h // stride, stride, w // stride, stride).mean(axis=(3, 5))
    return pooled / stride


def pool_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    """A pooled cell is valid only when every covered pixel is valid."""
    b, c, h, w = mask.shape
    return mask.reshape(b, c, h // stride, stride, w // stride, stride).min(axis=(3, 5))


def zero_flow_baseline(pairs: Sequence[SamplePair]) -> float:
    """Mean EPE of always predicting zero flow: the mean ground-truth magnitude."""
    vals = []
    for p in pairs:
        mag = np.hypot(p.flow[0], p.flow[1])
        mask = p.valid > 0.5 if p.valid is not None else np.ones(mag.shape, bool)
        vals.append(float(mag[mask].mean()))
    return float(np.mean(vals))


@dataclass
class TrainResult:
    params: ModelParams
    history: list[tuple[int, float, float, float | None]]  # iter, lr, loss, val_epe
    final_val_epe: float | None
    checkpoint_path: Path | None
    log_path: Path | None
    skipped_steps: int = 0


def _batch_arrays(batch: list[SamplePair], dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    ia = np.stack([to_model_input(p.image_a) for p in batch]).astype(dtype)
    ib = np.stack([to_model_input(p.image_b) for p in batch]).astype(dtype)
    gt = np.stack([p.flow for p in batch]).astype(dtype)
    mask = np.stack([
        (p.valid if p.valid is not None else np.ones(p.size))[None] for p in batch
    ]).astype(dtype)
    return ia, ib, gt, mask


def _validation_epe(params: ModelParams, model_config: ModelConfig,
                    pairs: Sequence[SamplePair], indices: Sequence[int], dtype) -> float | None:
    if not indices:
        return None
    scores = []
    for i in indices:
        p = pairs[i]
        ia = to_model_input(p.image_a)[None].astype(dtype)
        ib = to_model_input(p.image_b)[None].astype(dtype)
        out = forward(Tensor(ia), Tensor(ib), params, model_config)
        scores.append(mean_epe(out.flow.data[0], p.flow, p.valid))
    return float(np.mean(scores))


def train(pairs: Sequence[SamplePair], model_config: ModelConfig,
          config: TrainConfig, out_dir: str | Path | None = None,
          params: ModelParams | None = None) -> TrainResult:
    """Run the optimisation loop over synthetic pairs.

    Writes (when ``out_dir`` is given) an append-only metrics log, periodic
    and final checkpoints, and the model config used.  Aborts with
    ``NonFiniteLoss`` on a non-finite loss, keeping the last checkpoint on
    disk; non-finite gradients skip the step instead of aborting.
    """
    if not pairs:
        raise ValueError("train: dataset is empty")
    dtype = default_dtype()
    stride = model_config.prediction_stride
    if params is None:
        params = init_model_params(model_config, seed=config.seed)
    state = OptimizerState.for_params(params)
    train_idx, val_idx = validation_split(len(pairs), config.seed, config.val_fraction)
    if not train_idx:
        raise ValueError("train: no training samples left after the validation split")

    out_path = Path(out_dir) if out_dir is not None else None
    log_path = None
    ckpt_path = None
    log_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        write_model_config(model_config, out_path / "model.cfg")
        log_path = out_path / "metrics.log"
        log_file = open(log_path, "w")

    def phase2(it: int) -> bool:
        return config.phase2_start is not None and it >= config.phase2_start

    def rate(it: int) -> float:
        if config.fixed_lr is not None:
            return config.fixed_lr
        if phase2(it):
            return config.phase2_lr
        return lr_at(it, config.schedule)

    history: list[tuple[int, float, float, float | None]] = []
    skipped = 0
    final_val = None
    try:
        for it in range(config.max_iters):
            rng = np.random.default_rng((config.seed, it))
            lam = config.lambda_rec if phase2(it) else 0.0
            lr = rate(it)
            chosen = rng.choice(train_idx, size=config.batch_size,
                                replace=len(train_idx) < config.batch_size)
            batch = []
            for idx in chosen:
                p = pairs[int(idx)]
                if config.augment is not None:
                    p = augment_pair(p, int(rng.integers(2 ** 31)), config.augment)
                batch.append(p)
            ia, ib, gt, mask = _batch_arrays(batch, dtype)
            gt_low = pool_flow(gt, stride)
            mask_low = pool_mask(mask, stride)
            with Tape() as tape:
                out: ModelOutput = forward(Tensor(ia), Tensor(ib), params, model_config)
                loss = total_loss(out.flow_lowres, Tensor(gt_low),
                                  out.features_a, out.features_b,
                                  balance=lam, mask=Tensor(mask_low), eps=config.loss_eps)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise NonFiniteLoss(it)
            tape.backward(loss)
            try:
                adam_step(params, params.gradients(), state, lr,
                          config.beta1, config.beta2, config.adam_eps)
            except NonFiniteGradient:
                skipped += 1
            params.zero_grad()

            val_epe = None
            last = it == config.max_iters - 1
            if val_idx and (last or (config.eval_every > 0 and (it + 1) % config.eval_every == 0)):
                val_epe = _validation_epe(params, model_config, pairs, val_idx, dtype)
                final_val = val_epe
            history.append((it, lr, loss_value, val_epe))
            if log_file is not None:
                line = f"{it}\t{lr:.8g}\t{loss_value:.6f}"
                if val_epe is not None:
                    line += f"\t{val_epe:.6f}"
                log_file.write(line + "\n")
                log_file.flush()
            if out_path is not None and (
                    last or (config.checkpoint_every > 0 and (it + 1) % config.checkpoint_every == 0)):
                ckpt_path = out_path / ("checkpoint_final.ckpt" if last
                                        else f"checkpoint_{it + 1:06d}.ckpt")
                params.save(ckpt_path)
    finally:
        if log_file is not None:
            log_file.close()

    return TrainResult(params=params, history=history, final_val_epe=final_val,
                       checkpoint_path=ckpt_path, log_path=log_path, skipped_steps=skipped)
