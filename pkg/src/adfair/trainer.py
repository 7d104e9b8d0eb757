"""Minimax training loop: Adam, plateau LR schedule, validation, checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import ArchConfig, ModelParams, init_params, save_checkpoint
from .numkernel import DegenerateRowError
from .objective import adfair_objective, contrastive_loss

log = logging.getLogger(__name__)

LR_FLOOR = 1e-8
PLATEAU_THRESHOLD = 1e-4


class TrainingAborted(RuntimeError):
    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


def sub_seed(seed: int, name: str) -> int:
    """Independent named stream derived from one top-level seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


@dataclass
class TrainConfig:
    tau: float = 0.1
    tau_learnable: bool = False
    alpha: float = 0.3
    lr: float = 1e-3
    batch_size: int = 8
    weight_decay: float = 1e-6
    max_epochs: int = 30
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    seed: int = 0
    disc_input_mode: str = "multimodal"
    eval_every: int | None = None  # steps; None -> once per epoch
    disc_lr_scale: float = 1.0
    fair_path: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not 0 < self.plateau_factor < 1:
            raise ValueError(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")

    def to_dict(self):
        return asdict(self)


# Published large-model hyperparameters; they assume pretrained backbones.
REFERENCE_HPARAMS = dict(lr=1e-5, batch_size=36, weight_decay=1e-6, tau=0.1, alpha=0.3)
TRAIN_PRESETS = {"desk": {}, "paper-hparams": REFERENCE_HPARAMS}


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: ModelParams, grads: dict, state: OptimizerState, lr: float,
              weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, lr_scale: dict | None = None, decay_names=None):
    """In-place Adam update with bias correction and decoupled weight decay.

    Only parameters present in ``grads`` move. ``lr_scale`` maps a name to a
    multiplier on ``lr``. Weight decay skips ``log_tau``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(
                f"non-finite gradient for {name} at step {state.step + 1}", state.step + 1
            )
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params.tensors[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        step_lr = lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
        if weight_decay and name != "log_tau":
            p = p - step_lr * weight_decay * p
        params.tensors[name] = p - step_lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


class PlateauScheduler:
    """Multiply the LR by ``factor`` after ``patience`` validations without
    an absolute improvement of at least ``threshold`` over the best value."""

    def __init__(self, lr, factor=0.5, patience=5, threshold=PLATEAU_THRESHOLD, floor=LR_FLOOR):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.floor = floor
        self.best = math.inf
        self.bad = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr = max(self.lr * self.factor, self.floor)
                self.bad = 0
        return self.lr


def plateau_scheduler(history, patience: int, factor: float, lr: float) -> float:
    if not 0 < factor < 1:
        raise ValueError(f"factor must be in (0, 1), got {factor}")
    sched = PlateauScheduler(lr, factor, patience)
    for x in history:
        sched.step(x)
    return sched.lr


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    validations: list = field(default_factory=list)
    best_val: float = math.inf
    best_step: int = 0

    def last_epoch_disc_acc(self) -> float:
        if not self.steps:
            return float("nan")
        last = self.steps[-1]["epoch"]
        vals = [r["disc_acc"] for r in self.steps if r["epoch"] == last]
        return float(np.mean(vals))


def validation_loss(params: ModelParams, ds, batch_size: int) -> float:
    """Mean InfoNCE over consecutive full batches of ``ds``."""
    n_batches = len(ds) // batch_size
    if n_batches == 0:
        return contrastive_loss(params, ds.images, ds.tokens, ds.masks)
    losses = []
    for b in range(n_batches):
        sl = slice(b * batch_size, (b + 1) * batch_size)
        losses.append(contrastive_loss(params, ds.images[sl], ds.tokens[sl], ds.masks[sl]))
    return float(np.mean(losses))


def arch_for(data_config, disc_input_mode: str, **overrides) -> ArchConfig:
    fields = dict(
        d_img_in=data_config.d_img_in,
        d_txt_in=data_config.d_txt_in,
        L_max=data_config.L_max,
        C_attr=data_config.C_attr,
        C_cls=data_config.C_cls,
        disc_input_mode=disc_input_mode,
    )
    fields.update(overrides)
    return ArchConfig(**fields)


def _write_trainlog(path: Path, log_: TrainLog):
    val_at = {r["step"]: r["val_l_gcl"] for r in log_.validations}
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "epoch", "l_gcl", "l_fair", "lr", "val_l_gcl"])
        for r in log_.steps:
            val = val_at.get(r["step"])
            w.writerow([r["step"], r["epoch"], repr(r["l_gcl"]), repr(r["l_fair"]),
                        repr(r["lr"]), "" if val is None else repr(val)])


def train(config: TrainConfig, train_set, val_set, arch: ArchConfig,
          out_dir=None, provenance: dict | None = None, on_step=None):
    """Run the minimax loop; returns ``(final params, TrainLog)``.

    ``on_step(step, params)`` is called after every parameter update.

    When ``out_dir`` is given, writes ``best/`` and ``final/`` checkpoints
    and ``trainlog.csv``. Raises :class:`TrainingAborted` on a non-finite
    loss or gradient; the best checkpoint written so far is kept.
    """
    if arch.disc_input_mode != config.disc_input_mode:
        arch = ArchConfig(**{**arch.to_dict(), "disc_input_mode": config.disc_input_mode})
    out = Path(out_dir) if out_dir is not None else None
    extra = {"train_config": config.to_dict()}
    if provenance:
        extra["provenance"] = provenance

    params = init_params(arch, sub_seed(config.seed, "init"), config.tau, config.tau_learnable)
    state = OptimizerState()
    sched = PlateauScheduler(config.lr, config.plateau_factor, config.plateau_patience)
    lr_scale = {n: config.disc_lr_scale for n in params.names("w_d")}
    tlog = TrainLog()

    n = len(train_set)
    steps_per_epoch = n // config.batch_size
    if steps_per_epoch == 0:
        raise ValueError(f"training set of {n} samples is smaller than one batch")
    eval_every = config.eval_every or steps_per_epoch
    shuffle_seed = sub_seed(config.seed, "shuffle")

    step = 0
    for epoch in range(config.max_epochs):
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
        for b in range(steps_per_epoch):
            batch = train_set.subset(order[b * config.batch_size:(b + 1) * config.batch_size])
            step += 1
            try:
                loss, grads = adfair_objective(params, batch, config.alpha, fair_path=config.fair_path)
            except DegenerateRowError as exc:
                raise TrainingAborted(f"degenerate forward pass at step {step}: {exc}", step) from exc
            if not (math.isfinite(loss.l_gcl) and math.isfinite(loss.l_fair)):
                raise TrainingAborted(f"non-finite loss at step {step}", step)
            lr = sched.lr
            adam_step(params, grads, state, lr, config.weight_decay, lr_scale=lr_scale)
            if on_step is not None:
                on_step(step, params)
            tlog.steps.append(dict(step=step, epoch=epoch, l_gcl=loss.l_gcl,
                                   l_fair=loss.l_fair, disc_acc=loss.disc_acc, lr=lr))
            if step % eval_every == 0:
                val = validation_loss(params, val_set, config.batch_size)
                if not math.isfinite(val):
                    raise TrainingAborted(f"non-finite validation loss at step {step}", step)
                tlog.validations.append(dict(step=step, epoch=epoch, val_l_gcl=val))
                if val < tlog.best_val:
                    tlog.best_val, tlog.best_step = val, step
                    if out is not None:
                        save_checkpoint(params, out / "best", config.seed, step, extra)
                sched.step(val)
        log.debug("epoch %d done: last l_gcl=%.4f l_fair=%.4f lr=%.2e",
                  epoch, tlog.steps[-1]["l_gcl"], tlog.steps[-1]["l_fair"], sched.lr)

    if out is not None:
        save_checkpoint(params, out / "final", config.seed, step, extra)
        _write_trainlog(out / "trainlog.csv", tlog)
    return params, tlog
