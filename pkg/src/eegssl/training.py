"""Self-supervised pretraining: losses, EMA schedule, and the training loop.

One optimizer step processes a batch through a single unmasked target pass,
then one context pass and one prediction set per masked view. The target
encoder receives no gradients; it trails the context encoder through an
exponential moving average whose coefficient ramps linearly early in
training.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import EegDataset
from .masking import MaskConfig, make_views, preserved_count
from .networks import Model

logger = logging.getLogger(__name__)

# Stream tags keeping the seed derivations for shuffling, per-step masking,
# and validation masking disjoint.
_SHUFFLE_TAG = 101
_MASK_TAG = 202
_VAL_TAG = 303


class TrainingDiverged(RuntimeError):
    """Raised when the total loss stops being finite."""


@dataclass(frozen=True)
class EmaSchedule:
    """Linear ramp of the moving-average coefficient over early updates."""

    tau_start: float = 0.996
    tau_end: float = 0.9999
    tau_steps: int = 1

    def __post_init__(self):
        if not 0.0 <= self.tau_start <= self.tau_end <= 1.0:
            raise ValueError(
                f"need 0 <= tau_start <= tau_end <= 1, got {self.tau_start}, {self.tau_end}"
            )
        if self.tau_steps < 1:
            raise ValueError("tau_steps must be >= 1")

    def tau_at(self, step: int) -> float:
        frac = min(step, self.tau_steps) / self.tau_steps
        return self.tau_start + (self.tau_end - self.tau_start) * frac


@dataclass(frozen=True)
class LossConfig:
    """Weights and constants of the regularized objective."""

    rec_weight: float = 25.0
    var_weight: float = 25.0
    cov_weight: float = 1.0
    variance_target: float = 1.0
    eps: float = 1e-4

    def __post_init__(self):
        for name in ("rec_weight", "var_weight", "cov_weight", "variance_target", "eps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class LossBreakdown:
    rec: torch.Tensor
    var: torch.Tensor
    cov: torch.Tensor
    total: torch.Tensor

    def floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("rec", "var", "cov", "total")}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 50
    lr: float = 1e-3
    early_stop_patience: int | None = 20
    grad_clip: float | None = None
    workers: int = 0  # 0 = deterministic single-thread mode

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1 or None")


def reconstruction_loss(targets: list[torch.Tensor], predictions: list[torch.Tensor]) -> torch.Tensor:
    """Mean over target blocks of the summed squared error on loss indices.

    Blocks with no loss indices (fully overlapped by the context) contribute
    nothing and shrink the effective block count.
    """
    if len(targets) != len(predictions):
        raise ValueError("targets and predictions must pair up block for block")
    total = None
    effective = 0
    for y, y_hat in zip(targets, predictions):
        if y.shape != y_hat.shape:
            raise ValueError(f"block shape mismatch: {tuple(y.shape)} vs {tuple(y_hat.shape)}")
        if y.numel() == 0:
            continue
        effective += 1
        block = ((y - y_hat) ** 2).sum()
        total = block if total is None else total + block
    if effective == 0:
        raise ValueError("every target block is empty; nothing to reconstruct")
    return total / effective


def multi_view_loss(view_losses: list[torch.Tensor]) -> torch.Tensor:
    """Mean of per-view reconstruction losses."""
    if not view_losses:
        raise ValueError("need at least one view loss")
    return torch.stack([torch.as_tensor(v) for v in view_losses]).mean()


def variance_loss(reps: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Hinge on per-dimension batch standard deviation falling short of target."""
    if reps.ndim != 2 or reps.shape[0] < 2:
        raise ValueError("variance loss needs a (batch >= 2, dim) matrix")
    std = torch.sqrt(reps.var(dim=0, unbiased=True) + cfg.eps)
    return torch.clamp(cfg.variance_target - std, min=0.0).mean()


def covariance_loss(reps: torch.Tensor) -> torch.Tensor:
    """Mean squared off-diagonal covariance, normalized by the dimension count."""
    if reps.ndim != 2 or reps.shape[0] < 2:
        raise ValueError("covariance loss needs a (batch >= 2, dim) matrix")
    b, d = reps.shape
    centered = reps - reps.mean(dim=0, keepdim=True)
    cov = centered.T @ centered / (b - 1)
    off_diag = cov - torch.diag_embed(torch.diagonal(cov))
    return (off_diag**2).sum() / d


def total_loss(rec: torch.Tensor, var: torch.Tensor, cov: torch.Tensor, cfg: LossConfig) -> LossBreakdown:
    rec = torch.as_tensor(rec)
    var = torch.as_tensor(var)
    cov = torch.as_tensor(cov)
    total = cfg.rec_weight * rec + cfg.var_weight * var + cfg.cov_weight * cov
    return LossBreakdown(rec=rec, var=var, cov=cov, total=total)


@torch.no_grad()
def ema_update(target_module: torch.nn.Module, context_module: torch.nn.Module,
               step: int, sched: EmaSchedule) -> float:
    """target <- tau * target + (1 - tau) * context, elementwise; returns tau."""
    tau = sched.tau_at(step)
    for p_t, p_c in zip(target_module.parameters(), context_module.parameters()):
        p_t.data = tau * p_t.data + (1.0 - tau) * p_c.data
    return tau


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine decay from lr0 at step 0 to 0 at the final step."""
    if total_steps <= 1:
        return lr0
    t = min(step, total_steps - 1)
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / (total_steps - 1)))


LOG_COLUMNS = ("step", "lr", "tau", "rec", "var", "cov", "total", "val_total", "rep_std_min")


@dataclass
class TrainResult:
    model: Model
    log: list[dict]
    collapse_flagged: bool
    stopped_early: bool
    best_val: float
    target_passes: int
    samples_seen: int


class Trainer:
    """Owns the model, optimizer, and counters for one pretraining run.

    All stochastic choices (batch order, mask plans) are derived statelessly
    from (seed, epoch/step, sample index), so two trainers with the same
    inputs produce bit-identical logs and a restored trainer continues
    exactly where the saved one stopped.
    """

    def __init__(
        self,
        model: Model,
        train: EegDataset,
        val: EegDataset,
        mask_cfg: MaskConfig,
        loss_cfg: LossConfig,
        train_cfg: TrainConfig,
        ema: EmaSchedule | None = None,
        seed: int = 0,
        log_path: str | Path | None = None,
    ):
        if len(train) == 0 or len(val) == 0:
            raise ValueError("pretraining needs nonempty train and validation sets")
        if preserved_count(model.num_patches, mask_cfg.mask_ratio) < 1:
            raise ValueError("mask_ratio leaves no visible patches at this sequence length")
        if mask_cfg.num_views == 1 and (
            len(train) % train_cfg.batch_size == 1 or len(val) % train_cfg.batch_size == 1
        ):
            # batch statistics need >= 2 pooled rows; a trailing singleton
            # batch with a single view cannot provide them
            raise ValueError(
                "num_views=1 with a trailing batch of one sample; adjust batch_size"
            )
        torch.set_num_threads(max(1, train_cfg.workers))

        self.model = model
        self.mask_cfg = mask_cfg
        self.loss_cfg = loss_cfg
        self.train_cfg = train_cfg
        self.seed = seed
        self.log_path = Path(log_path) if log_path is not None else None

        self.train_x = torch.as_tensor(train.stacked(), dtype=torch.float32)
        self.val_x = torch.as_tensor(val.stacked(), dtype=torch.float32)

        self.steps_per_epoch = math.ceil(len(train) / train_cfg.batch_size)
        self.total_updates = self.steps_per_epoch * train_cfg.epochs
        if ema is None:
            ema = EmaSchedule(tau_steps=max(1, int(0.3 * self.total_updates)))
        self.ema = ema

        self.optimizer = torch.optim.Adam(self.model.trainable_parameters(), lr=train_cfg.lr)

        self.epoch = 0
        self.global_step = 0
        self.best_val = math.inf
        self.bad_epochs = 0
        self.stopped_early = False
        self.target_passes = 0
        self.samples_seen = 0
        self.log: list[dict] = []
        self._log_file = None

    @staticmethod
    def compute_total_updates(n_train: int, train_cfg: TrainConfig) -> int:
        return math.ceil(n_train / train_cfg.batch_size) * train_cfg.epochs

    # -- plan derivation -------------------------------------------------

    def _train_plans(self, step: int, sample_index: int):
        seq = np.random.SeedSequence([self.seed, _MASK_TAG, step, sample_index])
        return make_views(self.model.num_patches, self.mask_cfg, seq)

    def _val_plans(self, sample_index: int):
        seq = np.random.SeedSequence([self.seed, _VAL_TAG, sample_index])
        return make_views(self.model.num_patches, self.mask_cfg, seq)

    def _epoch_order(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, _SHUFFLE_TAG, epoch]))
        return rng.permutation(self.train_x.shape[0])

    # -- loss on one batch -----------------------------------------------

    def _batch_objective(self, x: torch.Tensor, plans_per_sample: list) -> tuple[LossBreakdown, torch.Tensor]:
        """plans_per_sample: list over batch of per-view MaskPlan lists."""
        batch = x.shape[0]
        num_views = self.mask_cfg.num_views
        patches = self.model.patchify(x)
        targets = self.model.target_representations(patches)
        self.target_passes += batch
        d = targets.shape[-1]

        view_losses = []
        pooled_views = []
        for q in range(num_views):
            plans = [plans_per_sample[i][q] for i in range(batch)]
            preserved = torch.as_tensor(np.stack([p.preserved for p in plans]), dtype=torch.long)
            positions = torch.as_tensor(
                np.stack([np.concatenate(p.target_blocks) for p in plans]), dtype=torch.long
            )
            loss_mask = torch.as_tensor(
                np.stack([self._loss_mask(p) for p in plans]), dtype=patches.dtype
            )
            effective = torch.as_tensor(
                [max(1, sum(1 for li in p.loss_indices if li.size)) for p in plans],
                dtype=patches.dtype,
            )

            context = self.model.context_representations(patches, preserved)
            pooled_views.append(context.mean(dim=1))
            preds = self.model.predict(context, positions)
            block_targets = targets.gather(1, positions.unsqueeze(-1).expand(-1, -1, d))
            sq_err = ((preds - block_targets) ** 2).sum(dim=-1) * loss_mask
            rec_per_sample = sq_err.sum(dim=-1) / effective
            view_losses.append(rec_per_sample.mean())

        rec = multi_view_loss(view_losses)
        pooled = torch.cat(pooled_views, dim=0)
        var = variance_loss(pooled, self.loss_cfg)
        cov = covariance_loss(pooled)
        return total_loss(rec, var, cov, self.loss_cfg), pooled

    def _loss_mask(self, plan) -> np.ndarray:
        preserved = set(plan.preserved.tolist())
        flat = np.concatenate(plan.target_blocks)
        return np.asarray([0.0 if j in preserved else 1.0 for j in flat], dtype=np.float64)

    # -- main loop ---------------------------------------------------------

    def run(self, until_epoch: int | None = None) -> TrainResult:
        """Train to the configured epoch count, or pause after ``until_epoch``
        epochs (the schedule horizons stay pinned to the full run)."""
        limit = self.train_cfg.epochs
        if until_epoch is not None:
            limit = min(limit, until_epoch)
        self._open_log()
        try:
            while self.epoch < limit and not self.stopped_early:
                self._run_epoch()
                self.epoch += 1
        finally:
            self._close_log()
        collapse = bool(self.log and self.log[-1]["rep_std_min"] < 1e-3)
        if collapse:
            logger.warning("representation collapse detected: batch std below 1e-3")
        return TrainResult(
            model=self.model,
            log=self.log,
            collapse_flagged=collapse,
            stopped_early=self.stopped_early,
            best_val=self.best_val,
            target_passes=self.target_passes,
            samples_seen=self.samples_seen,
        )

    def _run_epoch(self):
        order = self._epoch_order(self.epoch)
        for start in range(0, len(order), self.train_cfg.batch_size):
            batch_idx = order[start : start + self.train_cfg.batch_size]
            x = self.train_x[batch_idx]
            self.samples_seen += len(batch_idx)
            plans = [self._train_plans(self.global_step, int(i)) for i in batch_idx]

            breakdown, pooled = self._batch_objective(x, plans)
            if not torch.isfinite(breakdown.total):
                raise TrainingDiverged(
                    f"non-finite total loss at step {self.global_step}: {breakdown.floats()}"
                )

            lr = cosine_lr(self.global_step, self.total_updates, self.train_cfg.lr)
            for group in self.optimizer.param_groups:
                group["lr"] = lr
            self.optimizer.zero_grad()
            breakdown.total.backward()
            if self.train_cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(
                    self.model.trainable_parameters(), self.train_cfg.grad_clip
                )
            self.optimizer.step()
            tau = ema_update(
                self.model.target_encoder, self.model.context_encoder, self.global_step, self.ema
            )

            row = {
                "step": self.global_step,
                "lr": lr,
                "tau": tau,
                **breakdown.floats(),
                "val_total": None,
                "rep_std_min": float(pooled.detach().std(dim=0).min()),
            }
            last_in_epoch = start + self.train_cfg.batch_size >= len(order)
            if last_in_epoch:
                row["val_total"] = self._validate_and_update_stopper()
            self._append_row(row)
            self.global_step += 1

    def _validate_and_update_stopper(self) -> float:
        val_total = self.validate()
        if val_total < self.best_val:
            self.best_val = val_total
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            patience = self.train_cfg.early_stop_patience
            if patience is not None and self.bad_epochs >= patience:
                self.stopped_early = True
        return val_total

    @torch.no_grad()
    def validate(self) -> float:
        """Total loss on the validation set under fixed per-sample masks."""
        total = 0.0
        count = 0
        for start in range(0, self.val_x.shape[0], self.train_cfg.batch_size):
            x = self.val_x[start : start + self.train_cfg.batch_size]
            n = x.shape[0]
            self.samples_seen += n
            plans = [self._val_plans(start + i) for i in range(n)]
            breakdown, _ = self._batch_objective(x, plans)
            if not torch.isfinite(breakdown.total):
                raise TrainingDiverged("non-finite validation loss")
            total += float(breakdown.total) * n
            count += n
        return total / count

    # -- resume support ----------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "global_step": self.global_step,
            "best_val": self.best_val,
            "bad_epochs": self.bad_epochs,
            "stopped_early": self.stopped_early,
            "target_passes": self.target_passes,
            "samples_seen": self.samples_seen,
            "optimizer": self.optimizer.state_dict(),
        }

    def load_state_dict(self, state: dict):
        self.epoch = state["epoch"]
        self.global_step = state["global_step"]
        self.best_val = state["best_val"]
        self.bad_epochs = state["bad_epochs"]
        self.stopped_early = state["stopped_early"]
        self.target_passes = state["target_passes"]
        self.samples_seen = state["samples_seen"]
        self.optimizer.load_state_dict(state["optimizer"])

    # -- logging -----------------------------------------------------------

    def _open_log(self):
        if self.log_path is None:
            return
        fresh = not self.log_path.exists() or self.global_step == 0
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        self._log_file = self.log_path.open("w" if fresh else "a", newline="")
        self._log_writer = csv.writer(self._log_file)
        if fresh:
            self._log_writer.writerow(LOG_COLUMNS)
            self._log_file.flush()

    def _append_row(self, row: dict):
        self.log.append(row)
        if self._log_file is not None:
            self._log_writer.writerow(
                ["" if row[c] is None else repr(row[c]) if isinstance(row[c], float) else row[c]
                 for c in LOG_COLUMNS]
            )
            self._log_file.flush()

    def _close_log(self):
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None


def pretrain(
    train: EegDataset,
    val: EegDataset,
    model: Model,
    mask_cfg: MaskConfig,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    ema: EmaSchedule | None = None,
    seed: int = 0,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Run the full self-supervised loop and return the trained model + log."""
    trainer = Trainer(
        model, train, val, mask_cfg, loss_cfg, train_cfg, ema=ema, seed=seed, log_path=log_path
    )
    return trainer.run()
