"""Noise schedule, weighted reconstruction loss, DDIM sampling, training.

The model predicts the noise added to a clean latent.  The loss combines a
plain mean over all positions with a masked sum that concentrates learning
on the pixels a mask marks as expressive, weighted down at high noise levels
where the target is mostly noise anyway.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from math import cos, pi

import numpy as np

from skattn.adapters import control_pyramid
from skattn.autodiff import (
    ShapeMismatch,
    Tensor,
    add,
    backward,
    constant,
    mean_all,
    mul,
    scale,
    sub,
    sum_all,
    zero_grads,
)
from skattn.config import Config
from skattn.params import ParamStore
from skattn.pose import assemble_expression_features, random_blur_augment
from skattn.unet import ModelWeights, ReferenceFeatures, reference_pass, unet_forward

__all__ = [
    "StepOutOfRange",
    "NoiseSchedule",
    "q_sample",
    "LossParts",
    "LOSS_TIME_CONSTANT",
    "weighted_loss",
    "ddim_timesteps",
    "ddim_step",
    "ddim_denoise_loop",
    "Adam",
    "cosine_lr",
    "TrainRecord",
    "Trainer",
    "set_base_trainable",
    "pretrain_base",
    "write_loss_csv",
    "read_loss_csv",
]


class StepOutOfRange(ValueError):
    """Timestep index outside the schedule."""


@dataclass
class NoiseSchedule:
    """Linear-beta schedule with cached cumulative signal fractions."""

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.ndim != 1 or self.betas.size == 0:
            raise ShapeMismatch(f"betas must be a nonempty vector, got {self.betas.shape}")
        if np.any(self.betas <= 0.0) or np.any(self.betas >= 1.0):
            raise StepOutOfRange("betas must lie strictly inside (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    @property
    def n_steps(self) -> int:
        return self.betas.size

    @classmethod
    def linear(cls, n_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        if n_steps < 1:
            raise StepOutOfRange(f"need at least one step, got {n_steps}")
        return cls(betas=np.linspace(beta_start, beta_end, n_steps))

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.n_steps:
            raise StepOutOfRange(f"t={t} outside [0, {self.n_steps - 1}]")
        return t


def q_sample(z0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Noising step: sqrt(a_bar_t) z0 + sqrt(1 - a_bar_t) eps."""
    t = sched.check_t(t)
    if z0.shape != eps.shape:
        raise ShapeMismatch(f"z0 {z0.shape} vs eps {eps.shape}")
    ab = sched.alpha_bars[t]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# loss


@dataclass
class LossParts:
    total: Tensor
    mean_term: float
    masked_term: float


# the masked-term weight is (1000 - t)/1000 with this constant fixed,
# independent of how many steps the sampling schedule actually uses
LOSS_TIME_CONSTANT = 1000


def _as_tensor(v) -> Tensor:
    return v if isinstance(v, Tensor) else constant(np.asarray(v, dtype=np.float64))


def weighted_loss(z, z_hat, mask: np.ndarray, timestep: int, eps_norm: float = 1e-8) -> LossParts:
    """mean(sq) + sum(mask * sq) * (1000 - t)/1000 * 1/(sum(mask) + eps_norm).

    ``sq`` is the elementwise squared error between ``z`` and ``z_hat``
    (either may be a graph tensor); ``mask`` is [1, h, w] with entries in
    {0, 1}, broadcast across channels; its sum counts pixels, not channel
    entries.  The masked term fades linearly as the timestep grows and is
    exactly zero at timestep 1000.
    """
    zt, zh = _as_tensor(z), _as_tensor(z_hat)
    if zt.ndim != 3:
        raise ShapeMismatch(f"latents must be [c, h, w], got {zt.shape}")
    if zt.shape != zh.shape:
        raise ShapeMismatch(f"z {zt.shape} vs z_hat {zh.shape}")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (1,) + zt.shape[1:]:
        raise ShapeMismatch(f"mask must be [1, h, w] = {(1,) + zt.shape[1:]}, got {mask.shape}")
    if not 0 <= int(timestep) <= LOSS_TIME_CONSTANT:
        raise StepOutOfRange(f"timestep={timestep} outside [0, {LOSS_TIME_CONSTANT}]")
    diff = sub(zh, zt)
    sq = mul(diff, diff)
    mean_term = mean_all(sq)
    mask_full = np.broadcast_to(mask, zt.shape).copy()
    alpha = (LOSS_TIME_CONSTANT - int(timestep)) / LOSS_TIME_CONSTANT
    beta = 1.0 / (float(mask.sum()) + eps_norm)
    masked_term = scale(sum_all(mul(sq, constant(mask_full))), alpha * beta)
    total = add(mean_term, masked_term)
    return LossParts(
        total=total, mean_term=float(mean_term.data), masked_term=float(masked_term.data)
    )


# ---------------------------------------------------------------------------
# DDIM


def ddim_timesteps(n_steps: int, sample_steps: int, t_start: int | None = None) -> list[int]:
    """Descending timestep path to 0, evenly spaced, duplicates dropped.

    Starts at n_steps-1 by default, or at ``t_start`` (the re-noised level
    when resuming from a partially noised latent).
    """
    if sample_steps < 1:
        raise StepOutOfRange(f"need at least one sampling step, got {sample_steps}")
    top = n_steps - 1 if t_start is None else int(t_start)
    if not 0 <= top < n_steps:
        raise StepOutOfRange(f"start step {top} outside [0, {n_steps - 1}]")
    if sample_steps == 1:
        return [top]
    path = [int(round(v)) for v in np.linspace(top, 0, sample_steps)]
    return list(dict.fromkeys(path))


def ddim_step(
    z_t: np.ndarray,
    eps_hat: np.ndarray,
    t: int,
    t_next: int | None,
    sched: NoiseSchedule,
    eta: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """One deterministic (eta=0) or stochastic update from t toward t_next.

    With t_next=None this is the final step and the clean estimate is
    returned.  eta > 0 mixes in fresh noise with the usual variance split;
    eta=0 ignores ``rng`` entirely.
    """
    t = sched.check_t(t)
    ab_t = sched.alpha_bars[t]
    x0 = (z_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    if t_next is None:
        return x0
    t_next = sched.check_t(t_next)
    if t_next >= t:
        raise StepOutOfRange(f"t_next={t_next} must be below t={t}")
    ab_n = sched.alpha_bars[t_next]
    sigma = 0.0
    if eta > 0.0:
        sigma = (
            eta
            * np.sqrt((1.0 - ab_n) / (1.0 - ab_t))
            * np.sqrt(1.0 - ab_t / ab_n)
        )
    z_next = np.sqrt(ab_n) * x0 + np.sqrt(max(1.0 - ab_n - sigma**2, 0.0)) * eps_hat
    if sigma > 0.0:
        noise = (rng or np.random.default_rng()).standard_normal(z_t.shape)
        z_next = z_next + sigma * noise
    return z_next


def ddim_denoise_loop(
    model_fn,
    z_start: np.ndarray,
    sample_steps: int,
    sched: NoiseSchedule,
    eta: float = 0.0,
    rng: np.random.Generator | None = None,
    t_start: int | None = None,
) -> np.ndarray:
    """Run the descending path; model_fn(z_t, t) predicts the noise.

    Deterministic at eta=0: the same start and model give the same output
    bit for bit.  This is the condition-agnostic loop; the pipeline wraps it
    with conditioned noise predictors.
    """
    path = ddim_timesteps(sched.n_steps, sample_steps, t_start)
    z = np.asarray(z_start, dtype=np.float64)
    for i, t in enumerate(path):
        t_next = path[i + 1] if i + 1 < len(path) else None
        eps_hat = model_fn(z, t)
        eps_hat = eps_hat.data if isinstance(eps_hat, Tensor) else np.asarray(eps_hat)
        z = ddim_step(z, eps_hat, t, t_next, sched, eta=eta, rng=rng)
    return z


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam over the trainable tensors of a store (or any named list)."""

    def __init__(
        self,
        params: list[tuple[str, Tensor]],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(t.data) for n, t in self.params}
        self.v = {n: np.zeros_like(t.data) for n, t in self.params}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, tensor in self.params:
            if tensor.grad is None:
                continue
            g = tensor.grad
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            tensor.data -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float) -> float:
    """Half-cosine decay from lr_max at step 0 to lr_min at step total."""
    if total < 1:
        raise StepOutOfRange(f"total steps must be >= 1, got {total}")
    frac = min(max(step / total, 0.0), 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + cos(pi * frac))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainRecord:
    step: int
    t_sampled: float
    loss_total: float
    loss_mean: float
    loss_masked: float

    CSV_FIELDS = ("step", "t_sampled", "loss_total", "loss_mean", "loss_masked")

    def row(self) -> list:
        return [self.step, self.t_sampled, self.loss_total, self.loss_mean, self.loss_masked]


class Trainer:
    """Adapter training against a frozen base on a list of samples.

    Each step draws a batch, noises each clean latent at its own random
    timestep, rebuilds expression tokens from freshly blur-augmented patches,
    and takes one Adam step on the batch-mean weighted loss.  Reference
    features are captured once per sample and reused (they have no gradient
    path).  All randomness comes from one seeded generator.
    """

    def __init__(
        self,
        model: ModelWeights,
        dataset: list,
        seed: int | None = None,
        train_steps: int | None = None,
    ):
        if not dataset:
            raise ShapeMismatch("dataset is empty")
        self.model = model
        self.cfg: Config = model.config
        self.dataset = list(dataset)
        self.sched = NoiseSchedule.linear(
            self.cfg.diffusion_steps, self.cfg.beta_start, self.cfg.beta_end
        )
        self.rng = np.random.default_rng(self.cfg.seed if seed is None else seed)
        self.opt = Adam(
            model.store.trainable(),
            beta1=self.cfg.adam_beta1,
            beta2=self.cfg.adam_beta2,
            eps=self.cfg.adam_eps,
        )
        self.total_steps = self.cfg.train_steps if train_steps is None else train_steps
        self.step_count = 0
        self._ref_cache: dict[int, ReferenceFeatures] = {}

    def _reference(self, idx: int) -> ReferenceFeatures:
        if idx not in self._ref_cache:
            z_ref = constant(2.0 * self.dataset[idx].reference_image - 1.0)
            self._ref_cache[idx] = reference_pass(z_ref, self.model)
        return self._ref_cache[idx]

    def _conditions(self, sample):
        eye = random_blur_augment(
            sample.eye_patch, self.cfg.blur_strength, int(self.rng.integers(1 << 31))
        )
        mouth = random_blur_augment(
            sample.mouth_patch, self.cfg.blur_strength, int(self.rng.integers(1 << 31))
        )
        expr = assemble_expression_features(
            sample.coefficients,
            eye,
            mouth,
            self.model.adapters.patch_encoder,
            self.model.adapters.expr,
        )
        return control_pyramid(sample.pose_raster, expr, self.model.adapters.control)

    def train_step(self) -> TrainRecord:
        batch = self.rng.integers(0, len(self.dataset), size=self.cfg.batch_size)
        totals = []
        mean_sum = masked_sum = t_sum = 0.0
        for idx in batch:
            sample = self.dataset[int(idx)]
            t = int(self.rng.integers(0, self.sched.n_steps))
            z0 = 2.0 * sample.image - 1.0
            eps = self.rng.standard_normal(z0.shape)
            z_t = constant(q_sample(z0, t, eps, self.sched))
            pred = unet_forward(
                z_t, t, self._conditions(sample), self._reference(int(idx)), self.model
            )
            parts = weighted_loss(eps, pred, sample.mask, t, self.cfg.loss_eps)
            totals.append(parts.total)
            mean_sum += parts.mean_term
            masked_sum += parts.masked_term
            t_sum += t
        loss = totals[0]
        for extra in totals[1:]:
            loss = add(loss, extra)
        loss = scale(loss, 1.0 / len(totals))
        backward(loss)
        lr = cosine_lr(self.step_count, self.total_steps, self.cfg.lr_max, self.cfg.lr_min)
        self.opt.step(lr)
        zero_grads(t for _, t in self.opt.params)
        record = TrainRecord(
            step=self.step_count,
            t_sampled=t_sum / len(batch),
            loss_total=float(loss.data),
            loss_mean=mean_sum / len(batch),
            loss_masked=masked_sum / len(batch),
        )
        self.step_count += 1
        return record

    def run(self, steps: int, log_path=None) -> list[TrainRecord]:
        records = [self.train_step() for _ in range(steps)]
        if log_path is not None:
            write_loss_csv(log_path, records)
        return records


def set_base_trainable(model: ModelWeights, trainable: bool) -> None:
    """Flip the gradient flag on every base tensor (grads cleared either way)."""
    for name in model.base_names:
        t = model.store[name]
        t.requires_grad = trainable
        t.grad = None


def pretrain_base(
    model: ModelWeights,
    dataset: list,
    steps: int | None = None,
    seed: int | None = None,
) -> list[float]:
    """Unconditional noise-regression for the soon-to-be-frozen base.

    A production-scale analog of this base would arrive already knowing how
    to denoise; the desk-scale one earns that prior here, before the
    adapters see a single gradient.  No conditioning is used, so adapter
    transparency is untouched, and the base is re-frozen on exit no matter
    what.
    """
    cfg = model.config
    steps = cfg.base_pretrain_steps if steps is None else steps
    if not dataset:
        raise ShapeMismatch("dataset is empty")
    losses: list[float] = []
    if steps <= 0:
        return losses
    sched = NoiseSchedule.linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    set_base_trainable(model, True)
    try:
        pairs = [(n, model.store[n]) for n in model.base_names]
        opt = Adam(pairs, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
        for step in range(steps):
            batch = rng.integers(0, len(dataset), size=cfg.batch_size)
            terms = []
            for idx in batch:
                sample = dataset[int(idx)]
                t = int(rng.integers(0, sched.n_steps))
                z0 = 2.0 * sample.image - 1.0
                eps = rng.standard_normal(z0.shape)
                z_t = constant(q_sample(z0, t, eps, sched))
                diff = sub(unet_forward(z_t, t, None, None, model), constant(eps))
                terms.append(mean_all(mul(diff, diff)))
            loss = terms[0]
            for extra in terms[1:]:
                loss = add(loss, extra)
            loss = scale(loss, 1.0 / len(terms))
            backward(loss)
            opt.step(cosine_lr(step, steps, cfg.lr_max, cfg.lr_min))
            zero_grads(t for _, t in pairs)
            losses.append(float(loss.data))
    finally:
        set_base_trainable(model, False)
    return losses


def write_loss_csv(path, records: list[TrainRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TrainRecord.CSV_FIELDS)
        for rec in records:
            writer.writerow(rec.row())


def read_loss_csv(path) -> list[TrainRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != TrainRecord.CSV_FIELDS:
            raise ShapeMismatch(f"unexpected loss log header {header}")
        return [
            TrainRecord(int(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4]))
            for r in reader
        ]
