"""Model training, plain or differentially private, with privacy accounting.

DP training clips each example's gradient to l2 norm C, accumulates the
clipped gradients over the logical batch (microbatches of size one), adds a
single Gaussian noise draw of scale sigma*C per coordinate, and divides by
the logical batch size before the optimizer transform. The accountant is a
conservative Renyi-composition bound for the Gaussian mechanism that ignores
subsampling amplification; the reported sampling rate q is logical-batch/N
even though batches are formed by shuffling, not Poisson sampling.
"""

from __future__ import annotations

import json
import math
import random
import warnings
from dataclasses import dataclass

import torch

from .corpus import CorpusSplit, TokenSequence, Vocabulary
from .model import (
    DTYPE,
    GradientVector,
    LMSnapshot,
    TinyLM,
    apply_flat_update,
    batch_mean_loss,
    per_example_flat_gradients,
    seqs_to_tensor,
    sequence_scores,
    trainable_parameters,
)

ACCOUNTANT_NAME = "rdp-gaussian-no-amplification"
# dense orders up to 256, then geometric extension so very large noise
# multipliers still resolve to small bounds (optimal order grows with sigma)
ALPHA_GRID = [1.5 + 0.5 * i for i in range(int((256 - 1.5) / 0.5) + 1)]
ALPHA_GRID += [256.0 * 2 ** k for k in range(1, 41)]


class TrainError(ValueError):
    pass


@dataclass(frozen=True)
class DPConfig:
    enabled: bool = False
    clip_norm: float = 1.0
    noise_multiplier: float = 1.0
    delta: float = 1e-5

    def __post_init__(self):
        if self.enabled:
            if self.clip_norm <= 0:
                raise TrainError(f"clip_norm must be > 0, got {self.clip_norm}")
            if self.noise_multiplier < 0:
                raise TrainError(f"noise_multiplier must be >= 0, got {self.noise_multiplier}")
            if not 0.0 < self.delta < 1.0:
                raise TrainError(f"delta must be in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    learning_rate: float = 1e-5
    batch_size: int = 2
    accumulation_steps: int = 8  # 128 for DP runs
    optimizer: str = "adam"
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise TrainError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.accumulation_steps < 1:
            raise TrainError("epochs, batch_size and accumulation_steps must be >= 1")


@dataclass(frozen=True)
class PrivacyReport:
    clip_norm: float
    noise_multiplier: float
    sampling_rate: float
    steps: int
    delta: float
    epsilon: float
    epsilon_finite: bool
    accountant: str

    def to_dict(self) -> dict:
        return {
            "clip_norm": self.clip_norm,
            "noise_multiplier": self.noise_multiplier,
            "sampling_rate": self.sampling_rate,
            "steps": self.steps,
            "delta": self.delta,
            "epsilon": self.epsilon if math.isfinite(self.epsilon) else None,
            "epsilon_finite": self.epsilon_finite,
            "accountant": self.accountant,
        }


def clip(grad: GradientVector, clip_norm: float) -> GradientVector:
    """Scale the gradient by min(1, C/||g||); zero gradients pass through."""
    if clip_norm <= 0:
        raise TrainError(f"clip_norm must be > 0, got {clip_norm}")
    if grad.norm <= clip_norm:
        return grad
    return grad.scaled(clip_norm / grad.norm)


def gaussian_noise(dim: int, std: float, rng: torch.Generator) -> torch.Tensor:
    return torch.randn(dim, generator=rng, dtype=DTYPE) * std


def epsilon_of(dp: DPConfig, steps: int) -> float:
    """Privacy bound after `steps` noisy releases, minimized over a Renyi-order
    grid: eps = min_a [steps * a / (2 sigma^2) + ln(1/delta) / (a - 1)].

    Returns infinity when noise is zero (no guarantee).
    """
    if steps < 1:
        raise TrainError(f"steps must be >= 1, got {steps}")
    sigma = dp.noise_multiplier
    if sigma == 0:
        return math.inf
    log_inv_delta = math.log(1.0 / dp.delta)
    return min(
        steps * alpha / (2.0 * sigma * sigma) + log_inv_delta / (alpha - 1.0)
        for alpha in ALPHA_GRID
    )


class _FlatSgd:
    def __init__(self, lr: float, dim: int):
        self.lr = lr

    def step(self, grad: torch.Tensor) -> torch.Tensor:
        return -self.lr * grad


class _FlatAdam:
    def __init__(self, lr: float, dim: int, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = torch.zeros(dim, dtype=DTYPE)
        self.v = torch.zeros(dim, dtype=DTYPE)
        self.t = 0

    def step(self, grad: torch.Tensor) -> torch.Tensor:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return -self.lr * m_hat / (torch.sqrt(v_hat) + self.eps)


def _make_optimizer(tc: TrainConfig, dim: int):
    return _FlatAdam(tc.learning_rate, dim) if tc.optimizer == "adam" else _FlatSgd(tc.learning_rate, dim)


def _flat_grad(model: TinyLM) -> torch.Tensor:
    return torch.cat([
        (p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1)
        for p in trainable_parameters(model)
    ]).detach().clone()


def dp_batch_gradient(
    model: TinyLM,
    ids: torch.Tensor,
    dp: DPConfig,
    noise_rng: torch.Generator,
    dropout_rng: torch.Generator | None = None,
    train_mode: bool = False,
    assert_clip_norms: bool = False,
    micro_size: int = 128,
) -> tuple[torch.Tensor, float]:
    """Noisy mean of per-example clipped gradients over one logical batch.

    Per-example gradients come from vectorized microbatches (each example's
    gradient computed exactly, then clipped individually); noise is drawn
    once for the whole logical batch. Returns (gradient, mean loss).
    """
    if not dp.enabled:
        raise TrainError("dp_batch_gradient requires an enabled DPConfig")
    if ids.shape[0] == 0:
        raise TrainError("empty logical batch")
    dim = sum(p.numel() for p in trainable_parameters(model))
    acc = torch.zeros(dim, dtype=DTYPE)
    loss_sum = 0.0
    for start in range(0, ids.shape[0], micro_size):
        micro = ids[start : start + micro_size]
        grads, losses = per_example_flat_gradients(model, micro,
                                                   train_mode=train_mode,
                                                   rng=dropout_rng)
        norms = torch.linalg.vector_norm(grads, dim=1)
        factors = torch.where(norms > dp.clip_norm, dp.clip_norm / norms,
                              torch.ones_like(norms))
        clipped = grads * factors.unsqueeze(1)
        if assert_clip_norms:
            post = torch.linalg.vector_norm(clipped, dim=1)
            assert bool((post <= dp.clip_norm * (1 + 1e-12)).all()), (
                f"post-clip norm {float(post.max())} exceeds {dp.clip_norm}"
            )
        acc += clipped.sum(dim=0)
        loss_sum += float(losses.sum())
    if dp.noise_multiplier > 0:
        acc += gaussian_noise(dim, dp.noise_multiplier * dp.clip_norm, noise_rng)
    return acc / ids.shape[0], loss_sum / ids.shape[0]


def plain_batch_gradient(
    model: TinyLM,
    ids: torch.Tensor,
    micro_size: int,
    dropout_rng: torch.Generator | None = None,
    train_mode: bool = False,
) -> tuple[torch.Tensor, float]:
    """Mean gradient over one logical batch via microbatched accumulation."""
    if ids.shape[0] == 0:
        raise TrainError("empty logical batch")
    dim = sum(p.numel() for p in trainable_parameters(model))
    acc = torch.zeros(dim, dtype=DTYPE)
    loss_sum = 0.0
    for start in range(0, ids.shape[0], micro_size):
        micro = ids[start : start + micro_size]
        model.zero_grad(set_to_none=True)
        loss = batch_mean_loss(model, micro, train_mode=train_mode, rng=dropout_rng)
        loss.backward()
        acc += _flat_grad(model) * micro.shape[0]
        loss_sum += float(loss.detach()) * micro.shape[0]
        model.zero_grad(set_to_none=True)
    return acc / ids.shape[0], loss_sum / ids.shape[0]


def dev_mean_loss(model: TinyLM, dev: list[TokenSequence]) -> float | None:
    """Mean over dev chunks of the per-chunk mean loss; None if nothing scorable."""
    if not dev:
        return None
    scores = sequence_scores(model, dev)
    losses = [-s.mean_log_likelihood for s in scores if s.token_count > 0]
    if not losses:
        return None
    return sum(losses) / len(losses)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    dev_loss: float | None
    steps: int
    epsilon: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "dev_loss": self.dev_loss,
            "steps": self.steps,
            "epsilon": self.epsilon if math.isfinite(self.epsilon) else None,
        }


@dataclass(frozen=True)
class TrainResult:
    snapshot: LMSnapshot
    metrics: list[EpochMetrics]
    privacy: PrivacyReport


def train(
    model: TinyLM,
    split: CorpusSplit,
    tc: TrainConfig,
    dp: DPConfig,
    vocab: Vocabulary,
    provenance: dict | None = None,
    on_epoch_end=None,
    run_log_path=None,
    assert_clip_norms: bool = False,
) -> TrainResult:
    """Train in place over seeded-shuffled chunks; one optimizer step per
    logical batch of batch_size * accumulation_steps examples.

    on_epoch_end(epoch, snapshot, metrics) is called with an immutable
    snapshot at each epoch end; per-epoch metrics are appended to
    run_log_path as JSON lines when given.
    """
    if not split.train:
        raise TrainError("empty train split")
    if abs(tc.dropout - model.cfg.dropout) > 1e-12:
        raise TrainError(
            f"TrainConfig.dropout {tc.dropout} disagrees with model dropout {model.cfg.dropout}"
        )
    n = len(split.train)
    logical = tc.batch_size * tc.accumulation_steps
    if dp.enabled and dp.delta >= 1.0 / n:
        warnings.warn(f"delta {dp.delta} is not below 1/N = {1.0 / n:.2e}", stacklevel=2)

    shuffle_rng = random.Random(tc.seed)
    dropout_rng = torch.Generator().manual_seed(tc.seed * 1_000_003 + 1)
    noise_rng = torch.Generator().manual_seed(tc.seed * 1_000_003 + 2)

    params = trainable_parameters(model)
    if not params:
        raise TrainError("model has no trainable parameters")
    dim = sum(p.numel() for p in params)
    optimizer = _make_optimizer(tc, dim)
    train_ids = seqs_to_tensor(split.train)

    steps = 0
    metrics: list[EpochMetrics] = []
    log_file = open(run_log_path, "a", encoding="utf-8") if run_log_path else None
    try:
        for epoch in range(tc.epochs):
            order = list(range(n))
            shuffle_rng.shuffle(order)
            batch_losses = []
            for start in range(0, n, logical):
                idx = order[start : start + logical]
                ids = train_ids[idx]
                if dp.enabled:
                    grad, loss_val = dp_batch_gradient(
                        model, ids, dp, noise_rng, dropout_rng=dropout_rng,
                        train_mode=True, assert_clip_norms=assert_clip_norms,
                    )
                else:
                    grad, loss_val = plain_batch_gradient(
                        model, ids, tc.batch_size, dropout_rng=dropout_rng,
                        train_mode=True,
                    )
                apply_flat_update(model, optimizer.step(grad))
                steps += 1
                batch_losses.append(loss_val)
            epsilon = epsilon_of(dp, steps) if dp.enabled else math.inf
            entry = EpochMetrics(
                epoch=epoch,
                train_loss=sum(batch_losses) / len(batch_losses),
                dev_loss=dev_mean_loss(model, split.dev),
                steps=steps,
                epsilon=epsilon,
            )
            metrics.append(entry)
            if log_file:
                log_file.write(json.dumps(entry.to_dict()) + "\n")
                log_file.flush()
            if on_epoch_end is not None:
                snap = LMSnapshot.from_model(
                    model, vocab,
                    provenance={**(provenance or {}), "epoch": epoch, "steps": steps},
                )
                on_epoch_end(epoch, snap, entry)
    finally:
        if log_file:
            log_file.close()

    epsilon = epsilon_of(dp, steps) if (dp.enabled and steps > 0) else math.inf
    privacy = PrivacyReport(
        clip_norm=dp.clip_norm if dp.enabled else 0.0,
        noise_multiplier=dp.noise_multiplier if dp.enabled else 0.0,
        sampling_rate=min(1.0, logical / n),
        steps=steps,
        delta=dp.delta if dp.enabled else 0.0,
        epsilon=epsilon,
        epsilon_finite=math.isfinite(epsilon),
        accountant=ACCOUNTANT_NAME if dp.enabled else "none",
    )
    final = LMSnapshot.from_model(
        model, vocab,
        provenance={**(provenance or {}), "epochs": tc.epochs, "steps": steps},
    )
    return TrainResult(snapshot=final, metrics=metrics, privacy=privacy)
