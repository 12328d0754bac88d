"""Contrastive self-supervised pretraining: the similarity-based loss with
cross-view and within-view terms, decoupled AdamW, a cosine schedule with
warm restarts, and the epoch loop tying them to view generation.
"""

from __future__ import annotations

import json
import logging
import math
import time
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .augment import make_views, rng_for_window
from .config import (
    AugmentConfig,
    ContrastiveConfig,
    OptimizerConfig,
    PretrainRunConfig,
    ScheduleConfig,
)
from .data import Window
from .encoder import SignalEncoder, save_checkpoint
from .errors import DataError, NumericError, ShapeError

log = logging.getLogger(__name__)


def cosine_similarity(u, v) -> float:
    """Cosine of the angle between two vectors; 0 for a zero vector (with a
    warning), since a degenerate embedding carries no direction."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ShapeError(f"vectors must share one shape, got {u.shape} and {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        log.warning("cosine similarity of a zero vector defined as 0")
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def _normalize_rows(z: torch.Tensor) -> torch.Tensor:
    norms = z.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        log.warning("zero-norm embedding rows treated as zero similarity")
    return z / torch.where(norms == 0, torch.ones_like(norms), norms)


def contrastive_loss(
    z1: torch.Tensor, z2: torch.Tensor, cfg: ContrastiveConfig
) -> torch.Tensor:
    """Mean over i of -log( A_ii / sum_k (A_ik + B_ik) ), with
    A_ik = exp(sim(z1_i, z2_k)/tau) and B_ik = exp(sim(z1_i, z1_k)/tau).

    ``include_self_term`` keeps B_ii (=e^{1/tau}) in the denominator; the
    flag off excludes k=i from the B sum (the usual NT-Xent convention).
    Differentiable; evaluated via log-sum-exp for stability.
    """
    if z1.shape != z2.shape:
        raise ShapeError(f"embedding batches differ: {tuple(z1.shape)} vs {tuple(z2.shape)}")
    if z1.ndim != 2 or z1.shape[0] < 1:
        raise ShapeError(f"expected (batch, dim) embeddings, got {tuple(z1.shape)}")
    if not (torch.isfinite(z1).all() and torch.isfinite(z2).all()):
        raise NumericError("non-finite embeddings passed to contrastive loss")
    a = _normalize_rows(z1)
    b = _normalize_rows(z2)
    cross = a @ b.T / cfg.temperature  # A logits
    within = a @ a.T / cfg.temperature  # B logits
    if not cfg.include_self_term:
        n = within.shape[0]
        eye = torch.eye(n, dtype=torch.bool, device=within.device)
        within = within.masked_fill(eye, float("-inf"))
    denom = torch.logsumexp(torch.cat([cross, within], dim=1), dim=1)
    return -(cross.diagonal() - denom).mean()


def contrastive_loss_with_grads(
    z1: torch.Tensor, z2: torch.Tensor, cfg: ContrastiveConfig
) -> tuple[float, torch.Tensor, torch.Tensor]:
    """Loss value plus exact gradients with respect to both embedding batches."""
    za = z1.detach().clone().requires_grad_(True)
    zb = z2.detach().clone().requires_grad_(True)
    loss = contrastive_loss(za, zb, cfg)
    loss.backward()
    return float(loss.item()), za.grad.detach(), zb.grad.detach()


class AdamW(torch.optim.Optimizer):
    """Adam with fully decoupled weight decay.

    Decay multiplies parameters by (1 - weight_decay) each step regardless of
    the learning rate, so lr -> 0 still shrinks weights multiplicatively.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.0):
        if lr < 0:
            raise ValueError(f"invalid learning rate {lr}")
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            lr = group["lr"]
            beta1, beta2 = group["betas"]
            eps = group["eps"]
            weight_decay = group["weight_decay"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                grad = p.grad
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"]
                exp_avg, exp_avg_sq = state["exp_avg"], state["exp_avg_sq"]
                exp_avg.mul_(beta1).add_(grad, alpha=1 - beta1)
                exp_avg_sq.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)
                if weight_decay != 0.0:
                    p.mul_(1.0 - weight_decay)
                denom = (exp_avg_sq / (1 - beta2**t)).sqrt_().add_(eps)
                p.addcdiv_(exp_avg, denom, value=-lr / (1 - beta1**t))
        return loss


def make_optimizer(params, cfg: OptimizerConfig, lr: float | None = None) -> AdamW:
    return AdamW(
        params,
        lr=cfg.learning_rate if lr is None else lr,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.adam_epsilon,
        weight_decay=cfg.weight_decay,
    )


def cosine_restart_lr(
    step: int,
    base_lr: float,
    first_cycle: int,
    cycle_mult: float = 2.0,
    min_lr_fraction: float = 0.01,
) -> float:
    """Learning rate at a global step under cosine decay with warm restarts.

    Each cycle sweeps phase 0..1 over its steps (first step at base_lr, last
    step exactly at min_lr_fraction * base_lr), then the next cycle starts,
    cycle_mult times longer.
    """
    if first_cycle < 1:
        raise ValueError("first_cycle must be >= 1")
    cycle_len = first_cycle
    start = 0
    while step >= start + cycle_len:
        start += cycle_len
        cycle_len = max(1, round(cycle_len * cycle_mult))
    t = step - start
    min_lr = base_lr * min_lr_fraction
    if cycle_len == 1:
        return base_lr
    phase = t / (cycle_len - 1)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * phase))


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, 7, epoch])).permutation(n)


def pretrain(
    windows: Sequence[Window],
    model: SignalEncoder,
    contrastive: ContrastiveConfig,
    optimizer_cfg: OptimizerConfig,
    schedule: ScheduleConfig,
    run_cfg: PretrainRunConfig,
    augment_cfg: AugmentConfig,
    checkpoint_dir: str | Path | None = None,
    log_path: str | Path | None = None,
) -> tuple[SignalEncoder, list[dict]]:
    """Optimize the encoder with the contrastive objective over raw + fused
    windows.

    Per epoch: seeded shuffle, two views per window (view randomness derives
    from (seed, epoch, window id)), both views through backbone + projection
    head, loss, decoupled-AdamW step under the cosine-restart schedule.
    Emits one record per step plus one summary per epoch; deterministic in
    run_cfg.seed.
    """
    windows = list(windows)
    if not windows:
        raise DataError("pretraining corpus is empty")
    batch_size = run_cfg.resolve_batch_size(len(windows))
    if len(windows) % batch_size == 1 and not contrastive.include_self_term:
        raise DataError(
            "trailing batch of size 1 is degenerate without the self term; "
            "adjust batch_size or corpus size"
        )
    steps_per_epoch = math.ceil(len(windows) / batch_size)
    first_cycle = schedule.first_cycle if schedule.first_cycle is not None else steps_per_epoch

    optimizer = make_optimizer(model.parameters(), optimizer_cfg)
    records: list[dict] = []
    seed = run_cfg.seed
    global_step = 0
    for epoch in range(1, run_cfg.epochs + 1):
        epoch_start = time.perf_counter()
        order = _epoch_order(seed, epoch, len(windows))
        epoch_losses: list[float] = []
        for chunk_start in range(0, len(order), batch_size):
            step_start = time.perf_counter()
            batch = [windows[i] for i in order[chunk_start : chunk_start + batch_size]]
            views_a, views_b = [], []
            for w in batch:
                rng = rng_for_window(seed, epoch, w.window_id)
                va, vb = make_views(w, augment_cfg, rng)
                views_a.append(va)
                views_b.append(vb)
            xa = torch.as_tensor(np.stack(views_a), dtype=model.dtype)
            xb = torch.as_tensor(np.stack(views_b), dtype=model.dtype)

            lr = cosine_restart_lr(
                global_step,
                optimizer_cfg.learning_rate,
                first_cycle,
                schedule.cycle_mult,
                schedule.min_lr_fraction,
            )
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad()
            za = model.project(model(xa)[1])
            zb = model.project(model(xb)[1])
            loss = contrastive_loss(za, zb, contrastive)
            loss.backward()
            optimizer.step()

            loss_value = float(loss.item())
            epoch_losses.append(loss_value)
            records.append(
                {
                    "step": global_step,
                    "epoch": epoch,
                    "loss": loss_value,
                    "lr": lr,
                    "wall_ms": (time.perf_counter() - step_start) * 1e3,
                }
            )
            global_step += 1
        records.append(
            {
                "epoch": epoch,
                "summary": True,
                "mean_loss": float(np.mean(epoch_losses)),
                "steps": len(epoch_losses),
                "wall_ms": (time.perf_counter() - epoch_start) * 1e3,
            }
        )
        log.info("epoch %d/%d mean loss %.4f", epoch, run_cfg.epochs, np.mean(epoch_losses))
        if checkpoint_dir is not None:
            save_checkpoint(model, Path(checkpoint_dir) / f"epoch_{epoch:03d}.ufck")
    if checkpoint_dir is not None:
        save_checkpoint(model, Path(checkpoint_dir) / "checkpoint.ufck")
    if log_path is not None:
        write_jsonl(records, log_path)
    return model, records


def write_jsonl(records: Sequence[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")
