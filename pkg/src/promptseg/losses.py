"""Training objectives and the prompt-tuning loop.

Per prompt branch k: Tversky loss (asymmetric FP/FN weights) plus per-pixel
cross-entropy on its own augmented view of the batch.  A diversity penalty,
the summed pairwise cosine similarity of the generated prompts, pushes the K
prompts apart.  Only the prompt-side parameters are ever optimized.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np
import torch

from .augment import augment
from .errors import (
    InvalidArgumentError,
    NumericError,
    TrainingFailureError,
)


@dataclass(frozen=True)
class BranchConfig:
    alpha: float = 0.5
    beta: float = 0.5
    aug_strength: str = "light"

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise InvalidArgumentError("alpha and beta must be > 0")


#: FP/FN weights and per-branch augmentation tiers used by default (K=3).
DEFAULT_BRANCHES = (
    BranchConfig(0.5, 0.5, "light"),
    BranchConfig(0.7, 0.3, "medium"),
    BranchConfig(0.3, 0.7, "heavy"),
)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise InvalidArgumentError("loss weights must be >= 0")


def _check_pred_target(probs, target):
    if probs.ndim == 3:
        probs = probs[None]
    if target.ndim == 2:
        target = target[None]
    if probs.shape[0] != target.shape[0] or probs.shape[2:] != target.shape[1:]:
        raise InvalidArgumentError(
            f"prediction {tuple(probs.shape)} and target {tuple(target.shape)} disagree"
        )
    return probs, target


def tversky_index(probs, target, alpha, beta, eps=1e-5):
    """Soft Tversky index over foreground channels: TP/(TP + a*FP + b*FN).

    Soft counts are summed over all non-background channels (micro
    aggregation).  alpha = beta = 0.5 recovers soft Dice.
    """
    if eps <= 0:
        raise InvalidArgumentError("eps must be > 0")
    probs, target = _check_pred_target(probs, target)
    num_classes = probs.shape[1]
    onehot = torch.nn.functional.one_hot(target.long(), num_classes)
    onehot = onehot.permute(0, 3, 1, 2).to(probs.dtype)
    p_fg, y_fg = probs[:, 1:], onehot[:, 1:]
    tp = (p_fg * y_fg).sum()
    fp = (p_fg * (1 - y_fg)).sum()
    fn = ((1 - p_fg) * y_fg).sum()
    return (tp + eps) / (tp + alpha * fp + beta * fn + eps)


def tversky_loss(probs, target, branch: BranchConfig, eps=1e-5):
    return 1.0 - tversky_index(probs, target, branch.alpha, branch.beta, eps)


def cross_entropy(probs, target, floor=1e-12):
    """Per-pixel mean cross-entropy from probabilities."""
    probs, target = _check_pred_target(probs, target)
    logp = torch.log(probs.clamp_min(floor))
    return torch.nn.functional.nll_loss(logp, target.long())


def diversity_loss(prompts):
    """Sum of pairwise cosine similarities over K generated prompts."""
    prompts = list(prompts)
    if len(prompts) < 2:
        raise InvalidArgumentError("diversity loss needs at least 2 prompts")
    flat = []
    for k, p in enumerate(prompts, start=1):
        v = p.reshape(-1)
        if float(v.detach().norm()) == 0.0:
            raise NumericError(f"prompt {k} has zero norm")
        flat.append(v)
    total = flat[0].new_zeros(())
    for i in range(len(flat)):
        for j in range(i + 1, len(flat)):
            total = total + torch.nn.functional.cosine_similarity(
                flat[i], flat[j], dim=0
            )
    return total


def _branch_seed(seed, k, index):
    return (int(seed) * 1_000_003 + k * 9_176 + index * 31) % (2**31)


def total_loss(model, batch, weights: LossWeights, branches, seed):
    """Combined objective: sum_k (l1*Tversky_k + l2*CE_k) + l3*diversity.

    batch is a list of (image [1,H,W], mask [H,W]) numpy pairs.  Branch k
    trains on its own augmented view of the batch.  Returns the scalar loss
    tensor and a per-term breakdown of floats.
    """
    batch = list(batch)
    if not batch:
        raise InvalidArgumentError("empty batch")
    branches = list(branches)
    if len(branches) != model.num_prompts:
        raise InvalidArgumentError("need one branch config per prompt")

    dtype = next(model.tunable_named_parameters())[1].dtype
    total = None
    breakdown = {}
    for k, branch in enumerate(branches, start=1):
        images, masks = [], []
        for idx, (image, mask) in enumerate(batch):
            ai, am = augment(image, mask, branch, _branch_seed(seed, k, idx))
            images.append(ai)
            masks.append(am)
        x = torch.from_numpy(np.stack(images)).to(dtype)
        y = torch.from_numpy(np.stack(masks)).long()
        probs = model.forward_one(x, k)
        lt = tversky_loss(probs, y, branch)
        lce = cross_entropy(probs, y)
        term = weights.lambda1 * lt + weights.lambda2 * lce
        total = term if total is None else total + term
        breakdown[f"tversky_{k}"] = float(lt.detach())
        breakdown[f"ce_{k}"] = float(lce.detach())

    ldiv = diversity_loss(model.prompt_set.prompts())
    total = total + weights.lambda3 * ldiv
    breakdown["diversity"] = float(ldiv.detach())
    breakdown["total"] = float(total.detach())
    if not torch.isfinite(total):
        raise TrainingFailureError("non-finite total loss",
                                   diagnostics=breakdown)
    return total, breakdown


def prompt_tune(model, labeled_cases, epochs, lr=0.01, weights=LossWeights(),
                branches=DEFAULT_BRANCHES, seed=0, batch_size=4,
                momentum=0.9, poly_power=0.9):
    """Optimize the prompt-side parameters only; SGD momentum + poly decay.

    labeled_cases is a list of (image, mask) numpy pairs.  Returns the model
    and a per-epoch training log (list of dicts).
    """
    cases = list(labeled_cases)
    if not cases:
        raise InvalidArgumentError("prompt_tune needs at least one labeled case")
    params = model.tunable_parameter_tensors()
    opt = torch.optim.SGD(params, lr=lr, momentum=momentum)
    rng = np.random.default_rng(seed)
    log = []
    step_seed = int(seed)
    for epoch in range(epochs):
        for group in opt.param_groups:
            group["lr"] = lr * (1 - epoch / max(1, epochs)) ** poly_power
        order = rng.permutation(len(cases))
        sums, count = {}, 0
        t0 = time.perf_counter()
        for start in range(0, len(order), batch_size):
            batch = [cases[i] for i in order[start:start + batch_size]]
            step_seed += 1
            loss, breakdown = total_loss(model, batch, weights, branches,
                                         seed=step_seed)
            opt.zero_grad()
            loss.backward()
            opt.step()
            for key, value in breakdown.items():
                sums[key] = sums.get(key, 0.0) + value * len(batch)
            count += len(batch)
        entry = {"epoch": epoch, "lr": opt.param_groups[0]["lr"],
                 "wall_time": time.perf_counter() - t0}
        entry.update({k: v / count for k, v in sums.items()})
        log.append(entry)
    return model, log


def write_training_log(log, path):
    """Persist a prompt_tune log as CSV."""
    if not log:
        return
    keys = sorted(set().union(*(entry.keys() for entry in log)))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(log)
