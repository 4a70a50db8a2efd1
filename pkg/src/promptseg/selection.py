"""Acquisition strategies: two-step uncertainty selection plus baselines.

Step 0 picks a diverse initial batch with greedy k-center on task-agnostic
features.  Step 1 scores each unlabeled case by (a) the divergence of its K
prompt-conditioned predictions and (b) the gradient norm of the mean
prediction's entropy w.r.t. the prompt parameters, then selects the top
budget by the normalized product of the two.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidArgumentError, NumericError

STRATEGIES = ("tesla", "tesla_no_sd", "tesla_no_sg", "random", "entropy",
              "coreset")

_PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ScoreRecord:
    case_index: int
    s_d: float
    s_g: float
    s: float


@dataclass(frozen=True)
class SelectionConfig:
    budget_B: int
    strategy: str
    seed: int = 0

    def __post_init__(self):
        if self.budget_B < 1:
            raise InvalidArgumentError("budget must be >= 1")
        if self.strategy not in STRATEGIES:
            raise InvalidArgumentError(f"unknown strategy {self.strategy!r}")


def _as_matrix(features):
    X = np.asarray([np.asarray(f, dtype=np.float64).ravel() for f in features])
    if X.ndim != 2:
        raise InvalidArgumentError("features must share one dimension")
    return X


def kcenter_greedy(features, budget, seed=0, initial=()):
    """Greedy k-center (2-approximation) over Euclidean feature distances.

    Without initial centers, the first pick is the point farthest from the
    feature centroid (ties break to the lowest index).  With initial centers
    (already-labeled samples), selection starts from their coverage and never
    returns an initial index.
    """
    X = _as_matrix(features)
    n = X.shape[0]
    initial = list(initial)
    if budget > n - len(initial):
        raise InvalidArgumentError("budget exceeds available pool")
    selected = []
    if initial:
        min_dist = np.min(
            [np.linalg.norm(X - X[i], axis=1) for i in initial], axis=0
        )
    else:
        first = int(np.argmax(np.linalg.norm(X - X.mean(axis=0), axis=1)))
        selected.append(first)
        min_dist = np.linalg.norm(X - X[first], axis=1)
    blocked = set(initial) | set(selected)
    while len(selected) < budget:
        cand = min_dist.copy()
        cand[list(blocked)] = -np.inf
        nxt = int(np.argmax(cand))
        selected.append(nxt)
        blocked.add(nxt)
        min_dist = np.minimum(min_dist, np.linalg.norm(X - X[nxt], axis=1))
    return selected


def covering_radius(features, centers):
    """Max distance from any point to its nearest center."""
    X = _as_matrix(features)
    dists = np.min([np.linalg.norm(X - X[c], axis=1) for c in centers], axis=0)
    return float(dists.max())


def _check_simplex(pred, tol=1e-3):
    sums = pred.sum(axis=0)
    if np.any(pred < -tol) or np.any(np.abs(sums - 1.0) > tol):
        raise InvalidArgumentError("predictions are off the probability simplex")


def divergence_score(preds):
    """Disagreement of K predictions: D = sum_k KL(Y_k || Y_mean), per pixel.

    preds are K arrays [C, H, W] on the per-pixel simplex.  Returns the
    spatial mean of D and the map D itself.
    """
    preds = [np.asarray(p, dtype=np.float64) for p in preds]
    if len(preds) < 2:
        raise InvalidArgumentError("divergence needs K >= 2 predictions")
    shape = preds[0].shape
    for p in preds:
        if p.shape != shape:
            raise InvalidArgumentError("prediction shapes disagree")
        _check_simplex(p)
    stack = np.stack(preds)  # [K, C, H, W]
    mean = stack.mean(axis=0)
    log_ratio = (np.log(np.clip(stack, _PROB_FLOOR, None))
                 - np.log(np.clip(mean, _PROB_FLOOR, None)))
    D = np.clip((stack * log_ratio).sum(axis=(0, 1)), 0.0, None)
    return float(D.mean()), D


def gradient_score(model, x):
    """L2 norm of the prompt-parameter gradient of the mean-prediction entropy.

    Entropy is summed over pixels and classes; the norm is summed over the
    tunable parameter tensors.  Frozen parameters receive no gradient.
    """
    preds = model.forward_all(x)
    mean = torch.stack(preds).mean(dim=0)
    entropy = -(mean * torch.log(mean.clamp_min(_PROB_FLOOR))).sum()
    params = model.tunable_parameter_tensors()
    grads = torch.autograd.grad(entropy, params, allow_unused=True)
    total = 0.0
    for g in grads:
        if g is None:
            continue
        if not torch.isfinite(g).all():
            raise NumericError("non-finite entropy gradient")
        total += float(g.norm(p=2))
    return total


def combined_scores(pool_scores, case_indices=None):
    """Max-normalize each score column and multiply.

    pool_scores is a list of (s_d, s_g) pairs.  An all-zero column degrades
    the product; the combined score then falls back to the other column alone
    and the returned flag names the degenerate column(s).
    """
    pool_scores = list(pool_scores)
    if not pool_scores:
        raise InvalidArgumentError("no scores to combine")
    if case_indices is None:
        case_indices = list(range(len(pool_scores)))
    sd = np.asarray([s[0] for s in pool_scores], dtype=np.float64)
    sg = np.asarray([s[1] for s in pool_scores], dtype=np.float64)
    if np.any(sd < 0) or np.any(sg < 0):
        raise InvalidArgumentError("scores must be >= 0")
    max_d, max_g = sd.max(), sg.max()
    degenerate = []
    nd = sd / max_d if max_d > 0 else np.ones_like(sd)
    ng = sg / max_g if max_g > 0 else np.ones_like(sg)
    if max_d <= 0:
        degenerate.append("s_d")
    if max_g <= 0:
        degenerate.append("s_g")
    if len(degenerate) == 2:
        s = np.zeros_like(sd)
    else:
        s = nd * ng
    records = [
        ScoreRecord(case_index=int(i), s_d=float(a), s_g=float(b), s=float(c))
        for i, a, b, c in zip(case_indices, sd, sg, s)
    ]
    return records, (",".join(degenerate) or None)


def ablation_records(pool_scores, variant, case_indices=None):
    """Score records for the single-column ablations.

    tesla_no_sd ranks by normalized s_g only; tesla_no_sg by normalized s_d.
    """
    records, degenerate = combined_scores(pool_scores, case_indices)
    if variant == "tesla":
        return records, degenerate
    sd = np.asarray([r.s_d for r in records])
    sg = np.asarray([r.s_g for r in records])
    if variant == "tesla_no_sd":
        col = sg / sg.max() if sg.max() > 0 else np.zeros_like(sg)
    elif variant == "tesla_no_sg":
        col = sd / sd.max() if sd.max() > 0 else np.zeros_like(sd)
    else:
        raise InvalidArgumentError(f"unknown variant {variant!r}")
    return [
        ScoreRecord(r.case_index, r.s_d, r.s_g, float(c))
        for r, c in zip(records, col)
    ], degenerate


def select_batch(records, budget):
    """Indices of the budget records with the largest combined score.

    Ties break toward the lower case index; deterministic.
    """
    records = list(records)
    if budget > len(records):
        raise InvalidArgumentError("budget exceeds record count")
    ranked = sorted(records, key=lambda r: (-r.s, r.case_index))
    return [r.case_index for r in ranked[:budget]]


def _mean_entropy(model, image):
    with torch.no_grad():
        preds = model.forward_all(image)
        mean = torch.stack(preds).mean(dim=0)
        ent = -(mean * torch.log(mean.clamp_min(_PROB_FLOOR))).sum(dim=1)
    return float(ent.mean())


def raw_scores(model, pool):
    """(s_d, s_g) per unlabeled pool index; one pass, reused by all variants."""
    indices = pool.unlabeled_indices()
    raw = []
    for i in indices:
        with torch.no_grad():
            preds = [p[0].numpy() for p in model.forward_all(pool.cases[i].image)]
        sd, _ = divergence_score(preds)
        sg = gradient_score(model, pool.cases[i].image)
        raw.append((sd, sg))
    return indices, raw


def score_unlabeled(model, pool, variant="tesla"):
    """Combined score records for every unlabeled pool index."""
    indices, raw = raw_scores(model, pool)
    return ablation_records(raw, variant, case_indices=indices)


def baseline_select(pool, model_or_features, config: SelectionConfig):
    """random / entropy / coreset step-1 baselines; returns selected indices."""
    unlabeled = pool.unlabeled_indices()
    if config.budget_B > len(unlabeled):
        raise InvalidArgumentError("budget exceeds unlabeled count")
    if config.strategy == "random":
        rng = np.random.default_rng(config.seed)
        picks = rng.choice(len(unlabeled), size=config.budget_B, replace=False)
        return [unlabeled[i] for i in picks]
    if config.strategy == "entropy":
        scores = [
            _mean_entropy(model_or_features, pool.cases[i].image)
            for i in unlabeled
        ]
        ranked = sorted(zip(scores, unlabeled), key=lambda t: (-t[0], t[1]))
        return [i for _, i in ranked[:config.budget_B]]
    if config.strategy == "coreset":
        return kcenter_greedy(model_or_features, config.budget_B,
                              seed=config.seed, initial=sorted(pool.labeled))
    raise InvalidArgumentError(f"{config.strategy!r} is not a baseline strategy")


def write_scores_csv(path, pool, records, selected, strategy, seed, step,
                     append=False):
    """Persist per-sample scores: case_id, s_d, s_g, s, selected, strategy, seed."""
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if not append:
            writer.writerow(["case_id", "case_index", "step", "s_d", "s_g",
                             "s", "selected", "strategy", "seed"])
        chosen = set(selected)
        for r in records:
            writer.writerow([
                pool.cases[r.case_index].case_id, r.case_index, step,
                f"{r.s_d:.10g}", f"{r.s_g:.10g}", f"{r.s:.10g}",
                int(r.case_index in chosen), strategy, seed,
            ])
