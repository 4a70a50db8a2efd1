"""Segmentation evaluation: pixel-wise Dice/precision/recall per case and
lesion-wise precision/recall via connected-component matching.

Masks are binarized to foreground (any class > 0) for both metric families.
Components use 4-connectivity.  A predicted lesion counts as a true positive
if its best Dice against any ground-truth lesion exceeds the threshold
(strictly); a ground-truth lesion counts as detected if any prediction
matches it.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np
import scipy.ndimage as ndi

from .errors import InvalidArgumentError

FOUR_CONNECTIVITY = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])

RATE_FIELDS = ("dice", "pixel_precision", "pixel_recall",
               "lesion_precision", "lesion_recall")


@dataclass(frozen=True)
class CaseMetrics:
    dice: float
    pixel_precision: float
    pixel_recall: float
    lesion_precision: float
    lesion_recall: float
    n_pred_lesions: int
    n_gt_lesions: int

    @property
    def grand_mean(self):
        return float(np.mean([getattr(self, f) for f in RATE_FIELDS]))


def _binarize_pair(pred_mask, gt_mask):
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise InvalidArgumentError(
            f"mask shapes disagree: {pred.shape} vs {gt.shape}"
        )
    return pred > 0, gt > 0


def dice_per_case(pred_mask, gt_mask):
    """Foreground Dice 2|P∩G|/(|P|+|G|); both empty -> 1.0 by convention."""
    pred, gt = _binarize_pair(pred_mask, gt_mask)
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / denom


def lesion_instances(mask):
    """4-connected components of the binarized foreground, as boolean masks."""
    fg = np.asarray(mask) > 0
    labels, n = ndi.label(fg, structure=FOUR_CONNECTIVITY)
    return [labels == i for i in range(1, n + 1)]


def _instance_dice(a, b):
    denom = int(a.sum()) + int(b.sum())
    return 2.0 * int(np.logical_and(a, b).sum()) / denom if denom else 1.0


def lesion_pr(pred_mask, gt_mask, threshold=0.2):
    """Lesion-wise precision/recall at a strict instance-Dice threshold.

    Returns (precision, recall, detail) where detail carries the instance
    Dice matrix and per-instance match flags.
    """
    pred_inst = lesion_instances(pred_mask)
    gt_inst = lesion_instances(gt_mask)
    n_pred, n_gt = len(pred_inst), len(gt_inst)
    dice_matrix = np.array(
        [[_instance_dice(p, g) for g in gt_inst] for p in pred_inst]
    ).reshape(n_pred, n_gt)
    pred_matched = [bool((dice_matrix[i] > threshold).any()) if n_gt else False
                    for i in range(n_pred)]
    gt_matched = [bool((dice_matrix[:, j] > threshold).any()) if n_pred else False
                  for j in range(n_gt)]
    precision = sum(pred_matched) / n_pred if n_pred else 1.0
    recall = sum(gt_matched) / n_gt if n_gt else 1.0
    detail = {"dice_matrix": dice_matrix, "pred_matched": pred_matched,
              "gt_matched": gt_matched}
    return precision, recall, detail


def _pixel_pr(pred, gt):
    tp = int(np.logical_and(pred, gt).sum())
    n_pred, n_gt = int(pred.sum()), int(gt.sum())
    precision = tp / n_pred if n_pred else 1.0
    recall = tp / n_gt if n_gt else 1.0
    return precision, recall


def case_metrics(pred_mask, gt_mask, threshold=0.2) -> CaseMetrics:
    pred, gt = _binarize_pair(pred_mask, gt_mask)
    precision, recall = _pixel_pr(pred, gt)
    lp, lr, detail = lesion_pr(pred_mask, gt_mask, threshold)
    return CaseMetrics(
        dice=dice_per_case(pred_mask, gt_mask),
        pixel_precision=precision,
        pixel_recall=recall,
        lesion_precision=lp,
        lesion_recall=lr,
        n_pred_lesions=len(detail["pred_matched"]),
        n_gt_lesions=len(detail["gt_matched"]),
    )


def aggregate(metrics):
    """Macro-average over cases plus the grand mean of the five rates."""
    metrics = list(metrics)
    if not metrics:
        raise InvalidArgumentError("aggregate needs at least one case")
    summary = {f: float(np.mean([getattr(m, f) for m in metrics]))
               for f in RATE_FIELDS}
    summary["grand_mean"] = float(np.mean([summary[f] for f in RATE_FIELDS]))
    summary["n_cases"] = len(metrics)
    return summary


def write_percase_csv(path, rows, append=False):
    """rows: iterables of (case_id, strategy, seed, CaseMetrics)."""
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if not append:
            writer.writerow(["case_id", "strategy", "seed", *RATE_FIELDS,
                             "n_pred_lesions", "n_gt_lesions", "grand_mean"])
        for case_id, strategy, seed, m in rows:
            writer.writerow([case_id, strategy, seed,
                             *[f"{getattr(m, f):.10g}" for f in RATE_FIELDS],
                             m.n_pred_lesions, m.n_gt_lesions,
                             f"{m.grand_mean:.10g}"])


def write_summary_json(path, summary):
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)


def metrics_as_dict(m: CaseMetrics):
    d = asdict(m)
    d["grand_mean"] = m.grand_mean
    return d
