"""Experiment orchestration: pretrain -> diversity-select -> prompt-tune ->
uncertainty-select -> re-tune -> evaluate, across strategies and seeds.

All strategies within a seed share the same step-0 selection and the same
post-step-0 checkpoint, so step 1 is the only varying factor.  Every stage is
seeded deterministically from (config, seed); two runs of the same config
produce byte-identical selections, metrics CSVs, and report.json.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import time
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import selection as sel
from .backbone import (
    BackboneConfig,
    build_backbone,
    load_backbone_checkpoint,
    pretrain,
    save_backbone_checkpoint,
)
from .errors import InvalidConfigError
from .losses import BranchConfig, LossWeights, prompt_tune, write_training_log
from .metrics import aggregate, case_metrics, write_percase_csv
from .prompting import (
    PromptedModel,
    init_prompt_set,
    save_prompted_checkpoint,
)
from .synth import (
    DEFAULT_PROFILE,
    LesionProfile,
    build_pool,
    case_seed_stream,
    foreground_prior,
    gen_downstream_case,
    gen_pretrain_case,
)

_TESLA_VARIANTS = ("tesla", "tesla_no_sd", "tesla_no_sg")


def derive_seed(*parts):
    """Stable sub-seed from integer parts (np.SeedSequence mixing)."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0] % 2**31)


@dataclass
class ExperimentConfig:
    pool_size: int = 60
    test_size: int = 30
    budget_step0: int = 8
    budget_step1: int = 8
    num_prompts: int = 3
    image_size: int = 64
    num_scales: int = 3
    base_channels: int = 16
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    branch_alphas: tuple = (0.5, 0.7, 0.3)
    branch_betas: tuple = (0.5, 0.3, 0.7)
    branch_strengths: tuple = ("light", "medium", "heavy")
    strategies: tuple = ("tesla", "tesla_no_sd", "tesla_no_sg", "random")
    seeds: tuple = (0, 1, 2)
    lesion_frequencies: tuple = DEFAULT_PROFILE.frequencies
    pretrain_pool: int = 80
    pretrain_epochs: int = 20
    pretrain_lr: float = 1e-3
    tune_epochs: int = 30
    tune_lr: float = 0.01
    batch_size: int = 4
    out_dir: str = "runs/default"
    cache_dir: str = ""

    def __post_init__(self):
        if self.budget_step0 < 1 or self.budget_step1 < 1:
            raise InvalidConfigError("budgets must be >= 1")
        if self.budget_step0 + self.budget_step1 > self.pool_size:
            raise InvalidConfigError("budgets exceed pool size")
        if not self.seeds:
            raise InvalidConfigError("seed list must be nonempty")
        if self.num_prompts < 2:
            raise InvalidConfigError("num_prompts must be >= 2")
        for s in self.strategies:
            if s not in sel.STRATEGIES:
                raise InvalidConfigError(f"unknown strategy {s!r}")
        if not (len(self.branch_alphas) == len(self.branch_betas)
                == len(self.branch_strengths) == self.num_prompts):
            raise InvalidConfigError(
                "branch_alphas/betas/strengths must have num_prompts entries"
            )
        if self.image_size % 2**self.num_scales:
            raise InvalidConfigError("image_size must be divisible by 2^num_scales")

    def profile(self):
        if tuple(self.lesion_frequencies) == DEFAULT_PROFILE.frequencies:
            return DEFAULT_PROFILE
        n = len(self.lesion_frequencies)
        return LesionProfile(
            frequencies=tuple(self.lesion_frequencies),
            radius_ranges=tuple(DEFAULT_PROFILE.radius_ranges[i % 3] for i in range(n)),
            contrasts=tuple(DEFAULT_PROFILE.contrasts[i % 3] for i in range(n)),
        )

    def branches(self):
        return tuple(
            BranchConfig(a, b, s)
            for a, b, s in zip(self.branch_alphas, self.branch_betas,
                               self.branch_strengths)
        )

    def loss_weights(self):
        return LossWeights(self.lambda1, self.lambda2, self.lambda3)

    def backbone_config(self):
        return BackboneConfig(num_scales=self.num_scales,
                              base_channels=self.base_channels)

    def to_mapping(self):
        d = dataclasses.asdict(self)
        return {k: _render_value(v) for k, v in d.items()}


def _render_value(v):
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_value(raw, current):
    raw = raw.strip()
    if isinstance(current, tuple):
        items = [x.strip() for x in raw.split(",") if x.strip()]
        elem = current[0] if current else raw
        if isinstance(elem, bool):
            return tuple(x.lower() in ("1", "true", "yes") for x in items)
        if isinstance(elem, int):
            return tuple(int(x) for x in items)
        if isinstance(elem, float):
            return tuple(float(x) for x in items)
        return tuple(items)
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def config_from_mapping(mapping):
    """Build a config from flat string key/values (file or CLI overrides)."""
    base = {f.name: f.default if f.default is not dataclasses.MISSING
            else f.default_factory()
            for f in dataclasses.fields(ExperimentConfig)}
    kwargs = {}
    for key, raw in mapping.items():
        if key not in base:
            raise InvalidConfigError(f"unknown config key {key!r}")
        try:
            kwargs[key] = _parse_value(raw, base[key])
        except (ValueError, TypeError) as exc:
            raise InvalidConfigError(f"bad value for {key!r}: {raw!r}") from exc
    return ExperimentConfig(**kwargs)


def read_config_file(path):
    """Flat key=value config file; '#' starts a comment."""
    mapping = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        mapping[key.strip()] = value.strip()
    return mapping


def load_config(path=None, overrides=None):
    mapping = read_config_file(path) if path else {}
    mapping.update(overrides or {})
    return config_from_mapping(mapping)


def write_config_echo(config, path):
    lines = [f"{k} = {v}" for k, v in sorted(config.to_mapping().items())]
    Path(path).write_text("\n".join(lines) + "\n")


def label_oracle(pool, indices):
    """Reveal masks for the given indices; re-labeling is an error."""
    pool.label(indices)
    return pool


def _pretrain_cache_key(config, seed):
    payload = json.dumps({
        "backbone": dataclasses.asdict(config.backbone_config()),
        "pretrain_pool": config.pretrain_pool,
        "pretrain_epochs": config.pretrain_epochs,
        "pretrain_lr": config.pretrain_lr,
        "image_size": config.image_size,
        "seed": seed,
    }, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def pretrain_for_seed(config, seed, cache_dir):
    """Pretrained frozen backbone for one seed, cached on disk."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"pretrain_{_pretrain_cache_key(config, seed)}.pt"
    if path.exists():
        return load_backbone_checkpoint(path), path
    size = (config.image_size, config.image_size)
    cases = [
        gen_pretrain_case(s, size=size)
        for s in case_seed_stream(derive_seed(seed, 101), config.pretrain_pool)
    ]
    backbone = build_backbone(config.backbone_config(), seed=derive_seed(seed, 102))
    frozen = pretrain(backbone, cases, epochs=config.pretrain_epochs,
                      lr=config.pretrain_lr, seed=derive_seed(seed, 103))
    save_backbone_checkpoint(path, frozen)
    return frozen, path


def _write_selection_rows(path, pool, indices, step, strategy, seed, append):
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if not append:
            writer.writerow(["case_id", "case_index", "step", "strategy", "seed"])
        for i in indices:
            writer.writerow([pool.cases[i].case_id, i, step, strategy, seed])


def _evaluate(model, test_cases):
    results = []
    with torch.no_grad():
        for case in test_cases:
            probs = model.forward_one(case.image, 1)
            pred = probs.argmax(dim=1)[0].numpy()
            results.append((case.case_id, case_metrics(pred, case.mask)))
    return results


def _strategy_model(frozen, prior, config, seed, state):
    prompt_set = init_prompt_set(prior, config.num_prompts,
                                 derive_seed(seed, 104))
    model = PromptedModel(frozen, prompt_set, len(config.lesion_frequencies) + 1,
                          seed=derive_seed(seed, 105))
    model.load_tunable_state_dict(copy.deepcopy(state))
    return model


def _run_seed(config, seed, run_dir, appends):
    size = (config.image_size, config.image_size)
    frozen, pretrain_path = pretrain_for_seed(
        config, seed, config.cache_dir or run_dir / "checkpoints"
    )
    profile = config.profile()
    pool = build_pool(config.pool_size, derive_seed(seed, 201), profile=profile,
                      size=size)
    test_cases = [
        gen_downstream_case(s, size=size, profile=profile)
        for s in case_seed_stream(derive_seed(seed, 202), config.test_size, salt=1)
    ]
    features = [frozen.extract_features(c.image) for c in pool.cases]

    step0 = sel.kcenter_greedy(features, config.budget_step0,
                               seed=derive_seed(seed, 203))
    label_oracle(pool, step0)
    _write_selection_rows(run_dir / "selections" / "step0.csv", pool, step0,
                          0, "kcenter", seed, appends.setdefault("sel0", False))
    appends["sel0"] = True

    half = (config.image_size // 2, config.image_size // 2)
    prior = foreground_prior([pool.visible_mask(i) for i in sorted(pool.labeled)],
                             half)
    prompt_set = init_prompt_set(prior, config.num_prompts, derive_seed(seed, 104))
    model = PromptedModel(frozen, prompt_set, profile.num_classes,
                          seed=derive_seed(seed, 105))
    model, log0 = prompt_tune(
        model, pool.labeled_items(), epochs=config.tune_epochs,
        lr=config.tune_lr, weights=config.loss_weights(),
        branches=config.branches(), seed=derive_seed(seed, 106),
        batch_size=config.batch_size,
    )
    write_training_log(log0, run_dir / "checkpoints" / f"tune_step0_seed{seed}.csv")
    ckpt_path = run_dir / "checkpoints" / f"post_step0_seed{seed}.pt"
    save_prompted_checkpoint(ckpt_path, model)
    post_step0_state = copy.deepcopy(model.tunable_state_dict())

    need_uncertainty = any(s in _TESLA_VARIANTS for s in config.strategies)
    raw_indices, raw = (None, None)
    if need_uncertainty:
        raw_indices, raw = sel.raw_scores(model, pool)

    seed_report = {
        "pretrain": {"val_dice": frozen.metadata.get("val_dice"),
                     "checkpoint": pretrain_path.name},
        "step0": {"selected_case_ids": [pool.cases[i].case_id for i in step0]},
        "strategies": {},
    }

    for strategy in config.strategies:
        pool_s = pool.clone()
        model_s = _strategy_model(frozen, prior, config, seed, post_step0_state)
        degenerate = None
        if strategy in _TESLA_VARIANTS:
            records, degenerate = sel.ablation_records(raw, strategy,
                                                       case_indices=raw_indices)
            chosen = sel.select_batch(records, config.budget_step1)
        else:
            cfg = sel.SelectionConfig(
                budget_B=config.budget_step1, strategy=strategy,
                seed=derive_seed(seed, 301, sel.STRATEGIES.index(strategy)),
            )
            arg = model_s if strategy == "entropy" else features
            chosen = sel.baseline_select(pool_s, arg, cfg)
            records = [sel.ScoreRecord(i, 0.0, 0.0, 0.0)
                       for i in pool_s.unlabeled_indices()]
        sel.write_scores_csv(run_dir / "scores" / "step1.csv", pool_s, records,
                             chosen, strategy, seed, step=1,
                             append=appends.setdefault("scores1", False))
        appends["scores1"] = True
        label_oracle(pool_s, chosen)
        _write_selection_rows(run_dir / "selections" / "step1.csv", pool_s,
                              chosen, 1, strategy, seed,
                              appends.setdefault("sel1", False))
        appends["sel1"] = True

        model_s, _ = prompt_tune(
            model_s, pool_s.labeled_items(), epochs=config.tune_epochs,
            lr=config.tune_lr, weights=config.loss_weights(),
            branches=config.branches(), seed=derive_seed(seed, 302),
            batch_size=config.batch_size,
        )
        results = _evaluate(model_s, test_cases)
        write_percase_csv(
            run_dir / "metrics" / "percase.csv",
            [(cid, strategy, seed, m) for cid, m in results],
            append=appends.setdefault("percase", False),
        )
        appends["percase"] = True
        seed_report["strategies"][strategy] = {
            "selected_case_ids": [pool_s.cases[i].case_id for i in chosen],
            "metrics": aggregate([m for _, m in results]),
            "degenerate_scores": degenerate,
        }
    seed_report["tunable_parameters"] = model.parameter_counts()
    return seed_report


def run_pipeline(config: ExperimentConfig):
    """Execute the full workflow; returns the report written to report.json.

    A stage failure aborts that seed with a diagnostic record; other seeds
    continue.  Wall-clock goes to timing.json so report.json stays
    reproducible.
    """
    run_dir = Path(config.out_dir)
    for sub in ("checkpoints", "selections", "scores", "metrics", "plots"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    write_config_echo(config, run_dir / "config.echo")

    report = {"config": config.to_mapping(), "seeds": {}, "failures": {}}
    timing = {}
    appends = {}
    for seed in config.seeds:
        t0 = time.perf_counter()
        try:
            report["seeds"][str(seed)] = _run_seed(config, seed, run_dir, appends)
        except Exception as exc:  # noqa: BLE001 - per-seed isolation
            report["failures"][str(seed)] = {
                "error": f"{type(exc).__name__}: {exc}",
                "traceback": traceback.format_exc(),
            }
        timing[str(seed)] = time.perf_counter() - t0

    with open(run_dir / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    with open(run_dir / "timing.json", "w") as fh:
        json.dump(timing, fh, indent=2, sort_keys=True)
    return report


def compare_strategies(report, run_dir=None):
    """Per-strategy mean +/- std over seeds; emits CSV and plot files.

    report may be a report dict or a run directory containing report.json.
    Strategies listed in the config but missing from every seed produce a
    flagged gap row.
    """
    if not isinstance(report, dict):
        run_dir = Path(report)
        with open(run_dir / "report.json") as fh:
            report = json.load(fh)
    strategies = report["config"]["strategies"].split(",")
    metric_names = ["dice", "pixel_precision", "pixel_recall",
                    "lesion_precision", "lesion_recall", "grand_mean"]
    rows, gaps = [], []
    for strategy in strategies:
        values = {m: [] for m in metric_names}
        for seed_report in report["seeds"].values():
            entry = seed_report["strategies"].get(strategy)
            if entry is None:
                continue
            for m in metric_names:
                values[m].append(entry["metrics"][m])
        if not values["grand_mean"]:
            gaps.append(strategy)
            rows.append({"strategy": strategy, "n_seeds": 0,
                         **{f"{m}_mean": float("nan") for m in metric_names},
                         **{f"{m}_std": float("nan") for m in metric_names}})
            continue
        row = {"strategy": strategy, "n_seeds": len(values["grand_mean"])}
        for m in metric_names:
            row[f"{m}_mean"] = float(np.mean(values[m]))
            row[f"{m}_std"] = float(np.std(values[m]))
        rows.append(row)

    paths = {}
    if run_dir is not None:
        run_dir = Path(run_dir)
        csv_path = run_dir / "comparison.csv"
        fieldnames = list(rows[0].keys())
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fieldnames)
            writer.writeheader()
            writer.writerows(rows)
        paths["csv"] = csv_path
        paths.update(_emit_plots(rows, run_dir))
    return {"rows": rows, "gaps": gaps, "paths": {k: str(v) for k, v in paths.items()}}


def _emit_plots(rows, run_dir):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plots_dir = Path(run_dir) / "plots"
    plots_dir.mkdir(exist_ok=True)
    paths = {}

    present = [r for r in rows if r["n_seeds"]]
    if present:
        fig, ax = plt.subplots(figsize=(7, 4))
        names = [r["strategy"] for r in present]
        means = [r["grand_mean_mean"] for r in present]
        stds = [r["grand_mean_std"] for r in present]
        ax.bar(names, means, yerr=stds, capsize=4, color="steelblue")
        ax.set_ylabel("grand mean of the five metrics")
        ax.set_title("strategy comparison")
        fig.tight_layout()
        path = plots_dir / "strategy_comparison.png"
        fig.savefig(path)
        plt.close(fig)
        paths["comparison_plot"] = path

    scores_csv = Path(run_dir) / "scores" / "step1.csv"
    if scores_csv.exists():
        by_strategy = {}
        with open(scores_csv, newline="") as fh:
            for row in csv.DictReader(fh):
                by_strategy.setdefault(row["strategy"], []).append(float(row["s"]))
        fig, ax = plt.subplots(figsize=(7, 4))
        for strategy, scores in sorted(by_strategy.items()):
            ax.hist(scores, bins=20, alpha=0.5, label=strategy)
        ax.set_xlabel("combined uncertainty score")
        ax.set_ylabel("count")
        ax.legend()
        fig.tight_layout()
        path = plots_dir / "score_histograms.png"
        fig.savefig(path)
        plt.close(fig)
        paths["histogram_plot"] = path
    return paths
