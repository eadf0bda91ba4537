"""Losses, the training loop, evaluation, the baseline-vs-enhanced
ablation harness, and the finite-difference gradient checker.

The sigmoid head produces three independent binary probability maps for
the nested regions, so the default loss is per-channel binary cross
entropy; ``bce_plus_dice`` adds an equally weighted soft Dice term.
Training is fully deterministic given (seed, config, thread count):
splits, per-epoch shuffles, and per-sample augmentation streams are all
derived from named seeds.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import Adam, Tensor, backward, clip, log, no_grad, trace_activations
from .model import (ModelConfig, NamedParams, check_params_match, init_params,
                    model_forward)
from .metrics import REGIONS, MetricsReport, evaluate_regions
from .augment import AugConfig, augment_sample
from .data import Sample, batch_iter, save_checkpoint, split_dataset
from .seeding import rng_from

LOSSES = ("bce", "bce_plus_dice")

_BCE_EPS = 1e-7


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; the last good checkpoint is preserved."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    epochs: int = 10
    batch_size: int = 4
    lr: float = 1e-3
    loss: str = "bce"
    seed: int = 0
    checkpoint_path: str | None = None
    eval_every: int = 1
    split_ratios: tuple = (0.70, 0.15, 0.15)
    threshold: float = 0.5

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        self.split_ratios = tuple(self.split_ratios)


@dataclass
class TrainHistory:
    """One record per completed epoch; wall time is kept out of the
    canonical JSON so equal seeds reproduce byte-identical files."""

    epochs: list = field(default_factory=list)

    def add(self, epoch: int, train_loss: float, val_dsc: dict | None,
            wall_time_s: float) -> None:
        self.epochs.append({
            "epoch": epoch,
            "train_loss": float(train_loss),
            "val_dsc": val_dsc,
            "wall_time_s": float(wall_time_s),
        })

    def to_json(self, include_timing: bool = False) -> str:
        rows = []
        for rec in self.epochs:
            row = {"epoch": rec["epoch"], "train_loss": rec["train_loss"],
                   "val_dsc": rec["val_dsc"]}
            if include_timing:
                row["wall_time_s"] = rec["wall_time_s"]
            rows.append(row)
        return json.dumps({"epochs": rows}, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _gt_tensor(gt, dtype) -> Tensor:
    if isinstance(gt, Tensor):
        return gt
    if hasattr(gt, "stack"):
        gt = gt.stack()
    return Tensor(np.asarray(gt, dtype=dtype))


def bce_loss(pred: Tensor, gt) -> Tensor:
    """Mean over all pixels and channels of -[g log p + (1-g) log(1-p)].

    Predictions are clamped to [1e-7, 1 - 1e-7] as a numeric guard; the
    sigmoid head keeps them inside (0, 1) already.
    """
    g = _gt_tensor(gt, pred.dtype)
    if g.shape != pred.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {g.shape}")
    p = clip(pred, _BCE_EPS, 1.0 - _BCE_EPS)
    return -(g * log(p) + (1.0 - g) * log(1.0 - p)).mean()


def soft_dice_loss(pred: Tensor, gt) -> Tensor:
    """1 - mean over channels of (2*sum(p*g) + 1) / (sum(p) + sum(g) + 1)."""
    g = _gt_tensor(gt, pred.dtype)
    if g.shape != pred.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {g.shape}")
    spatial = (0, 1) if pred.ndim == 3 else (1, 2)
    inter = (pred * g).sum(axis=spatial)
    sums = pred.sum(axis=spatial) + g.sum(axis=spatial)
    soft = (2.0 * inter + 1.0) / (sums + 1.0)
    return 1.0 - soft.mean()


def combined_loss(pred: Tensor, gt, kind: str) -> Tensor:
    if kind == "bce":
        return bce_loss(pred, gt)
    if kind == "bce_plus_dice":
        return bce_loss(pred, gt) + soft_dice_loss(pred, gt)
    raise ValueError(f"unknown loss {kind!r}")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _stack_batch(samples: list[Sample]):
    images = np.stack([s.image for s in samples])
    gts = np.stack([s.masks.stack() for s in samples]).astype(np.float32)
    return images, gts


def _val_mean_dsc(params, config, samples, threshold) -> dict:
    report = evaluate(params, config, samples, threshold=threshold)
    agg = report.aggregates()
    return {region: agg[region]["dsc_mean"] for region in REGIONS}


def _checkpoint_meta(config: TrainConfig) -> dict:
    return {"model": config.model.to_dict(), "train_seed": config.seed,
            "split_ratios": list(config.split_ratios)}


def train(config: TrainConfig, samples: list[Sample]):
    """Train on the 70/15/15 train split of `samples`.

    Every epoch draws a fresh augmentation transform per training sample
    (stream keyed by (aug seed, sample index, epoch)), then runs
    forward/loss/backward/Adam per batch. Returns (best_state, history,
    split); best_state is the parameter snapshot with the highest mean
    validation DSC (the final state if validation never ran). A non-finite
    loss raises TrainingDivergedError after the last good checkpoint file
    has been kept in place.
    """
    if not samples:
        raise ValueError("dataset is empty")
    by_id = {s.id: s for s in samples}
    split = split_dataset(sorted(by_id), ratios=config.split_ratios, seed=config.seed)
    train_samples = [by_id[i] for i in split.train]
    val_samples = [by_id[i] for i in split.val]
    index_of = {s.id: k for k, s in enumerate(train_samples)}

    params = init_params(config.model, seed=config.seed)
    optimizer = Adam(lr=config.lr)
    history = TrainHistory()
    best_state = params.state_dict()
    best_score = -1.0

    def save_best(state):
        if config.checkpoint_path is not None:
            save_checkpoint(config.checkpoint_path, state, _checkpoint_meta(config))

    if config.epochs == 0:
        save_best(best_state)
        return best_state, history, split

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for batch in batch_iter(train_samples, config.batch_size, config.seed, epoch):
            augmented = [
                augment_sample(s, config.aug,
                               rng_from(config.aug.seed, index_of[s.id], epoch))
                for s in batch
            ]
            images, gts = _stack_batch(augmented)
            pred = model_forward(Tensor(images), params, config.model)
            loss = combined_loss(pred, Tensor(gts), config.loss)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise TrainingDivergedError(
                    f"non-finite loss {loss_value} at epoch {epoch} "
                    f"(batch ids {[s.id for s in batch]})", history=history)
            params.zero_grad()
            grads = backward(loss, dict(params.items()))
            optimizer.step(dict(params.items()), grads)
            losses.append(loss_value)

        val_dsc = None
        if val_samples and epoch % config.eval_every == 0:
            val_dsc = _val_mean_dsc(params, config.model, val_samples, config.threshold)
            score = float(np.mean([val_dsc[r] for r in REGIONS]))
            if score > best_score:
                best_score = score
                best_state = params.state_dict()
                save_best(best_state)
        history.add(epoch, float(np.mean(losses)), val_dsc,
                    time.perf_counter() - t0)

    if best_score < 0.0:
        best_state = params.state_dict()
        save_best(best_state)
    return best_state, history, split


# ---------------------------------------------------------------------------
# Evaluation and prediction
# ---------------------------------------------------------------------------

def params_from_state(config: ModelConfig, state: dict) -> NamedParams:
    params = NamedParams.from_state_dict(state)
    check_params_match(config, params)
    return params


def predict_probs(params: NamedParams, config: ModelConfig, image: np.ndarray) -> np.ndarray:
    with no_grad():
        return model_forward(Tensor(image), params, config).data


def enforce_nesting(hard: np.ndarray) -> np.ndarray:
    """Post-process thresholded (S,S,3) masks so ET <= TC <= WT."""
    out = hard.copy()
    out[:, :, 1] &= out[:, :, 0]
    out[:, :, 2] &= out[:, :, 1]
    return out


def evaluate(params, config: ModelConfig, samples: list[Sample],
             threshold: float = 0.5, hd95_method: str = "directed_max",
             apply_nesting: bool = False) -> MetricsReport:
    """Per-sample and mean DSC/HD95 per region; no augmentation."""
    if isinstance(params, dict):
        params = params_from_state(config, params)
    report = MetricsReport()
    for sample in samples:
        probs = predict_probs(params, config, sample.image)
        hard = probs > threshold
        if apply_nesting:
            hard = enforce_nesting(hard)
        gt = sample.masks.stack().astype(bool)
        scores = evaluate_regions(
            np.where(hard, 1.0, 0.0), sample.masks, threshold=threshold,
            hd95_method=hd95_method)
        report.add_sample(sample.id, scores, pred_hard=hard, gt=gt)
    return report


# ---------------------------------------------------------------------------
# Ablation harness
# ---------------------------------------------------------------------------

@dataclass
class AblationResult:
    rows: dict
    param_counts: dict
    split_sizes: dict
    seed: int

    def to_dict(self) -> dict:
        return {"rows": self.rows, "param_counts": self.param_counts,
                "split_sizes": self.split_sizes, "seed": self.seed}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def ablate(config: TrainConfig, samples: list[Sample]) -> tuple:
    """Train baseline and enhanced variants with identical seeds and data;
    report per-region val-split metrics for both, plus parameter counts.

    Returns (AblationResult, {variant: TrainHistory}).
    """
    rows = {}
    counts = {}
    histories = {}
    split_sizes = {}
    for variant in ("baseline", "enhanced"):
        vconf = replace(config, model=replace(config.model, variant=variant),
                        checkpoint_path=None)
        state, history, split = train(vconf, samples)
        params = params_from_state(vconf.model, state)
        counts[variant] = params.count()
        histories[variant] = history
        val_samples = [s for s in samples if s.id in set(split.val)]
        report = evaluate(params, vconf.model, val_samples, threshold=config.threshold)
        agg = report.aggregates()
        rows[variant] = {
            region: {"dsc": agg[region]["dsc_mean"], "hd95": agg[region]["hd95_mean"]}
            for region in REGIONS
        }
        split_sizes = {"train": len(split.train), "val": len(split.val),
                       "test": len(split.test)}
    result = AblationResult(rows=rows, param_counts=counts,
                            split_sizes=split_sizes, seed=config.seed)
    return result, histories


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def miniature_config(variant: str = "enhanced") -> ModelConfig:
    return ModelConfig(input_size=32, encoder_tap_widths=(4, 6, 8, 10),
                       aspp_filters=16, variant=variant)


@dataclass
class GradcheckResult:
    max_rel_error: float
    per_param: dict
    runtime_s: float
    checked_coords: int = 0
    rejected_probes: int = 0
    threshold: float = 1e-5

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.threshold


def gradcheck(variant: str = "enhanced", config: ModelConfig | None = None,
              sample: Sample | None = None, seed: int = 0, eps: float = 1e-5,
              coords_per_param: int = 20, max_params: int | None = None) -> GradcheckResult:
    """Compare analytic gradients of bce_loss(model_forward(.)) against
    central finite differences in 64-bit mode.

    Relative error per coordinate is |analytic - numeric| divided by
    max(|analytic|, |numeric|, 1e-3); the floor keeps finite-difference
    roundoff on near-zero gradients from dominating the ratio.

    The loss is piecewise smooth (ReLU, max pooling), and a central
    difference is only a derivative estimate when both probe points lie in
    the same smooth region. Probes whose endpoint activation patterns
    differ from the unperturbed pattern are therefore rejected and the
    coordinate resampled (counted in ``rejected_probes``); a wrong backward
    rule still fails loudly on the accepted coordinates, which mismatch at
    every perturbation scale.
    """
    t_start = time.perf_counter()
    cfg = config if config is not None else miniature_config(variant)
    if sample is None:
        from .data import generate_synthetic_dataset
        sample = generate_synthetic_dataset(1, cfg.input_size, seed)[0]
    image = Tensor(sample.image.astype(np.float64))
    gt = Tensor(sample.masks.stack().astype(np.float64))
    params = init_params(cfg, seed=seed, dtype=np.float64)

    with trace_activations() as base_trace:
        loss = bce_loss(model_forward(image, params, cfg), gt)
    base_fp = base_trace.fingerprint
    params.zero_grad()
    grads = backward(loss, dict(params.items()))

    def probe_value():
        with no_grad(), trace_activations() as tr:
            value = bce_loss(model_forward(image, params, cfg), gt).item()
        return value, tr.fingerprint

    rng = rng_from(seed, 0xFD)
    per_param = {}
    checked = 0
    rejected = 0
    names = params.names()
    if max_params is not None:
        chosen = rng.choice(len(names), size=min(max_params, len(names)), replace=False)
        names = [names[i] for i in sorted(chosen)]
    for name in names:
        flat = params[name].data.reshape(-1)
        gflat = grads[name].reshape(-1)
        want = min(coords_per_param, flat.size)
        order = rng.permutation(flat.size)
        worst = 0.0
        accepted = 0
        budget = want + 40  # bounded resampling of kink-straddling probes
        for i in order[:budget]:
            if accepted == want:
                break
            orig = flat[i]
            flat[i] = orig + eps
            f_plus, fp_plus = probe_value()
            flat[i] = orig - eps
            f_minus, fp_minus = probe_value()
            flat[i] = orig
            if not (fp_plus == fp_minus == base_fp):
                rejected += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * eps)
            analytic = float(gflat[i])
            err = abs(analytic - numeric) / max(1e-3, abs(analytic), abs(numeric))
            worst = max(worst, err)
            accepted += 1
        checked += accepted
        per_param[name] = worst
    max_err = max(per_param.values()) if per_param else 0.0
    return GradcheckResult(max_rel_error=max_err, per_param=per_param,
                           runtime_s=time.perf_counter() - t_start,
                           checked_coords=checked, rejected_probes=rejected)
