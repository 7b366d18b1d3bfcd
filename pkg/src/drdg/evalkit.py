"""Metrics (ROC, AUC, HTER), the SRM-free inference path and the ablation harness."""

from __future__ import annotations

import csv
import json
import statistics
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import model as M
from . import objectives as obj
from .errors import ConfigError, ContractViolation

LIVE = 1


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).astype(np.int64).ravel()
        if self.scores.shape != self.labels.shape:
            raise ContractViolation("scores and labels differ in length")
        if not ((self.labels == 1).any() and (self.labels == 0).any()):
            raise ContractViolation("score set needs both live and spoof samples")

    @property
    def live(self):
        return self.scores[self.labels == 1]

    @property
    def spoof(self):
        return self.scores[self.labels == 0]


def roc_curve(s: ScoreSet):
    """``(threshold, FAR, FRR)`` rows over ``-inf``, every distinct score, ``+inf``.

    A sample is accepted as live when its score is ``>= threshold``.
    """
    thresholds = np.concatenate([[-np.inf], np.unique(s.scores), [np.inf]])
    live = np.sort(s.live)
    spoof = np.sort(s.spoof)
    far = (spoof.size - np.searchsorted(spoof, thresholds, side="left")) / spoof.size
    frr = np.searchsorted(live, thresholds, side="left") / live.size
    return list(zip(thresholds.tolist(), far.tolist(), frr.tolist()))


def auc(s: ScoreSet) -> float:
    """Mann-Whitney probability that a live sample outranks a spoof one, ties 1/2."""
    live, spoof = s.live, s.spoof
    order = np.sort(spoof)
    below = np.searchsorted(order, live, side="left")
    ties = np.searchsorted(order, live, side="right") - below
    return float((below.sum() + 0.5 * ties.sum()) / (live.size * spoof.size))


def auc_trapezoid(s: ScoreSet) -> float:
    """Trapezoidal area under the (FAR, 1 - FRR) curve."""
    rows = roc_curve(s)
    far = np.array([r[1] for r in rows])[::-1]
    tpr = 1.0 - np.array([r[2] for r in rows])[::-1]
    return float(np.sum(np.diff(far) * (tpr[1:] + tpr[:-1]) / 2.0))


def eer_threshold(s: ScoreSet) -> float:
    """Lowest threshold minimizing ``|FAR - FRR|``."""
    rows = roc_curve(s)
    gaps = np.array([abs(far - frr) for _, far, frr in rows])
    return rows[int(np.flatnonzero(gaps == gaps.min())[0])][0]


def error_rates(s: ScoreSet, threshold: float):
    far = float(np.mean(s.spoof >= threshold))
    frr = float(np.mean(s.live < threshold))
    return far, frr


def hter(s: ScoreSet, threshold_policy="eer") -> float:
    """Half total error rate.

    ``threshold_policy`` is ``"eer"`` (threshold chosen on ``s`` itself), a
    float (fixed threshold), or another ScoreSet whose EER threshold is used
    (development-set policy).
    """
    if isinstance(threshold_policy, str):
        if threshold_policy != "eer":
            raise ConfigError(f"unknown threshold policy {threshold_policy!r}")
        threshold = eer_threshold(s)
    elif isinstance(threshold_policy, ScoreSet):
        threshold = eer_threshold(threshold_policy)
    else:
        threshold = float(threshold_policy)
    far, frr = error_rates(s, threshold)
    return (far + frr) / 2.0


def _images(image):
    x = np.asarray(image)
    return x[None] if x.ndim == 3 else x


def infer(state: M.ModelState, image, use_frm=True):
    """Liveness probability: encoder, FRM modulation, binary classifier.

    Accepts one ``H x W x 6`` image (returns a float) or a stack of them
    (returns an array).  SRM heads and the discriminator are never evaluated.
    """
    single = np.asarray(image).ndim == 3
    with torch.no_grad():
        feats = M.encoder_forward(state, _images(image))
        if use_frm and state.has(M.FRM):
            feats, _ = M.apply_frm(state, feats)
        probs = M.classifier_forward(state, feats).cpu().numpy().astype(np.float64)
    return float(probs[0]) if single else probs


def score_samples(state, samples, use_frm=True, chunk=256) -> ScoreSet:
    scores = []
    for i in range(0, len(samples), chunk):
        part = samples[i:i + chunk]
        scores.append(infer(state, np.stack([s.image for s in part]), use_frm=use_frm))
    return ScoreSet(np.concatenate(scores), [s.label for s in samples])


def evaluate(state, samples, use_frm=True, threshold_policy="eer") -> dict:
    s = score_samples(state, samples, use_frm=use_frm)
    return {"auc": auc(s), "hter": hter(s, threshold_policy), "n": int(s.scores.size)}


def domain_confusion(state, datasets, use_frm=True) -> float:
    """Mean discriminator NLL of the true domain over labeled source samples."""
    flat = [s for data in datasets for s in data]
    with torch.no_grad():
        feats = M.encoder_forward(state, np.stack([s.image for s in flat]))
        if use_frm and state.has(M.FRM):
            feats, _ = M.apply_frm(state, feats)
        d_out = M.discriminator_forward(state, feats)
        return float(obj.loss_dis(d_out, np.stack([s.domain for s in flat])))


def write_metrics(out_dir, s: ScoreSet, threshold_policy="eer", prefix="metrics", extra=None):
    """Write ``<prefix>.json``, ``<prefix>.csv`` and ``<prefix>_roc.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = {"auc": auc(s), "hter": hter(s, threshold_policy), "n": int(s.scores.size),
               "eer_threshold": eer_threshold(s)}
    metrics.update(extra or {})
    (out_dir / f"{prefix}.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    with open(out_dir / f"{prefix}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k in ("hter", "auc", "eer_threshold", "n"):
            w.writerow([k, metrics[k]])
    with open(out_dir / f"{prefix}_roc.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "FAR", "FRR"])
        w.writerows(roc_curve(s))
    return metrics


VARIANTS = {
    "Baseline": dict(use_srm=False, use_frm=False, srm_reverse=False, frm_reverse=False),
    "Baseline_FRM": dict(use_srm=False, use_frm=True, srm_reverse=False, frm_reverse=False),
    "Baseline_FRM_reverse": dict(use_srm=False, use_frm=True, srm_reverse=False, frm_reverse=True),
    "Baseline_SRM": dict(use_srm=True, use_frm=False, srm_reverse=False, frm_reverse=False),
    "Baseline_SRM_reverse": dict(use_srm=True, use_frm=False, srm_reverse=True, frm_reverse=False),
    "DRDG": dict(use_srm=True, use_frm=True, srm_reverse=False, frm_reverse=False),
}


@dataclass(frozen=True)
class AblationVariant:
    name: str

    def __post_init__(self):
        if self.name not in VARIANTS:
            raise ConfigError(f"unknown variant {self.name!r}; valid: {', '.join(VARIANTS)}")

    @property
    def toggles(self) -> dict:
        return dict(VARIANTS[self.name])

    def apply(self, config):
        return replace(config, **self.toggles)


def run_variant(variant: AblationVariant, config, datasets, target, seed: int) -> dict:
    from .trainer import train

    cfg = replace(variant.apply(config), seed=seed, eval_every=0, log_weights=False)
    state, _ = train(cfg, datasets)
    return evaluate(state, target, use_frm=cfg.use_frm)


def run_ablation(variant: AblationVariant, config, datasets, target, seeds=(0,)) -> dict:
    """One table row: held-out HTER and AUC, median and spread over ``seeds``."""
    if isinstance(variant, str):
        variant = AblationVariant(variant)
    runs = [run_variant(variant, config, datasets, target, s) for s in seeds]
    hters = [r["hter"] for r in runs]
    aucs = [r["auc"] for r in runs]
    return {
        "Method": variant.name,
        "HTER": statistics.median(hters),
        "AUC": statistics.median(aucs),
        "HTER_spread": max(hters) - min(hters),
        "AUC_spread": max(aucs) - min(aucs),
        "seeds": list(seeds),
        "per_seed": runs,
    }


def write_ablation_table(path, rows):
    """``Method,HTER,AUC`` CSV in percent; seed spreads and per-seed runs go to a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["Method", "HTER", "AUC"])
        for r in rows:
            w.writerow([r["Method"], f"{100 * r['HTER']:.2f}", f"{100 * r['AUC']:.2f}"])
    path.with_suffix(".json").write_text(json.dumps(rows, indent=2, sort_keys=True))
    return path
