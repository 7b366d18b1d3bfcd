"""The six training losses.

Every loss takes ``reduction="mean"`` (default) or ``"none"`` for the per-sample
terms whose mean is the scalar loss.  Sample weights ``W`` are used as given;
callers detach them where a loss must not reach the SRM parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

EPS = 1e-12


class LogClampCounter:
    """Counts log arguments that had to be clamped to ``EPS``."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


log_clamps = LogClampCounter()


def _safe_log(p):
    with torch.no_grad():
        log_clamps.count += int((p < EPS).sum())
    return torch.log(p.clamp_min(EPS))


def _reduce(terms, reduction):
    if reduction == "none":
        return terms
    if reduction == "mean":
        return terms.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def _as(x, like):
    return torch.as_tensor(x, dtype=like.dtype)


def true_domain_log_prob(d_out, domains):
    """``log p`` of the true domain per sample, with the zero-probability clamp."""
    domains = _as(domains, d_out)
    return (domains * _safe_log(d_out)).sum(dim=1)


def loss_dis(d_out, domains, reduction="mean"):
    """Discriminator negative log-likelihood of the true domain."""
    return _reduce(-true_domain_log_prob(d_out, domains), reduction)


def loss_srm(weights, d_out, domains, reduction="mean"):
    """``mean(W_i * log p_true,i)``; always <= 0.

    There is no leading minus: minimizing raises the weights of samples whose
    domain the discriminator finds hard to tell.
    """
    return _reduce(_as(weights, d_out) * true_domain_log_prob(d_out, domains), reduction)


def loss_frm(weights, d_out_modulated, domains, reduction="mean"):
    """``mean((1 - W_i) * log p_true,i)`` on discriminator outputs of modulated features."""
    w = _as(weights, d_out_modulated)
    return _reduce((1.0 - w) * true_domain_log_prob(d_out_modulated, domains), reduction)


def loss_wdep(weights, depth_pred, depth_target, reduction="mean"):
    """Weighted squared L2 norm of the depth residual, summed over pixels."""
    target = _as(depth_target, depth_pred)
    sq = ((depth_pred - target) ** 2).flatten(1).sum(dim=1)
    return _reduce(_as(weights, depth_pred) * sq, reduction)


def loss_wcls(weights, cls_prob, labels, reduction="mean"):
    """Weighted two-class cross-entropy of the liveness probability."""
    y = _as(labels, cls_prob)
    ce = -(y * _safe_log(cls_prob) + (1.0 - y) * _safe_log(1.0 - cls_prob))
    return _reduce(_as(weights, cls_prob) * ce, reduction)


def loss_enc(weights, l_wcls, l_wdep, per_sample_dis_terms, lambda1=10.0, lambda2=0.1, reduction="mean"):
    """``L_WCls + lambda1 * L_WDep - lambda2 * mean(W_i * nll_i)``.

    ``l_wcls`` and ``l_wdep`` may be scalars or per-sample vectors; with
    ``reduction="none"`` they must be per-sample.
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("lambda1 and lambda2 must be non-negative")
    dis = per_sample_dis_terms
    w = _as(weights, dis)
    adv = w * dis
    if reduction == "none":
        return l_wcls + lambda1 * l_wdep - lambda2 * adv
    return _reduce(l_wcls, "mean") + lambda1 * _reduce(l_wdep, "mean") - lambda2 * adv.mean()


@dataclass
class LossBundle:
    l_dis: float
    l_srm: float
    l_frm: float
    l_wdep: float
    l_wcls: float
    l_enc: float
    per_sample_terms: dict

    @classmethod
    def from_terms(cls, terms: dict):
        """Build from per-sample tensors keyed ``dis, srm, frm, wdep, wcls, enc``."""
        per = {k: v.detach().cpu().numpy() for k, v in terms.items()}
        return cls(**{f"l_{k}": float(v.mean()) for k, v in per.items()}, per_sample_terms=per)


def compute_bundle(weights, d_out, d_out_modulated, domains, depth_pred, depth_target,
                   cls_prob, labels, lambda1=10.0, lambda2=0.1) -> LossBundle:
    """All six losses on one batch, evaluated without gradient."""
    with torch.no_grad():
        dis = loss_dis(d_out, domains, "none")
        wdep = loss_wdep(weights, depth_pred, depth_target, "none")
        wcls = loss_wcls(weights, cls_prob, labels, "none")
        terms = {
            "dis": dis,
            "srm": loss_srm(weights, d_out, domains, "none"),
            "frm": loss_frm(weights, d_out_modulated, domains, "none"),
            "wdep": wdep,
            "wcls": wcls,
            "enc": loss_enc(weights, wcls, wdep, dis, lambda1, lambda2, "none"),
        }
    return LossBundle.from_terms(terms)
