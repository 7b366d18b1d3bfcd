"""Iterative three-way training schedule.

Step ``t`` (1-based) is an FRM step when ``t % K == 0``; otherwise odd steps
update the domain discriminator and even steps run the SRM update followed by
the depth, classifier, encoder and FRM updates.  FRM steps reuse the batch and
sample weights of the most recent SRM step.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import model as M
from . import objectives as obj
from .errors import ConfigError, ContractViolation, TrainingAborted
from .syndata import BalancedBatchSampler, Batch

logger = logging.getLogger(__name__)

DIS_STEP = "DIS"
SRM_MAIN_STEP = "SRM_MAIN"
FRM_STEP = "FRM"


@dataclass
class TrainConfig:
    steps: int = 600
    K: int = 5
    lambda1: float = 10.0
    lambda2: float = 0.1
    # lr_main drives enc, bc, dep and dis; lr_aux drives the SRM heads and FRM
    lr_main: float = 1e-3
    lr_aux: float = 1e-4
    n_dom: int = 10
    n_domains: int = 3
    seed: int = 0
    arch: M.ArchConfig = field(default_factory=M.ArchConfig)
    use_srm: bool = True
    use_frm: bool = True
    # downstream losses weighted by 1 - W instead of W
    srm_reverse: bool = False
    # FRM step weighted by W with the sign flipped (pushes domains apart)
    frm_reverse: bool = False
    eval_every: int = 0
    checkpoint_every: int = 0
    log_weights: bool = True

    def __post_init__(self):
        if isinstance(self.arch, dict):
            self.arch = M.ArchConfig(**self.arch)
        if self.arch.n_domains != self.n_domains:
            self.arch = M.ArchConfig(**{**asdict(self.arch), "n_domains": self.n_domains})
        self.validate()

    def validate(self):
        if self.K < 2:
            raise ConfigError(f"K must be >= 2, got {self.K}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.lr_main <= 0 or self.lr_aux <= 0:
            raise ConfigError("learning rates must be positive")
        if self.n_dom < 2 or self.n_dom % 2:
            raise ConfigError(f"n_dom must be an even count >= 2, got {self.n_dom}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be non-negative")
        if self.n_domains < 2:
            raise ConfigError("at least two source domains are required")

    def lr_for(self, name: str) -> float:
        return self.lr_aux if name in (M.SRM_REAL, M.SRM_FAKE, M.FRM) else self.lr_main


def dispatch(t: int, K: int) -> str:
    if t < 1 or K < 2:
        raise ContractViolation(f"dispatch needs t >= 1 and K >= 2, got t={t}, K={K}")
    if t % K == 0:
        return FRM_STEP
    return DIS_STEP if t % 2 else SRM_MAIN_STEP


def update_sets(state: M.ModelState, names, loss, lrs: dict):
    """One Adam step on each named set, all gradients taken before any step.

    Sets the loss does not reach get zero gradients (their Adam counters still
    advance); sets not named are never touched.
    """
    params = [p for n in names for p in state.parameters(n)]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    it = iter(grads)
    for name in names:
        opt = state.optimizer(name, lrs[name])
        for p in state.parameters(name):
            g = next(it)
            p.grad = torch.zeros_like(p) if g is None else g
        opt.step()
        opt.zero_grad(set_to_none=True)
    return state


def single_update(param_set_name: str, loss, lr: float, state: M.ModelState) -> M.ModelState:
    return update_sets(state, [param_set_name], loss, {param_set_name: lr})


@dataclass
class WeightCarry:
    """Sample weights from the latest SRM step together with the batch they belong to."""

    batch: Batch = None
    weights: torch.Tensor = None
    source_step: int = 0

    def current(self, n: int, dtype) -> torch.Tensor:
        if self.weights is None:
            return torch.ones(n, dtype=dtype)
        return self.weights


@dataclass
class StepRecord:
    t: int
    step_type: str
    losses: dict
    w_min: float
    w_mean: float
    w_max: float
    wall_time: float
    skipped: bool = False
    w_source_step: int = 0
    a_rowsum_err: float = None
    weights: list = None
    log_clamps: int = 0

    def to_dict(self):
        return asdict(self)


class RunLog:
    """Append-only record of steps, evaluation snapshots and warnings."""

    def __init__(self):
        self.records = []
        self.evals = []
        self.warnings = []

    def append(self, record: StepRecord):
        self.records.append(record)

    def step_types(self):
        return [r.step_type for r in self.records]

    def comparable(self):
        """The log minus wall-clock fields, for reproducibility checks."""
        recs = []
        for r in self.records:
            d = r.to_dict()
            d.pop("wall_time")
            recs.append(d)
        return {"records": recs, "evals": self.evals}

    def write(self, run_dir, seed=None):
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        with open(run_dir / "runlog.jsonl", "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
        (run_dir / "summary.json").write_text(json.dumps({**self.summary(), "seed": seed}, indent=2, sort_keys=True))

    def summary(self):
        out = {"n_steps": len(self.records), "step_type_counts": {}, "warnings": self.warnings}
        for r in self.records:
            out["step_type_counts"][r.step_type] = out["step_type_counts"].get(r.step_type, 0) + 1
        last = {}
        for r in self.records:
            last.update(r.losses)
        out["last_losses"] = last
        if self.evals:
            out["last_eval"] = self.evals[-1]
        return out

    @classmethod
    def read(cls, run_dir):
        log = cls()
        with open(Path(run_dir) / "runlog.jsonl") as fh:
            for line in fh:
                log.records.append(StepRecord(**json.loads(line)))
        evals = Path(run_dir) / "evals.jsonl"
        if evals.exists():
            log.evals = [json.loads(line) for line in evals.read_text().splitlines() if line]
        return log


def _tensors(batch: Batch, dtype):
    return (
        torch.as_tensor(batch.images, dtype=dtype),
        torch.as_tensor(batch.labels),
        torch.as_tensor(batch.domains, dtype=dtype),
        torch.as_tensor(batch.depths, dtype=dtype),
    )


def _features(state, x, config, grad=True):
    with torch.set_grad_enabled(grad):
        feats = M.encoder_forward(state, x)
        if config.use_frm and state.has(M.FRM):
            return M.apply_frm(state, feats)
        return feats, None


def _rowsum_err(weights):
    if weights is None:
        return None
    return float((weights.detach().sum(dim=1) - 1.0).abs().max())


def _param_norms(state):
    return {n: float(torch.sqrt(sum((p.detach() ** 2).sum() for p in state.parameters(n))))
            for n in state.components}


def _check_finite(t, step_type, losses, w, state):
    bad = [k for k, v in losses.items() if not math.isfinite(v)]
    if bad:
        diag = {
            "t": t, "step_type": step_type, "losses": losses,
            "w_stats": [float(w.min()), float(w.mean()), float(w.max())],
            "param_norms": _param_norms(state),
        }
        raise TrainingAborted(f"non-finite loss {bad} at step {t}", diag)


def train_step(state: M.ModelState, batch: Batch, carry: WeightCarry, t: int, config: TrainConfig):
    """Run step ``t``; returns ``(state, StepRecord, carry)``.

    ``batch`` is ignored on FRM steps that have an SRM carry to reuse.
    """
    start = time.perf_counter()
    step_type = dispatch(t, config.K)
    dtype = state.cfg.torch_dtype
    lr = {n: config.lr_for(n) for n in M.PARAM_SETS}
    clamps_before = obj.log_clamps.count
    a_err = None
    skipped = False
    losses = {}

    if step_type == DIS_STEP:
        x, y, d, _ = _tensors(batch, dtype)
        w = carry.current(len(batch), dtype)
        feats_frm, A = _features(state, x, config, grad=False)
        a_err = _rowsum_err(A)
        l_dis = obj.loss_dis(M.discriminator_forward(state, feats_frm), d)
        losses["l_dis"] = float(l_dis.detach())
        _check_finite(t, step_type, losses, w, state)
        update_sets(state, [M.DIS], l_dis, lr)

    elif step_type == SRM_MAIN_STEP:
        x, y, d, depth_t = _tensors(batch, dtype)
        feats_frm, A = _features(state, x, config, grad=True)
        a_err = _rowsum_err(A)
        fixed = feats_frm.detach()
        if config.use_srm:
            with torch.no_grad():
                d_fixed = M.discriminator_forward(state, fixed)
            l_srm = obj.loss_srm(M.srm_forward(state, fixed, y), d_fixed, d)
            losses["l_srm"] = float(l_srm.detach())
            _check_finite(t, step_type, losses, torch.ones(1), state)
            update_sets(state, [M.SRM_REAL, M.SRM_FAKE], l_srm, lr)
            with torch.no_grad():
                w = M.srm_forward(state, fixed, y)
        else:
            w = torch.ones(len(batch), dtype=dtype)
        w_down = 1.0 - w if config.srm_reverse else w

        l_wdep = obj.loss_wdep(w_down, M.depth_forward(state, fixed), depth_t)
        l_wcls = obj.loss_wcls(w_down, M.classifier_forward(state, fixed), y)
        losses.update(l_wdep=float(l_wdep.detach()), l_wcls=float(l_wcls.detach()))
        _check_finite(t, step_type, losses, w, state)
        update_sets(state, [M.DEP], l_wdep, lr)
        update_sets(state, [M.BC], l_wcls, lr)

        # heads re-evaluated with their updated parameters; D stays frozen
        wdep_terms = obj.loss_wdep(w_down, M.depth_forward(state, feats_frm), depth_t, "none")
        wcls_terms = obj.loss_wcls(w_down, M.classifier_forward(state, feats_frm), y, "none")
        nll = obj.loss_dis(M.discriminator_forward(state, feats_frm), d, "none")
        l_enc = obj.loss_enc(w_down, wcls_terms, wdep_terms, nll, config.lambda1, config.lambda2)
        losses["l_enc"] = float(l_enc.detach())
        _check_finite(t, step_type, losses, w, state)
        names = [M.ENC] + ([M.FRM] if config.use_frm and state.has(M.FRM) else [])
        update_sets(state, names, l_enc, lr)
        carry = WeightCarry(batch=batch, weights=w.detach().clone(), source_step=t)

    else:
        if not (config.use_frm and state.has(M.FRM)):
            skipped = True
            w = carry.current(len(batch) if batch is not None else 1, dtype)
        else:
            fbatch = carry.batch if carry.batch is not None else batch
            x, y, d, _ = _tensors(fbatch, dtype)
            w = carry.current(len(fbatch), dtype)
            with torch.no_grad():
                feats = M.encoder_forward(state, x)
            feats_frm, A = M.apply_frm(state, feats)
            a_err = _rowsum_err(A)
            d_out = M.discriminator_forward(state, feats_frm)
            if config.frm_reverse:
                direct = w if config.use_srm else torch.ones_like(w)
                l_frm = -obj.loss_srm(direct, d_out, d)
            else:
                # without SRM every sample counts fully in the FRM objective
                reverse_of = w if config.use_srm else torch.zeros_like(w)
                l_frm = obj.loss_frm(reverse_of, d_out, d)
            losses["l_frm"] = float(l_frm.detach())
            _check_finite(t, step_type, losses, w, state)
            update_sets(state, [M.FRM], l_frm, lr)

    state.step = t
    record = StepRecord(
        t=t, step_type=step_type, losses=losses,
        w_min=float(w.min()), w_mean=float(w.mean()), w_max=float(w.max()),
        wall_time=time.perf_counter() - start, skipped=skipped,
        w_source_step=carry.source_step, a_rowsum_err=a_err,
        weights=[float(v) for v in w] if config.log_weights and step_type != DIS_STEP and not skipped else None,
        log_clamps=obj.log_clamps.count - clamps_before,
    )
    return state, record, carry


def needs_batch(t: int, config: TrainConfig, carry: WeightCarry, state: M.ModelState) -> bool:
    if dispatch(t, config.K) != FRM_STEP:
        return True
    return carry.batch is None and config.use_frm and state.has(M.FRM)


def train(config: TrainConfig, datasets, eval_sets=None, run_dir=None, state=None, on_step=None):
    """Run ``config.steps`` dispatched steps.  Returns ``(state, RunLog)``.

    ``eval_sets`` maps a name to a sample list scored every ``eval_every``
    steps and at the end.  With ``run_dir`` the log, evaluations and
    checkpoints are written there, including a checkpoint on abort.
    """
    from . import evalkit

    torch.use_deterministic_algorithms(True)
    if len(datasets) != config.n_domains:
        raise ConfigError(f"expected {config.n_domains} source datasets, got {len(datasets)}")
    state = state or M.ModelState(config.arch, seed=config.seed)
    sampler = BalancedBatchSampler(datasets, config.n_dom, seed=config.seed)
    log = RunLog()
    carry = WeightCarry()
    run_dir = Path(run_dir) if run_dir else None

    def snapshot_eval(t):
        for name, samples in (eval_sets or {}).items():
            scores = evalkit.score_samples(state, samples, use_frm=config.use_frm)
            entry = {"t": t, "set": name, "seed": config.seed, "auc": evalkit.auc(scores),
                     "hter": evalkit.hter(scores), "n": int(scores.scores.size)}
            log.evals.append(entry)
            if run_dir:
                evalkit.write_metrics(run_dir / "evals", scores, prefix=f"{name}_step_{t:06d}",
                                      extra={"seed": config.seed, "t": t, "set": name})
                with open(run_dir / "evals.jsonl", "a") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def manifest(t):
        return {"seed": config.seed, "step": t, "sampler": sampler.state(),
                "train_config": _config_dict(config)}

    if run_dir:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "evals.jsonl").write_text("")
    try:
        for t in range(1, config.steps + 1):
            batch = sampler.next_batch() if needs_batch(t, config, carry, state) else None
            state, record, carry = train_step(state, batch, carry, t, config)
            log.append(record)
            if on_step:
                on_step(state, record)
            if config.eval_every and t % config.eval_every == 0 and t != config.steps:
                snapshot_eval(t)
            if run_dir and config.checkpoint_every and t % config.checkpoint_every == 0:
                M.save_checkpoint(state, run_dir / "checkpoints" / f"step_{t:06d}", manifest(t))
    except TrainingAborted as exc:
        log.warnings.append(str(exc))
        if run_dir:
            M.save_checkpoint(state, run_dir / "checkpoints" / "abort", {**manifest(state.step), "abort": exc.diagnostics})
            log.write(run_dir, seed=config.seed)
        raise
    snapshot_eval(config.steps)
    if run_dir:
        M.save_checkpoint(state, run_dir / "checkpoints" / "final", manifest(config.steps))
        log.write(run_dir, seed=config.seed)
    return state, log


def _config_dict(config: TrainConfig) -> dict:
    return json.loads(json.dumps(asdict(config)))
