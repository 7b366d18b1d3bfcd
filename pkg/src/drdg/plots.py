"""Figures rendered from a finished run directory.

Every kind reads only files the trainer and the CLI write (run log, eval ROC
files, final checkpoint, config echo).  A kind whose inputs are missing is
skipped with a warning and the others are still produced.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from . import model as M  # noqa: E402

logger = logging.getLogger(__name__)

KINDS = ("roc", "weight_hist", "feature_scatter", "channel_attn")


class MissingInput(Exception):
    pass


def _save(fig, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps the SVG bytes reproducible
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
    return path


def _roc_files(run):
    files = sorted((run / "evals").glob("*_roc.csv")) + sorted((run / "eval").glob("*_roc.csv"))
    if not files:
        raise MissingInput("no *_roc.csv files under evals/ or eval/")
    return files


def plot_roc(run, out):
    written = []
    for f in _roc_files(run):
        with open(f) as fh:
            rows = [(float(r["FAR"]), float(r["FRR"])) for r in csv.DictReader(fh)]
        far = np.array([r[0] for r in rows])
        tpr = 1.0 - np.array([r[1] for r in rows])
        stem = f.name[: -len("_roc.csv")]
        meta = f.with_name(stem + ".json")
        title = stem
        if meta.exists():
            m = json.loads(meta.read_text())
            title = f"{stem}  AUC={m['auc']:.3f}  HTER={m['hter']:.3f}  seed={m.get('seed')}"
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.plot(far, tpr, drawstyle="steps-post")
        ax.plot([0, 1], [0, 1], ls=":", c="grey")
        ax.set(xlabel="FAR", ylabel="1 - FRR", xlim=(0, 1), ylim=(0, 1))
        ax.set_title(title, fontsize=7)
        written.append(_save(fig, out / f"roc_{f.parent.name}_{stem}.svg"))
    return written


def weight_buckets(run, n_buckets=4):
    """Logged SRM weights grouped into ``n_buckets`` consecutive step ranges."""
    log = run / "runlog.jsonl"
    if not log.exists():
        raise MissingInput("runlog.jsonl not found")
    steps = []
    for line in log.read_text().splitlines():
        r = json.loads(line)
        if r["step_type"] == "SRM_MAIN" and r.get("weights") is not None:
            steps.append((r["t"], np.asarray(r["weights"], dtype=np.float64)))
    if not steps:
        raise MissingInput("run log has no logged SRM weights")
    if all(np.all(w == 1.0) for _, w in steps):
        raise MissingInput("sample reweighting was disabled in this run (W = 1 throughout)")
    chunks = np.array_split(np.arange(len(steps)), min(n_buckets, len(steps)))
    return [(steps[c[0]][0], steps[c[-1]][0], np.concatenate([steps[i][1] for i in c])) for c in chunks]


def plot_weight_hist(run, out):
    buckets = weight_buckets(run)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    bins = np.linspace(0, 1, 41)
    for lo, hi, w in buckets:
        ax.hist(w, bins=bins, histtype="step", label=f"steps {lo}-{hi}")
    ax.set(xlabel="sample weight W", ylabel="count", xlim=(0, 1))
    ax.legend(fontsize=7)
    return [_save(fig, out / "weight_hist.svg")]


def _final_state_and_data(run):
    from .cli import build_configs, _load_file
    from .syndata import make_benchmark

    ckpt = run / "checkpoints" / "final"
    if not ckpt.with_suffix(".npz").exists():
        raise MissingInput("checkpoints/final.npz not found")
    if not (run / "config.json").exists():
        raise MissingInput("config.json not found")
    _, data = build_configs(_load_file(run / "config.json"))
    sources, _ = make_benchmark(data)
    return M.load_checkpoint(ckpt), sources


def pca_2d(x):
    """Deterministic PCA projection with a sign convention on each axis."""
    x = x - x.mean(0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    comps = vt[:2]
    comps *= np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(1)])[:, None]
    return x @ comps.T


def pooled_features(state, sources, per_domain=60):
    samples = [s for d in sources for s in d[:per_domain]]
    images = np.stack([s.image for s in samples])
    labels = torch.as_tensor([s.label for s in samples])
    with torch.no_grad():
        f = M.encoder_forward(state, images)
        fm, A = M.apply_frm(state, f)
        W = M.srm_forward(state, fm, labels).cpu().numpy() if state.has(M.SRM_REAL) else np.ones(len(samples))
    pooled = fm.mean(dim=(1, 2)).cpu().numpy().astype(np.float64)
    domains = np.array([int(np.argmax(s.domain)) for s in samples])
    return pooled, domains, np.asarray(W, dtype=np.float64), np.array([s.label for s in samples])


def plot_feature_scatter(run, out):
    state, sources = _final_state_and_data(run)
    pooled, domains, W, labels = pooled_features(state, sources)
    xy = pca_2d(pooled)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    for d in np.unique(domains):
        for lab, marker in ((1, "o"), (0, "^")):
            m = (domains == d) & (labels == lab)
            ax.scatter(xy[m, 0], xy[m, 1], s=8 + 60 * W[m], marker=marker, alpha=0.6,
                       label=f"domain {d} {'live' if lab else 'spoof'}")
    ax.set(xlabel="PC 1", ylabel="PC 2")
    ax.set_title("pooled modulated features (marker size ~ W)", fontsize=8)
    ax.legend(fontsize=6, ncol=2)
    return [_save(fig, out / "feature_scatter.svg")]


def select_channels(weights, k):
    """Indices of the ``k`` largest and ``k`` smallest channel weights, ties by index."""
    order = np.argsort(-np.asarray(weights), kind="stable")
    k = min(k, len(order) // 2)
    return order[:k].tolist(), order[::-1][:k].tolist()


def plot_channel_attn(run, out, k=4):
    state, sources = _final_state_and_data(run)
    if not state.has(M.FRM):
        raise MissingInput("checkpoint has no FRM parameters")
    sample = next(s for s in sources[0] if s.label == 1)
    with torch.no_grad():
        f = M.encoder_forward(state, sample.image[None])
        fm, A = M.apply_frm(state, f)
    a = A[0].cpu().numpy().astype(np.float64)
    top, bottom = select_channels(a, k)
    energy = (fm[0] ** 2).cpu().numpy()
    fig, axes = plt.subplots(2, len(top), figsize=(2 * len(top), 4.2), squeeze=False)
    for row, chans, name in ((0, top, "top"), (1, bottom, "bottom")):
        for ax, c in zip(axes[row], chans):
            ax.imshow(energy[..., c], cmap="magma")
            ax.set_title(f"{name} c{c} A={a[c]:.4f}", fontsize=7)
            ax.axis("off")
    path = _save(fig, out / "channel_attn.svg")
    sel = out / "channel_attn.json"
    sel.write_text(json.dumps({"top": top, "bottom": bottom, "A": a.tolist()}, indent=2))
    return [path, sel]


PLOTTERS = {
    "roc": plot_roc,
    "weight_hist": plot_weight_hist,
    "feature_scatter": plot_feature_scatter,
    "channel_attn": plot_channel_attn,
}


def make_plots(run_dir, kinds=KINDS, out_dir=None):
    run = Path(run_dir)
    out = Path(out_dir) if out_dir else run / "plots"
    written = []
    for kind in kinds:
        try:
            written.extend(PLOTTERS[kind](run, out))
        except MissingInput as exc:
            logger.warning("skipping %s plot: %s", kind, exc)
    return written
