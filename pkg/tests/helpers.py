"""Shared fixtures: a tiny float64 model, a tiny batch, and finite differences."""

import numpy as np
import torch

from drdg import model as M
from drdg import objectives as obj
from drdg import syndata

TINY_ARCH = dict(image_size=(8, 8), enc_widths=(4, 4), head_hidden=4, depth_size=(4, 4),
                 n_domains=2, dtype="float64", zero_init_heads=False)


def tiny_state(seed=0, **kw):
    return M.ModelState(M.ArchConfig(**{**TINY_ARCH, **kw}), seed=seed)


def tiny_datasets(M_=2, n=8, size=(8, 8), depth=(4, 4), seed=0):
    return [
        syndata.generate_domain_dataset(syndata.DomainSpec(d, exposure=0.8 + 0.3 * d, texture_freq=2 + d),
                                        n, size, seed=seed, n_domains=M_, depth_size=depth)
        for d in range(M_)
    ]


def tiny_batch(n_dom=2, M_=2, seed=0):
    # N = M * n_dom = 4 samples
    return syndata.make_batch(tiny_datasets(M_=M_), n_dom, seed)


def batch_tensors(batch):
    return (torch.as_tensor(batch.images, dtype=torch.float64), torch.as_tensor(batch.labels),
            torch.as_tensor(batch.domains, dtype=torch.float64),
            torch.as_tensor(batch.depths, dtype=torch.float64))


def loss_closures(state, batch, W_fixed, lambda1=10.0, lambda2=0.1):
    """Each loss as a zero-argument function of the model's current parameters."""
    x, y, d, depth_t = batch_tensors(batch)
    Wc = torch.as_tensor(W_fixed, dtype=torch.float64)

    def feats():
        f = M.encoder_forward(state, x)
        return M.apply_frm(state, f)[0]

    def l_dis():
        return obj.loss_dis(M.discriminator_forward(state, feats()), d)

    def l_srm():
        fm = feats()
        return obj.loss_srm(M.srm_forward(state, fm, y), M.discriminator_forward(state, fm), d)

    def l_frm():
        return obj.loss_frm(Wc, M.discriminator_forward(state, feats()), d)

    def l_wdep():
        return obj.loss_wdep(Wc, M.depth_forward(state, feats()), depth_t)

    def l_wcls():
        return obj.loss_wcls(Wc, M.classifier_forward(state, feats()), y)

    def l_enc():
        fm = feats()
        wdep = obj.loss_wdep(Wc, M.depth_forward(state, fm), depth_t, "none")
        wcls = obj.loss_wcls(Wc, M.classifier_forward(state, fm), y, "none")
        nll = obj.loss_dis(M.discriminator_forward(state, fm), d, "none")
        return obj.loss_enc(Wc, wcls, wdep, nll, lambda1, lambda2)

    return {"L_Dis": l_dis, "L_SRM": l_srm, "L_FRM": l_frm, "L_WDep": l_wdep, "L_WCls": l_wcls, "L_Enc": l_enc}


REACHES = {
    "L_Dis": (M.ENC, M.FRM, M.DIS),
    "L_SRM": (M.ENC, M.FRM, M.SRM_REAL, M.SRM_FAKE, M.DIS),
    "L_FRM": (M.ENC, M.FRM, M.DIS),
    "L_WDep": (M.ENC, M.FRM, M.DEP),
    "L_WCls": (M.ENC, M.FRM, M.BC),
    "L_Enc": (M.ENC, M.FRM, M.DEP, M.BC, M.DIS),
}


def fd_check(state, fn, sets, step=1e-4, floor=1e-8):
    """Compare autograd with central differences on every coordinate of ``sets``.

    Returns ``(n_checked, n_within_1e-4, worst_relative_error)`` over
    coordinates where either gradient exceeds ``floor`` in magnitude.
    """
    params = [p for s in sets for p in state.parameters(s)]
    analytic = torch.autograd.grad(fn(), params, allow_unused=True)
    checked = ok = 0
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat, gflat = p.view(-1), g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                fp = fn().item()
                flat[i] = orig - step
                fm = fn().item()
                flat[i] = orig
                num = (fp - fm) / (2 * step)
                a = gflat[i].item()
                scale = max(abs(a), abs(num))
                if scale <= floor:
                    continue
                rel = abs(a - num) / scale
                checked += 1
                ok += rel <= 1e-4
                worst = max(worst, rel)
    return checked, ok, worst


def np_hash(arrays):
    import hashlib

    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()
