"""Straight-line scalar reference implementations of the losses.

Plain Python floats and ``math`` only; nothing here touches the package code.
"""

import math

EPS = 1e-12


def _log(p):
    return math.log(max(p, EPS))


def _true_logp(row, dom):
    i = max(range(len(dom)), key=lambda k: dom[k])
    return _log(row[i])


def dis(D, d):
    total = 0.0
    for row, dom in zip(D, d):
        total += -_true_logp(row, dom)
    return total / len(D)


def srm(W, D, d):
    total = 0.0
    for w, row, dom in zip(W, D, d):
        total += w * _true_logp(row, dom)
    return total / len(D)


def frm(W, D, d):
    total = 0.0
    for w, row, dom in zip(W, D, d):
        total += (1.0 - w) * _true_logp(row, dom)
    return total / len(D)


def wdep(W, pred, target):
    total = 0.0
    for w, P, T in zip(W, pred, target):
        sq = 0.0
        for prow, trow in zip(P, T):
            for a, b in zip(prow, trow):
                sq += (a - b) ** 2
        total += w * sq
    return total / len(W)


def wcls(W, p, y):
    total = 0.0
    for w, pi, yi in zip(W, p, y):
        total += -w * (yi * _log(pi) + (1 - yi) * _log(1.0 - pi))
    return total / len(W)


def enc(W, p, y, pred, target, D, d, lambda1, lambda2):
    adv = 0.0
    for w, row, dom in zip(W, D, d):
        adv += w * -_true_logp(row, dom)
    adv /= len(W)
    return wcls(W, p, y) + lambda1 * wdep(W, pred, target) - lambda2 * adv
