"""Central finite-difference verification of analytic gradients."""

from contextlib import contextmanager

import numpy as np


# float32 central differences at h=1e-3 resolve gradients to roughly 1e-4
# absolute; the denominator floor keeps that noise from reading as error on
# near-zero coordinates.
FLOOR = 0.1
# one-sided slopes that disagree by more than this (relative, same floor) mean
# the +-h interval crosses a ReLU or max-pool switch, where no derivative exists
KINK_TOL = 0.05
MAX_DRAWS = 20


def _relerr(a, b, floor):
    return abs(a - b) / max(abs(a), abs(b), floor)


def _probe(loss, flat, i, h, base):
    """Central and one-sided difference quotients of ``loss`` along ``flat[i]``."""
    old = flat[i]
    flat[i] = old + h
    hi = float(flat[i])
    up = loss()
    flat[i] = old - h
    lo = float(flat[i])
    down = loss()
    flat[i] = old
    mid = float(old)
    return (up - down) / (hi - lo), (up - base) / (hi - mid), (base - down) / (mid - lo)


def _check(loss, flat, analytic, h, samples, rng, floor, kink_tol, info):
    worst, checked = 0.0, 0
    base = loss()
    order = rng.permutation(flat.size)[: samples * MAX_DRAWS]
    for i in order:
        if checked == min(samples, flat.size):
            break
        numeric, right, left = _probe(loss, flat, i, h, base)
        if _relerr(right, left, floor) > kink_tol:
            info["kinks"] = info.get("kinks", 0) + 1
            continue
        worst = max(worst, _relerr(float(analytic[i]), numeric, floor))
        checked += 1
    info["checked"] = info.get("checked", 0) + checked
    return worst


def grad_check(loss_and_backward, params, h=1e-3, samples=20, rng=None, floor=FLOOR,
               kink_tol=KINK_TOL, info=None):
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_backward()`` must run a deterministic forward pass, populate the
    gradients of ``params`` (named :class:`Param` pairs, zeroed by the caller's
    function or here) and return the scalar loss. ``samples`` coordinates are
    checked per parameter. Relative error is ``|a - n| / max(|a|, |n|, floor)``;
    differences use the perturbation actually stored after float32 rounding.
    Coordinates whose left and right slopes disagree sit on a kink of the
    loss and are replaced by fresh draws; ``info`` (a dict) receives the
    number of checked and of skipped coordinates.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    info = {} if info is None else info
    for _, p in params:
        p.zero_grad()
    loss_and_backward()
    analytic = [p.grad.copy() for _, p in params]
    worst = 0.0
    for (_, p), ga in zip(params, analytic):
        worst = max(worst, _check(loss_and_backward, p.value.reshape(-1), ga.reshape(-1), h, samples,
                                  rng, floor, kink_tol, info))
    for (_, p), ga in zip(params, analytic):
        p.grad[...] = ga
    return worst


def input_grad_check(forward_loss, backward_input, x, h=1e-3, samples=20, rng=None, floor=FLOOR,
                     kink_tol=KINK_TOL, info=None):
    """Same check for the gradient w.r.t. an input array ``x`` (modified in place, restored)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    info = {} if info is None else info
    forward_loss(x)
    ga = backward_input().reshape(-1).copy()
    return _check(lambda: forward_loss(x), x.reshape(-1), ga, h, samples, rng, floor, kink_tol, info)


@contextmanager
def float64_params(params):
    """Temporarily hold ``params`` in float64 so deep stacks can be checked with small steps.

    Layers compute in the dtype of their inputs and parameters, so the same
    forward and backward code runs at double precision inside the block.
    """
    saved = [(p, p.value, p.grad) for _, p in params]
    try:
        for p, v, g in saved:
            p.value = v.astype(np.float64)
            p.grad = g.astype(np.float64)
        yield
    finally:
        for p, v, g in saved:
            p.value, p.grad = v, g
