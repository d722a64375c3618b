"""Shared builders and independent oracles for the test suite."""

from __future__ import annotations

import itertools

import numpy as np

from adveeg import tensorops as ops
from adveeg.model import ModelSpec, build, encoder_backward, encoder_forward

# reduced architecture used for full-model finite differences
SMALL_SPEC = ModelSpec(channels=4, samples=12, temporal_kernel=6, block2_kernel=3)


def small_model(seed=0, spec=SMALL_SPEC):
    return build(spec, seed=seed, dtype=np.float64)


def fixed_masks(spec, n, seed=0):
    """Dropout masks for both dropout layers, pinned so finite differences see a fixed function."""
    rng = np.random.default_rng(seed)
    t1 = spec.samples // spec.pool1
    t2 = t1 // spec.pool2
    return (ops.dropout_mask((n, spec.spatial_maps, 1, t1), spec.dropout, rng),
            ops.dropout_mask((n, spec.block2_filters, 1, t2), spec.dropout, rng))


def _phase_b_loss(state, x, labels, blocks, lam, masks, fused):
    """CE_cls - lam * CE_adv in the state's own precision (no float() round trips)."""
    f, ctx = encoder_forward(state, x, train=True, masks=masks, fused=fused)
    idx = np.arange(len(labels))
    cls_logp = ops.log_softmax(f @ state.params["cls.dense"].value)
    adv_logp = ops.log_softmax(f @ state.params["adv.dense"].value)
    loss = -cls_logp[idx, labels].mean() + lam * adv_logp[idx, blocks].mean()
    return loss, f, ctx


def full_model_grad_check(state, x, labels, blocks, lam, masks, fused=True, seed=0, step=1e-5,
                          oracle_dtype=np.longdouble):
    """Max relative error of every parameter gradient of the phase-B objective.

    The analytic gradient comes from ``state`` (float64) through heads and
    encoder, with the dropout masks pinned. The central-difference oracle runs
    on a copy of the model in ``oracle_dtype``: at 64 bits its own rounding
    (one ulp of the loss over 2*step, about 1e-11) is of the order of the
    1e-8 floor of the relative metric, which matters for parameters whose
    gradient is identically zero (the first batch-norm shift feeds a linear
    layer followed by another batch-norm in train mode).
    """
    r = float(np.random.default_rng(seed).standard_normal())
    state.zero_grad()
    _, f, ctx = _phase_b_loss(state, x, labels, blocks, lam, masks, fused)
    cls_w = state.params["cls.dense"]
    adv_w = state.params["adv.dense"]
    _, d_cls = ops.softmax_xent(f @ cls_w.value, labels)
    _, d_adv = ops.softmax_xent(f @ adv_w.value, blocks)
    cls_w.grad += r * (f.T @ d_cls)
    adv_w.grad += -lam * r * (f.T @ d_adv)
    encoder_backward(state, ctx, r * (d_cls @ cls_w.value.T - lam * (d_adv @ adv_w.value.T)))

    twin = state.astype(oracle_dtype)
    xt = np.asarray(x).astype(oracle_dtype)
    worst = 0.0
    for name, p in twin.params.items():
        flat = p.value.reshape(-1)
        analytic = state.params[name].grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = _phase_b_loss(twin, xt, labels, blocks, lam, masks, fused)[0]
            flat[i] = orig - step
            fm = _phase_b_loss(twin, xt, labels, blocks, lam, masks, fused)[0]
            flat[i] = orig
            num = float(r * (fp - fm) / (2 * step))
            a = float(analytic[i])
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
    state.zero_grad()
    return worst


def brute_force_auc(scores, labels):
    """Pairwise concordance with ties counted 1/2, O(N^2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (pos.size * neg.size)


def brute_force_wilcoxon(x, y):
    """Two-sided signed-rank p by enumerating all 2^m sign flips of the non-zero differences.

    Ranks are average ranks of |d| computed by direct counting, independent of
    the library's rank routine.
    """
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    d = d[d != 0]
    a = np.abs(d)
    ranks = np.array([(a < v).sum() + ((a == v).sum() + 1) / 2.0 for v in a])
    w_plus = ranks[d > 0].sum()
    w_minus = ranks[d < 0].sum()
    stat = min(w_plus, w_minus)
    hits = 0
    total = 0
    for signs in itertools.product((0, 1), repeat=d.size):
        wp = float(np.dot(signs, ranks))
        if min(wp, ranks.sum() - wp) <= stat + 1e-9:
            hits += 1
        total += 1
    # min(W+, W-) <= stat is the two-sided event; its probability is already two-sided
    return stat, min(1.0, hits / total)
