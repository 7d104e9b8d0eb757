"""Contrastive, fairness and combined minimax losses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkernel as nk
from .model import ModelParams, disc_forward, gradient_reversal, image_forward, text_forward


@dataclass
class BatchWeights:
    w: np.ndarray
    n: np.ndarray


@dataclass
class LossBreakdown:
    l_gcl: float
    l_fair: float
    l_total: float
    disc_acc: float = float("nan")
    grad_norms: dict = field(default_factory=dict)


def info_nce(v, u, tau: float) -> nk.DualResult:
    """Bidirectional InfoNCE over cosine similarities of unit rows.

    Per pair ``i`` the image-to-text and text-to-image log-likelihoods are
    summed, then averaged over the batch. ``backward(dout)`` returns
    ``(dv, du, dtau)``.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    v, u = nk.as_tensor(v), nk.as_tensor(u)
    if v.shape != u.shape:
        raise nk.DimensionError(f"embedding shapes differ: {v.shape} vs {u.shape}")
    n = v.shape[0]
    sim = v @ u.T
    logits = sim / tau
    i2t = nk.log_softmax_rows(logits)
    t2i = nk.log_softmax_rows(logits.T)
    loss = 0.0 - (np.trace(i2t.output) + np.trace(t2i.output)) / n

    def backward(dout):
        dout = float(np.asarray(dout).reshape(-1)[0])
        diag = -np.eye(n) * (dout / n)
        (g_rows,) = i2t.backward(diag)
        (g_cols,) = t2i.backward(diag)
        dlogits = g_rows + g_cols.T
        dsim = dlogits / tau
        dv = dsim @ u
        du = dsim.T @ v
        dtau = -float(np.sum(dlogits * sim)) / tau ** 2
        return dv, du, dtau

    return nk.DualResult(np.array([[loss]]), backward)


def batch_weights(y_attr, C_attr: int) -> BatchWeights:
    y = np.asarray(y_attr, dtype=np.int64)
    n = np.bincount(y, minlength=C_attr).astype(np.float64)
    if n.size > C_attr:
        raise ValueError(f"attribute index {int(y.max())} out of range for C_attr={C_attr}")
    w = np.zeros(C_attr)
    present = n > 0
    w[present] = 1.0 / n[present]
    return BatchWeights(w, n)


def fair_loss(s, y_attr, weights: BatchWeights) -> nk.DualResult:
    """Class-reweighted cross-entropy of the attribute logits ``s``.

    ``-(1/N) sum_k w[y_k] * log_softmax(s_k)[y_k]``.
    """
    s = nk.as_tensor(s)
    y = np.asarray(y_attr, dtype=np.int64).reshape(-1)
    if y.shape[0] != s.shape[0]:
        raise nk.DimensionError(f"{s.shape[0]} logit rows but {y.shape[0]} labels")
    if weights.w.shape[0] != s.shape[1]:
        raise nk.DimensionError(f"{s.shape[1]} logit columns but {weights.w.shape[0]} weights")
    n = s.shape[0]
    rows = np.arange(n)
    lsm = nk.log_softmax_rows(s)
    wk = weights.w[y]
    loss = -float(np.sum(wk * lsm.output[rows, y])) / n

    def backward(dout):
        dout = float(np.asarray(dout).reshape(-1)[0])
        g = np.zeros_like(s)
        g[rows, y] = -wk * dout / n
        return lsm.backward(g)

    return nk.DualResult(np.array([[loss]]), backward)


def _group_norms(params: ModelParams, grads: dict) -> dict:
    norms = {}
    for group in ("w_v", "w_u", "w_d", "tau"):
        names = [n for n in params.names(group) if n in grads]
        if names:
            norms[group] = float(np.sqrt(sum(np.sum(grads[n] ** 2) for n in names)))
    return norms


def adfair_objective(params: ModelParams, batch, alpha: float, fair_path: bool = True):
    """One forward and backward pass of the minimax objective.

    ``batch`` needs ``images``, ``tokens``, ``masks`` and ``y_attr``. The
    discriminator gradients descend the fair loss; the encoder gradients
    descend ``l_gcl - alpha * l_fair`` through a gradient-reversal junction
    on the discriminator input. With ``fair_path=False`` the discriminator
    is not evaluated at all (contrastive-only training).

    Returns ``(LossBreakdown, grads)`` with ``grads`` keyed by parameter name.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    arch = params.arch
    h_v, v, img_bw = image_forward(params, batch.images)
    h_u, u, txt_bw = text_forward(params, batch.tokens, batch.masks)
    tau = params.tau
    gcl = info_nce(v, u, tau)
    dv, du, dtau = gcl.backward(1.0)
    l_gcl = float(gcl.output[0, 0])

    grads: dict = {}
    dh_v = dh_u = None
    l_fair = 0.0
    disc_acc = float("nan")
    if fair_path:
        rev_v = gradient_reversal(h_v, alpha)
        rev_u = gradient_reversal(h_u, alpha)
        s, disc_bw = disc_forward(params, rev_v.output, rev_u.output)
        weights = batch_weights(batch.y_attr, arch.C_attr)
        fair = fair_loss(s, batch.y_attr, weights)
        l_fair = float(fair.output[0, 0])
        disc_acc = float(np.mean(np.argmax(s, axis=1) == np.asarray(batch.y_attr)))
        (ds,) = fair.backward(1.0)
        d_grads, ds_hv, ds_hu = disc_bw(ds)
        grads.update(d_grads)
        (dh_v,) = rev_v.backward(ds_hv)
        if ds_hu is not None:
            (dh_u,) = rev_u.backward(ds_hu)

    grads.update(img_bw(dh_v, dv))
    grads.update(txt_bw(dh_u, du))
    if params.tau_learnable:
        grads["log_tau"] = np.array([[dtau * tau]])

    breakdown = LossBreakdown(
        l_gcl=l_gcl,
        l_fair=l_fair,
        l_total=l_gcl - alpha * l_fair,
        disc_acc=disc_acc,
        grad_norms=_group_norms(params, grads),
    )
    return breakdown, grads


def contrastive_loss(params: ModelParams, images, tokens, masks) -> float:
    _, v, _ = image_forward(params, images)
    _, u, _ = text_forward(params, tokens, masks)
    return float(info_nce(v, u, params.tau).output[0, 0])
