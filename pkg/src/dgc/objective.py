"""Sparsity-weighted multi-label cross-entropy and the Adam update."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


class NumericalError(FloatingPointError):
    """The loss evaluated to a non-finite value."""


def batch_weights(targets) -> tuple[float, float]:
    """Positive/negative weights from one mini-batch's target matrix.

    ``w_pos = (|P| + |N|) / |P|`` and ``w_neg = (|P| + |N|) / |N|``, where
    ``|P|``/``|N|`` count the ones/zeros of the whole matrix.  When one side is
    empty its weight is unused and the other falls back to 1.
    """
    y = np.asarray(targets)
    if np.any((y != 0) & (y != 1)):
        raise ValueError("targets must be binary")
    total = y.size
    n_pos = int(np.count_nonzero(y))
    n_neg = total - n_pos
    if n_pos == 0 or n_neg == 0:
        logger.warning("degenerate target matrix (|P|=%d, |N|=%d); using unit weights", n_pos, n_neg)
        return 1.0, 1.0
    return total / n_pos, total / n_neg


def _check_finite(loss: Tensor, per_entry: np.ndarray) -> Tensor:
    if not np.isfinite(loss.data).all():
        bad = np.argwhere(~np.isfinite(per_entry))
        where = tuple(int(i) for i in bad[0]) if len(bad) else "?"
        raise NumericalError(f"non-finite loss at entry {where}")
    return loss


def weighted_bce_loss(probs: Tensor, targets, clamp: bool = True) -> Tensor:
    """Weighted cross-entropy from probabilities, summed over the batch.

    Built from taped primitives; probabilities are clamped to
    ``[1e-7, 1 - 1e-7]`` unless ``clamp`` is false.
    """
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    y = np.asarray(targets, dtype=probs.dtype)
    if y.shape != probs.shape:
        raise ShapeError(f"loss: probabilities {probs.shape} vs targets {y.shape}")
    w_pos, w_neg = batch_weights(y)
    p = ad.clamp(probs, PROB_CLAMP, 1 - PROB_CLAMP) if clamp else probs
    one = Tensor(np.ones_like(y))
    pos_mask = Tensor(-w_pos * y)
    neg_mask = Tensor(-w_neg * (1 - y))
    terms = ad.add(ad.mul(pos_mask, ad.ln(p)), ad.mul(neg_mask, ad.ln(ad.sub(one, p))))
    return _check_finite(ad.tensor_sum(terms), terms.data)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def weighted_bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Same loss as :func:`weighted_bce_loss`, from raw scores in a stable form.

    ``-ln sigmoid(s) = softplus(-s)`` and ``-ln(1 - sigmoid(s)) = softplus(s)``.
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    s = logits.data
    y = np.asarray(targets, dtype=s.dtype)
    if y.shape != s.shape:
        raise ShapeError(f"loss: logits {s.shape} vs targets {y.shape}")
    w_pos, w_neg = batch_weights(y)
    dt = s.dtype.type
    wp, wn = dt(w_pos), dt(w_neg)
    per_entry = np.where(y == 1, wp * _softplus(-s), wn * _softplus(s))
    out = np.asarray(per_entry.sum(), dtype=s.dtype)
    p = ad._sigmoid(s)
    dlogits = np.where(y == 1, wp * (p - 1), wn * p).astype(s.dtype)
    loss = ad._emit("weighted_bce_logits", out, (logits,), lambda g: (g * dlogits,))
    return _check_finite(loss, per_entry)


@dataclass
class AdamState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam step, updating ``params`` and ``state`` in place.

    Parameters without an entry in ``grads`` are treated as having a zero gradient.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1 - b1 ** state.t
    bc2 = 1 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ShapeError(f"adam: gradient {g.shape} for parameter {name!r} of shape {p.shape}")
        dt = p.dtype.type
        g = g.astype(p.dtype, copy=False)
        if state.weight_decay:
            g = g + dt(state.weight_decay) * p
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        else:
            v = state.v[name]
        m = dt(b1) * m + dt(1 - b1) * g
        v = dt(b2) * v + dt(1 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        m_hat = m / dt(bc1)
        v_hat = v / dt(bc2)
        params[name] = p - dt(state.lr) * m_hat / (np.sqrt(v_hat) + dt(state.eps))
