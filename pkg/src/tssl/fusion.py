"""Dempster-Shafer fusion of per-factor belief states and the trust gate.

All operations are polymorphic over engine tensors and plain numpy
arrays. The additive-residual path computes gates in detached numpy
arithmetic (the gate is wrapped in stop-gradient anyway); the
multiplicative ablation computes them in-graph so the gate's gradient
reaches the evidential heads. That dual route is deliberate and must not
be collapsed.
"""

import numpy as np

from . import autodiff as ad

GATE_ALPHA = 2.0
GATE_GAMMA = 3.0
ASYMMETRY_EPS = 0.1


def _is_tensor(x):
    return isinstance(x, ad.Tensor)


def _any_tensor(*xs):
    return any(_is_tensor(x) for x in xs)


def _sum_last(x):
    return ad.sum_(x, axis=-1) if _is_tensor(x) else np.sum(x, axis=-1)


def _exp(x):
    return ad.exp(x) if _is_tensor(x) else np.exp(x)


def _abs(x):
    return ad.abs_(x) if _is_tensor(x) else np.abs(x)


def _min1(x):
    return ad.minimum_scalar(x, 1.0) if _is_tensor(x) else np.minimum(x, 1.0)


def _values(x):
    return x.data if _is_tensor(x) else np.asarray(x)


def conflict(b1, b2):
    """Cross-view conflict mass K via the closed form.

    K = (sum b1)(sum b2) - sum_i b1_i b2_i, which equals the off-diagonal
    double sum over prototype pairs. Inputs are belief vectors over the
    same M prototypes, batched on leading axes.
    """
    s1, s2 = _values(b1).shape, _values(b2).shape
    if s1[-1] != s2[-1]:
        raise ValueError(f"conflict: prototype counts differ, {s1[-1]} vs {s2[-1]}")
    return _sum_last(b1) * _sum_last(b2) - _sum_last(b1 * b2)


def fused_ignorance(u1, u2, k, eps: float = ASYMMETRY_EPS):
    """I = min(1, u1*u2/(1-K) + eps*|u1-u2|)."""
    if np.any(_values(k) >= 1.0):
        raise ValueError("fused_ignorance: conflict K must be < 1")
    raw = u1 * u2 / (1.0 - k) + eps * _abs(u1 - u2)
    return _min1(raw)


def trust_gate(k, i, lam_min, alpha: float = GATE_ALPHA, gamma: float = GATE_GAMMA):
    """w = lam_min + (1 - lam_min) * exp(-alpha*K - gamma*I), in [lam_min, 1]."""
    kv, iv = _values(k), _values(i)
    if np.any(kv < 0.0) or np.any(kv >= 1.0):
        raise ValueError("trust_gate: K must lie in [0, 1)")
    if np.any(iv < 0.0) or np.any(iv > 1.0):
        raise ValueError("trust_gate: I must lie in [0, 1]")
    if not (0.0 < lam_min < 1.0):
        raise ValueError(f"trust_gate: lam_min must lie in (0, 1), got {lam_min}")
    decay = _exp(-(k * alpha + i * gamma))
    return lam_min + decay * (1.0 - lam_min)


def gate_from_states(state1, state2, lam_min, alpha: float = GATE_ALPHA,
                     gamma: float = GATE_GAMMA, in_graph: bool = False):
    """(K, I, w) for two per-factor evidence states.

    in_graph=False: detached numpy values (additive path; the caller wraps
    the result conceptually in stop-gradient by never touching the graph).
    in_graph=True: engine tensors carrying gradients (multiplicative path).
    """
    if in_graph:
        b1, b2, u1, u2 = state1.belief, state2.belief, state1.ignorance, state2.ignorance
    else:
        b1, b2 = state1.belief.data, state2.belief.data
        u1, u2 = state1.ignorance.data, state2.ignorance.data
    k = conflict(b1, b2)
    i = fused_ignorance(u1, u2, k)
    w = trust_gate(k, i, lam_min, alpha, gamma)
    return k, i, w


def cosine_gate(z1, z2, tau):
    """Ablation gate sigma(cos(z1, z2) / tau) on detached embeddings."""
    z1v, z2v = _values(z1), _values(z2)
    tauv = np.asarray(_values(tau))
    if np.any(tauv <= 0.0):
        raise ValueError("cosine_gate: temperature must be positive")
    cos = np.sum(z1v * z2v, axis=-1)
    arg = cos / tauv
    # Stable logistic.
    return np.exp(-np.logaddexp(0.0, -arg))
