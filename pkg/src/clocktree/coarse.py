"""Tilted moments of the irregular-edge count and the bad-event bound chain.

An edge ``{i, j}`` is irregular for ``A`` when ``i != j`` or one endpoint
lies outside ``A``.  For a subtree gamma we compare, for every tilt
``t >= 0``:

    P(#irregular >= delta0 |gamma|)
        <= e^{-t delta0 |gamma|} E[e^{t #irregular}]          (Markov)
        <= e^{-t delta0 |gamma|} coarse moment                 (2-state majorant)
        <= e^{-t delta0 |gamma|} 2 C1 (f e^t + 1)^{1 + d|gamma|}
        <= C4 e^{-lambda |gamma|}   at the optimal t, when lambda > 0

Everything is evaluated in log space; the tilts and subtree sizes involved
overflow ordinary floats quickly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .boundary_law import ChainSpec
from .model import ConstantsBundle
from .subtree import SubTree


class SizeLimit(ValueError):
    pass


MAX_ENUMERATION = 12


def irregular_mask(q: int, A) -> np.ndarray:
    """Boolean q x q matrix, True where the edge ``{i, j}`` is irregular."""
    inA = np.zeros(q, dtype=bool)
    inA[list(A)] = True
    same = np.eye(q, dtype=bool)
    return ~(same & inA[:, None] & inA[None, :])


def _lse(x, axis=None):
    x = np.asarray(x, dtype=float)
    if x.size == 0 or np.all(np.isneginf(x)):
        return -np.inf
    return float(logsumexp(x, axis=axis))


@dataclass(frozen=True)
class CoarseMatrix:
    log_M: np.ndarray  # rows/cols: 0 <-> A^c, 1 <-> A
    t: float

    @property
    def M(self) -> np.ndarray:
        return np.exp(self.log_M)


def coarse_matrix(spec: ChainSpec, t: float) -> CoarseMatrix:
    """Worst-case tilted transition weights between ``A^c`` and ``A``.

    Suprema over an empty ``A^c`` are taken to be 0.
    """
    logP = spec.logP
    A = list(spec.A)
    Ac = [i for i in range(spec.q) if i not in spec.A]
    neg = -np.inf

    def sup(rows, cols_of):
        vals = [_lse(logP[a, cols_of(a)]) for a in rows]
        return max(vals) if vals else neg

    m00 = sup(Ac, lambda a: Ac) + t
    m10 = sup(A, lambda a: Ac) + t
    m01 = sup(Ac, lambda a: A) + t
    m11 = max(
        float(np.logaddexp(_lse(logP[a, [b for b in A if b != a]]) + t, logP[a, a])) for a in A
    )
    return CoarseMatrix(np.array([[m00, m01], [m10, m11]]), float(t))


def _tree_children(cp):
    kids = [[] for _ in cp]
    for v in range(1, len(cp)):
        kids[cp[v]].append(v)
    return kids


def _log_tree_sum(cp, log_root: np.ndarray, log_K: np.ndarray) -> float:
    """``log sum_sigma root(sigma_0) prod_edges K(sigma_parent, sigma_child)``.

    Leaf-to-root message passing; children always carry larger ids.
    """
    k = log_root.shape[0]
    msg = np.zeros((len(cp), k))
    for v in range(len(cp) - 1, 0, -1):
        # message sent from v to its parent, indexed by the parent's state
        up = logsumexp(log_K + msg[v][None, :], axis=1)
        msg[cp[v]] += up
    return float(logsumexp(log_root + msg[0]))


def log_exact_moment(spec: ChainSpec, subtree: SubTree, t: float) -> float:
    """``log E[exp(t * #irregular edges touching gamma)]`` under the chain."""
    mask = irregular_mask(spec.q, spec.A)
    log_K = spec.logP + t * mask
    return _log_tree_sum(subtree.closure_parent, spec.logpi, log_K)


def exact_moment(spec: ChainSpec, subtree: SubTree, t: float) -> float:
    return math.exp(log_exact_moment(spec, subtree, t))


def _log_coarse_root(spec: ChainSpec) -> np.ndarray:
    inA = spec.in_A
    lp = spec.logpi
    return np.array([_lse(lp[~inA]), _lse(lp[inA])])


def log_coarse_moment(spec: ChainSpec, subtree: SubTree, t: float) -> float:
    """Same tree sum with the 2-state majorant ``M`` on every edge."""
    cm = coarse_matrix(spec, t)
    return _log_tree_sum(subtree.closure_parent, _log_coarse_root(spec), cm.log_M)


def coarse_moment(spec: ChainSpec, subtree: SubTree, t: float) -> float:
    return math.exp(log_coarse_moment(spec, subtree, t))


def log_propagation_bound(gamma_size: int, bundle: ConstantsBundle, t: float) -> float:
    """``log 2 C1 (f e^t + 1)^{1 + d|gamma|}``."""
    return math.log(2 * bundle.C1) + (1 + bundle.d * gamma_size) * float(np.logaddexp(0.0, bundle.log_f_beta + t))


def m_entry_bounds(model, bundle: ConstantsBundle, t: float) -> np.ndarray:
    """Closed-form upper bounds on the entries of ``M`` (same layout)."""
    d, beta, u, U = model.d, model.beta, model.u, model.U
    C1, C3 = bundle.C1, bundle.C3
    b11 = C3 * math.exp(-beta * u + t) + 1
    b10 = math.exp(math.log(C3) - (d + 1) * beta * u + t)
    b01 = math.exp(t)
    b00 = math.exp(math.log(C3) - beta * ((d + 1) * u - U) + t) + math.exp(math.log(C1) - (d - 1) * beta * u + t)
    return np.array([[b00, b01], [b10, b11]])


def m10_holder_bound(model, bundle: ConstantsBundle, t: float) -> float:
    """Bound on ``M(1,0)`` straight from the Hoelder estimate, before the
    prefactor is simplified:
    ``C1^{d/(d+1)} (1-(C1+C2)e^{-beta u})^{-d/(d+1)} n^{d/(d+1)} (q-1)^{1/(d+1)} e^{-(d+1) beta u + t}``.

    Infinite when ``(C1 + C2) e^{-beta u} >= 1``.
    """
    d, beta, u = model.d, model.beta, model.u
    base = 1 - (bundle.C1 + bundle.C2) * math.exp(-beta * u)
    if base <= 0:
        return float("inf")
    e = d / (d + 1)
    log_b = (
        e * math.log(bundle.C1) - e * math.log(base) + e * math.log(bundle.n)
        + math.log(model.q - 1) / (d + 1) - (d + 1) * beta * u + t
    )
    return math.exp(log_b)


def log_h(t, gamma_size: int, bundle: ConstantsBundle):
    """``log h(t) = -t delta0 |gamma| + (1 + d|gamma|) log(f e^t + 1)``."""
    g = gamma_size
    return -t * bundle.delta0 * g + (1 + bundle.d * g) * np.logaddexp(0.0, bundle.log_f_beta + t)


def optimal_t(gamma_size: int, bundle: ConstantsBundle) -> tuple[float, float]:
    """Minimiser of ``h`` and its clamp to ``t >= 0``."""
    g = gamma_size
    m = bundle.delta0 * g
    N = 1 + bundle.d * g
    raw = math.log(m) - math.log(N - m) - bundle.log_f_beta
    return raw, max(raw, 0.0)


@dataclass(frozen=True)
class BadEventBound:
    gamma_size: int
    log_final: float         # log C4 e^{-lambda |gamma|}
    log_closing_form: float  # log 2 C1 ((1+d)/delta0)^{1+d|gamma|} f^{delta0 |gamma|}
    log_optimized: float     # log 2 C1 h(t*) at the clamped minimiser
    t_star: float
    t_clamped: float

    @property
    def final(self) -> float:
        return math.exp(min(self.log_final, 700.0))

    @property
    def closing_form(self) -> float:
        return math.exp(min(self.log_closing_form, 700.0))

    @property
    def optimized(self) -> float:
        return math.exp(min(self.log_optimized, 700.0))


def bad_event_bound(gamma_size: int, bundle: ConstantsBundle) -> BadEventBound:
    """Tail bound for the bad event of a subtree with ``|gamma| = gamma_size``.

    ``closing_form`` is the same number as ``final`` written before the
    constants are collected; ``optimized`` is the sharper value the Markov
    argument actually delivers.
    """
    g = gamma_size
    d, delta0 = bundle.d, bundle.delta0
    log_final = math.log(bundle.C4) - bundle.lambda_beta * g
    log_closing = (
        math.log(2 * bundle.C1)
        + (1 + d * g) * math.log((1 + d) / delta0)
        + delta0 * g * bundle.log_f_beta
    )
    raw, clamped = optimal_t(g, bundle)
    log_opt = math.log(2 * bundle.C1) + float(log_h(clamped, g, bundle))
    return BadEventBound(g, log_final, log_closing, log_opt, raw, clamped)


def log_bad_count_distribution(spec: ChainSpec, subtree: SubTree) -> np.ndarray:
    """``log P(#irregular edges touching gamma = k)`` for ``k = 0..|E(gamma)|``."""
    cp = subtree.closure_parent
    q = spec.q
    mask = irregular_mask(q, spec.A)
    logP = spec.logP
    kids = _tree_children(cp)
    # msg[v][i, k]: log prob that the edges below v carry k irregulars, given sigma_v = i
    msg: list[np.ndarray | None] = [None] * len(cp)
    for v in range(len(cp) - 1, -1, -1):
        cur = np.full((q, 1), 0.0)
        for c in kids[v]:
            child = msg[c]
            msg[c] = None
            kc = child.shape[1]
            # through the edge (v, c): shift by one where the edge is irregular
            through = np.full((q, kc + 1), -np.inf)
            for i in range(q):
                reg = logP[i, ~mask[i]][:, None] + child[~mask[i]]
                irr = logP[i, mask[i]][:, None] + child[mask[i]]
                if reg.size:
                    through[i, :kc] = np.logaddexp(through[i, :kc], logsumexp(reg, axis=0))
                if irr.size:
                    through[i, 1:] = np.logaddexp(through[i, 1:], logsumexp(irr, axis=0))
            new = np.full((q, cur.shape[1] + kc), -np.inf)
            for a in range(cur.shape[1]):
                new[:, a:a + kc + 1] = np.logaddexp(new[:, a:a + kc + 1], cur[:, a:a + 1] + through)
            cur = new
        msg[v] = cur
    root = spec.logpi[:, None] + msg[0]
    with np.errstate(divide="ignore"):
        return logsumexp(root, axis=0)


def bad_probability(spec: ChainSpec, subtree: SubTree, delta0: float) -> float:
    """Exact probability of at least ``delta0 |gamma|`` irregular edges (any size)."""
    lp = log_bad_count_distribution(spec, subtree)
    ks = np.arange(lp.size)
    sel = ks >= delta0 * subtree.size
    if not sel.any():
        return 0.0
    return float(min(1.0, math.exp(_lse(lp[sel]))))


def exact_bad_probability(spec: ChainSpec, subtree: SubTree, delta0: float, chunk: int = 1 << 18) -> float:
    """Bad-event probability by summing the chain weight of every configuration.

    Restricted to closures of at most 12 vertices.
    """
    n = subtree.closure_size
    if n > MAX_ENUMERATION:
        raise SizeLimit(f"closure has {n} vertices; enumeration is limited to {MAX_ENUMERATION}")
    q = spec.q
    cp = np.asarray(subtree.closure_parent)
    mask = irregular_mask(q, spec.A)
    logP, logpi = spec.logP, spec.logpi
    threshold = delta0 * subtree.size
    total = q**n
    radix = q ** np.arange(n - 1, -1, -1)
    acc = []
    for start in range(0, total, chunk):
        idx = np.arange(start, min(total, start + chunk))
        sig = (idx[:, None] // radix[None, :]) % q
        logw = logpi[sig[:, 0]].copy()
        count = np.zeros(len(idx), dtype=np.int64)
        for v in range(1, n):
            a, b = sig[:, cp[v]], sig[:, v]
            logw += logP[a, b]
            count += mask[a, b]
        hit = count >= threshold
        if hit.any():
            acc.append(logsumexp(logw[hit]))
    if not acc:
        return 0.0
    return float(min(1.0, math.exp(logsumexp(acc))))


def markov_bound(spec: ChainSpec, subtree: SubTree, delta0: float, t: float) -> float:
    """``e^{-t delta0 |gamma|} E[e^{t #irregular}]``."""
    return math.exp(log_exact_moment(spec, subtree, t) - t * delta0 * subtree.size)
