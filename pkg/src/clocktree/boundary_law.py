"""Boundary laws, the localized marginal and its tree-indexed transition matrix.

A boundary law is a positive vector ``u`` with ``u = c (Q * u)^d``.  All
work happens on ``log u``; the gauge is fixed by ``max u = 1``.

The plain normalized iteration is unstable in directions that move mass
between spins of ``A`` (the linearisation has gain about ``d`` there), so
the solver only uses it for a short warm start from the indicator of ``A``
and then finishes with Newton steps on the gauge-fixed equation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .model import ClockModel, ConstantsBundle, epsilon_norm


class NoConvergence(RuntimeError):
    def __init__(self, max_iter: int, residual: float):
        super().__init__(f"boundary law did not converge in {max_iter} iterations (residual {residual:.3e})")
        self.max_iter = max_iter
        self.residual = residual


class WrongBranch(RuntimeError):
    def __init__(self, A, mass_outside: float, threshold: float):
        super().__init__(
            f"solution is not localized on A={list(A)}: mass outside A is {mass_outside:.6g} "
            f"(needs < {threshold:.6g}); beta is probably too small"
        )
        self.A = tuple(A)
        self.mass_outside = mass_outside
        self.threshold = threshold


class PreconditionViolated(RuntimeError):
    pass


@dataclass(frozen=True)
class BoundaryLaw:
    log_u: np.ndarray
    residual: float
    iterations: int

    @property
    def u(self) -> np.ndarray:
        return np.exp(self.log_u)


@dataclass(frozen=True)
class ChainSpec:
    A: tuple[int, ...]
    pi: np.ndarray
    P: np.ndarray
    lambda2: float
    residual: float
    d: int | None = None
    log_pi: np.ndarray | None = None
    log_P: np.ndarray | None = None

    @property
    def q(self) -> int:
        return len(self.pi)

    @property
    def in_A(self) -> np.ndarray:
        mask = np.zeros(self.q, dtype=bool)
        mask[list(self.A)] = True
        return mask

    @property
    def logpi(self) -> np.ndarray:
        return self.log_pi if self.log_pi is not None else np.log(self.pi)

    @property
    def logP(self) -> np.ndarray:
        return self.log_P if self.log_P is not None else np.log(self.P)

    def to_dict(self) -> dict:
        return {
            "A": list(self.A),
            "pi": [float(x) for x in self.pi],
            "P": [[float(x) for x in row] for row in self.P],
            "lambda2": float(self.lambda2),
            "residual": float(self.residual),
            "d": self.d,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ChainSpec":
        pi = np.asarray(data["pi"], dtype=float)
        P = np.asarray(data["P"], dtype=float)
        return cls(
            A=tuple(int(a) for a in data["A"]),
            pi=pi,
            P=P,
            lambda2=float(data["lambda2"]),
            residual=float(data["residual"]),
            d=data.get("d"),
        )


def _log_image(log_Qm: np.ndarray, log_u: np.ndarray, d: int) -> np.ndarray:
    """``log (Q * u)^d``, not normalized."""
    return d * logsumexp(log_Qm + log_u[None, :], axis=1)


def _normalize(lv: np.ndarray) -> np.ndarray:
    return lv - lv.max()


def _log_residual(log_Qm, log_u, d) -> float:
    return float(np.max(np.abs(_normalize(_log_image(log_Qm, log_u, d)) - log_u)))


def _linear_residual(log_Qm, log_u, d) -> float:
    img = np.exp(_normalize(_log_image(log_Qm, log_u, d)))
    return float(np.max(np.abs(img - np.exp(log_u))))


def _newton(log_Qm, log_u, d, tol, max_iter):
    """Newton on ``d*LSE_j(logQ(i-j) + v_j) - v_i - c = 0`` with ``v_k = 0``.

    ``k`` is the current argmax, which pins the gauge.  Returns the
    normalized solution and the number of steps taken.
    """
    q = len(log_u)
    v = log_u.copy()
    k = int(np.argmax(v))

    def F(v, c):
        g = _log_image(log_Qm, v, d) - v - c
        return np.append(g, v[k])

    c = float(np.max(_log_image(log_Qm, v, d)))
    for it in range(1, max_iter + 1):
        r = F(v, c)
        if _log_residual(log_Qm, v - v.max(), d) <= tol:
            return _normalize(v), it - 1
        W = np.exp(log_Qm + v[None, :] - logsumexp(log_Qm + v[None, :], axis=1, keepdims=True))
        J = np.zeros((q + 1, q + 1))
        J[:q, :q] = d * W - np.eye(q)
        J[:q, q] = -1.0
        J[q, k] = 1.0
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            break
        # backtracking keeps the iterate sane far from the root
        norm0 = np.max(np.abs(r))
        s = 1.0
        while s > 1e-6:
            v_new = v + s * step[:q]
            c_new = c + s * step[q]
            if np.max(np.abs(F(v_new, c_new))) < norm0 or s < 1e-3:
                break
            s *= 0.5
        v, c = v_new, c_new
    return _normalize(v), max_iter


def solve_boundary_law(
    model: ClockModel,
    A,
    tol: float = 1e-13,
    max_iter: int = 500,
    warmup: int = 5,
) -> BoundaryLaw:
    """Find the boundary law localized on ``A``.

    Raises ``NoConvergence`` when the residual stays above ``tol`` and
    ``WrongBranch`` when the reached solution puts too much mass off ``A``
    (mass outside ``A`` must stay below half its uniform share,
    ``|A^c| / (2q)``).
    """
    A = tuple(sorted(set(int(a) for a in A)))
    q, d = model.q, model.d
    if not A or any(a < 0 or a >= q for a in A):
        raise ValueError(f"A must be a nonempty subset of 0..{q - 1}, got {A}")
    log_Qm = model.log_Q_matrix

    # warm start: a few plain normalized steps from the indicator of A
    ind = np.full(q, -np.inf)
    ind[list(A)] = 0.0
    lu = _normalize(_log_image(log_Qm, ind, d))
    for _ in range(warmup - 1):
        lu = _normalize(_log_image(log_Qm, lu, d))

    lu, steps = _newton(log_Qm, lu, d, tol, max_iter)
    res_log = _log_residual(log_Qm, lu, d)
    if not np.isfinite(res_log) or res_log > tol:
        raise NoConvergence(max_iter, res_log)
    law = BoundaryLaw(log_u=lu, residual=_linear_residual(log_Qm, lu, d), iterations=warmup + steps)

    Ac = [i for i in range(q) if i not in A]
    if Ac:
        log_pi = _log_marginal(lu, d)
        mass = float(np.exp(logsumexp(log_pi[Ac])))
        threshold = len(Ac) / (2 * q)
        if not mass < threshold:
            raise WrongBranch(A, mass, threshold)
    return law


def _log_marginal(log_u: np.ndarray, d: int) -> np.ndarray:
    w = (d + 1) / d * log_u
    return w - logsumexp(w)


def marginal_from_law(law, d: int) -> np.ndarray:
    """``pi(i)`` proportional to ``u(i)^{(d+1)/d}``."""
    log_u = law.log_u if isinstance(law, BoundaryLaw) else np.log(np.asarray(law, dtype=float))
    return np.exp(_log_marginal(log_u, d))


def log_transition_matrix(model: ClockModel, log_pi: np.ndarray) -> np.ndarray:
    w = model.d / (model.d + 1) * np.asarray(log_pi, dtype=float)
    raw = model.log_Q_matrix + w[None, :]
    return raw - logsumexp(raw, axis=1, keepdims=True)


def transition_matrix(model: ClockModel, pi: np.ndarray) -> np.ndarray:
    """``P(i, j) = pi(j)^{d/(d+1)} Q(i-j) / (Q * pi^{d/(d+1)})(i)``."""
    return np.exp(log_transition_matrix(model, np.log(np.asarray(pi, dtype=float))))


def spectral_gap(P: np.ndarray, pi: np.ndarray | None = None, tol: float = 1e-13, max_iter: int = 100_000) -> float:
    """Second-largest eigenvalue modulus of a reversible chain.

    Uses power iteration on the square of the symmetrised matrix with the
    Perron direction projected out.  ``pi`` defaults to the left Perron
    vector of ``P``.
    """
    P = np.asarray(P, dtype=float)
    q = P.shape[0]
    if pi is None:
        vals, vecs = np.linalg.eig(P.T)
        v = np.real(vecs[:, np.argmax(np.real(vals))])
        pi = v / v.sum()
    s = np.sqrt(np.asarray(pi, dtype=float))
    S = (s[:, None] * P) / s[None, :]
    S = 0.5 * (S + S.T)
    S = S - np.outer(s, s)
    S2 = S @ S
    x = np.cos(np.arange(1, q + 1) * 1.3)  # fixed start, not orthogonal to anything special
    x -= (x @ s) * s
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(max_iter):
        y = S2 @ x
        y -= (y @ s) * s
        nrm = np.linalg.norm(y)
        if nrm == 0.0:
            return 0.0
        y /= nrm
        new = float(np.sqrt(nrm))
        if abs(new - est) <= tol * max(new, 1e-300) and np.linalg.norm(y - x) < 1e-9:
            est = new
            break
        x, est = y, new
    return min(est, 1.0)


def build_chain(model: ClockModel, A, tol: float = 1e-13, max_iter: int = 500) -> ChainSpec:
    """Solve the boundary law for ``A`` and assemble the chain."""
    law = solve_boundary_law(model, A, tol=tol, max_iter=max_iter)
    log_pi = _log_marginal(law.log_u, model.d)
    log_P = log_transition_matrix(model, log_pi)
    pi, P = np.exp(log_pi), np.exp(log_P)
    return ChainSpec(
        A=tuple(sorted(set(int(a) for a in A))),
        pi=pi,
        P=P,
        lambda2=spectral_gap(P, pi),
        residual=law.residual,
        d=model.d,
        log_pi=log_pi,
        log_P=log_P,
    )


def detailed_balance_error(spec: ChainSpec) -> float:
    F = spec.pi[:, None] * spec.P
    return float(np.max(np.abs(F - F.T)))


def stationarity_error(spec: ChainSpec) -> float:
    return float(np.max(np.abs(spec.pi @ spec.P - spec.pi)))


def verify_localization(spec: ChainSpec, model: ClockModel, bundle: ConstantsBundle, strict: bool = False) -> dict:
    """Check the four localisation bounds and report margins.

    Each entry carries ``value``, ``bound`` and ``margin`` (positive when the
    bound holds).  When ``epsilon > eta`` the bounds are not guaranteed; the
    report is then marked ``conditioned: false`` and, with ``strict=True``,
    ``PreconditionViolated`` is raised after building it.
    """
    d, beta, u = model.d, model.beta, model.u
    A = list(spec.A)
    Ac = [i for i in range(spec.q) if i not in spec.A]
    n = len(A)
    diag = np.diag(spec.P)
    C1, C2 = bundle.C1, bundle.C2

    # (i) diagonal off A in the (d+1)/(d-1) norm
    p = (d + 1) / (d - 1)
    lhs_i = float(np.sum(diag[Ac] ** p) ** (1 / p)) if Ac else 0.0
    rhs_i = C1 * np.exp(-(d - 1) * beta * u)
    # (ii) in complementary form: off-diagonal row mass on A below C2 e^{-beta u}
    logP = spec.logP
    off = [float(logsumexp(np.delete(logP[a], a))) for a in A]
    log_rhs_ii = np.log(C2) - beta * u
    worst_off = float(np.exp(max(off)))
    # (iii) mass outside A
    lhs_iii = float(np.exp(logsumexp(spec.logpi[Ac]))) if Ac else 0.0
    rhs_iii = float(np.exp(np.log(C1) - (d + 1) * beta * u))
    # (iv) near-equidistribution on A, via the deficiency 1 - n*pi(a)
    piA = spec.pi[A]
    deficiency = np.array([lhs_iii + sum(spec.pi[b] - spec.pi[a] for b in A if b != a) for a in A])
    x = (C1 + C2) * np.exp(-beta * u)
    y = C2 * np.exp(-beta * u)
    lo_room = x - deficiency.max()
    hi_room = (y / (1 - y) + deficiency.min()) if y < 1 else float("inf")

    checks = {
        "i": {"value": lhs_i, "bound": float(rhs_i), "margin": float(rhs_i - lhs_i), "pass": bool(lhs_i <= rhs_i)},
        "ii": {
            "value": float(diag[A].min()),
            "bound": float(1 - np.exp(log_rhs_ii)),
            "margin": float(np.exp(log_rhs_ii) - worst_off),
            "pass": bool(max(off) < log_rhs_ii),
        },
        "iii": {"value": lhs_iii, "bound": rhs_iii, "margin": float(rhs_iii - lhs_iii), "pass": bool(lhs_iii <= rhs_iii)},
        "iv": {
            "value_min": float(piA.min()),
            "value_max": float(piA.max()),
            "lower": float((1 - x) / n),
            "upper": float(1 / ((1 - y) * n)) if y < 1 else float("inf"),
            "margin": float(min(lo_room, hi_room) / n),
            "pass": bool(lo_room >= 0 and hi_room >= 0),
        },
    }
    eps = epsilon_norm(model)
    conditioned = bool(eps <= bundle.eta)
    report = {
        "epsilon": eps,
        "eta": bundle.eta,
        "conditioned": conditioned,
        "bounds": checks,
        "all_pass": all(c["pass"] for c in checks.values()),
        "residual": spec.residual,
        "detailed_balance_error": detailed_balance_error(spec),
        "stationarity_error": stationarity_error(spec),
    }
    if strict and not conditioned:
        raise PreconditionViolated(f"epsilon={eps:.6g} exceeds eta={bundle.eta:.6g}; bounds are not guaranteed")
    return report
