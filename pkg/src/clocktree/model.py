"""Clock models on the d-regular tree and their closed-form constants.

A model is fixed by the number of spin values ``q``, the branching number
``d`` (every vertex has ``d + 1`` neighbours), the inverse temperature
``beta`` and an interaction table ``ubar`` indexed by the cyclic distance
between two neighbouring spins.  Everything that only depends on these
numbers lives here: the transfer operator, the l^{(d+1)/2} smallness
parameter, the root ``rho(d, n)`` and the constant bundle used by the bound
machinery downstream.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp


class AdmissibilityError(ValueError):
    """Raised when an interaction table violates the u,U,d conditions."""


def cyclic_distance(k, q: int):
    """Distance of ``k`` to 0 on the cycle Z_q (works on arrays)."""
    k = np.mod(k, q)
    return np.minimum(k, q - k)


@dataclass(frozen=True)
class ClockModel:
    q: int
    d: int
    beta: float
    ubar: tuple[float, ...]  # indexed by cyclic distance 0..q//2
    u: float = field(init=False)
    U: float = field(init=False)
    admissible: bool = field(init=False)

    def __post_init__(self):
        off = self.ubar[1:]
        object.__setattr__(self, "u", float(min(off)))
        object.__setattr__(self, "U", float(max(off)))
        ok = (self.d**2 + 1) * self.u > self.d * self.U
        object.__setattr__(self, "admissible", bool(ok))

    @property
    def ubar_table(self) -> np.ndarray:
        """Interaction as a length-q array over spin differences."""
        return np.asarray(self.ubar, dtype=float)[cyclic_distance(np.arange(self.q), self.q)]

    @property
    def log_Q(self) -> np.ndarray:
        return -self.beta * self.ubar_table

    @property
    def Q(self) -> np.ndarray:
        return np.exp(self.log_Q)

    @property
    def log_Q_matrix(self) -> np.ndarray:
        """``log Q(i - j)`` as a q x q matrix."""
        idx = np.subtract.outer(np.arange(self.q), np.arange(self.q)) % self.q
        return self.log_Q[idx]

    def with_beta(self, beta: float) -> "ClockModel":
        return build_model(self.q, self.d, beta, self.ubar)

    def to_dict(self) -> dict:
        return {"q": self.q, "d": self.d, "beta": self.beta, "ubar": list(self.ubar)}


def _reduce_ubar(q: int, ubar) -> tuple[float, ...]:
    vals = [float(x) for x in ubar]
    half = q // 2 + 1
    if len(vals) == half:
        return tuple(vals)
    if len(vals) == q:
        for k in range(1, q):
            if not math.isclose(vals[k], vals[q - k], rel_tol=0, abs_tol=1e-12):
                raise AdmissibilityError(
                    f"ubar is not a clock interaction: ubar({k})={vals[k]} != ubar({q - k})={vals[q - k]}"
                )
        return tuple(vals[:half])
    raise AdmissibilityError(f"ubar must have length {half} (by cyclic distance) or {q}, got {len(vals)}")


def build_model(q: int, d: int, beta: float, ubar) -> ClockModel:
    """Validate an interaction table and return the model.

    ``ubar`` is either indexed by cyclic distance (length ``q//2 + 1``) or a
    full symmetric table of length ``q``.
    """
    if int(q) != q or q < 3:
        raise AdmissibilityError(f"q must be an integer >= 3, got {q}")
    if int(d) != d or d < 2:
        raise AdmissibilityError(f"d must be an integer >= 2, got {d}")
    if not beta > 0 or not math.isfinite(beta):
        raise AdmissibilityError(f"beta must be positive and finite, got {beta}")
    table = _reduce_ubar(int(q), ubar)
    if table[0] != 0.0:
        raise AdmissibilityError(f"ubar(0) must be 0 (normalisation Q(0)=1), got {table[0]}")
    if any(not (x > 0 and math.isfinite(x)) for x in table[1:]):
        raise AdmissibilityError("ubar(k) must be positive and finite for k != 0")
    model = ClockModel(int(q), int(d), float(beta), table)
    if not model.admissible:
        lhs = (model.d**2 + 1) * model.u
        rhs = model.d * model.U
        raise AdmissibilityError(
            f"(d^2+1)*u > d*U violated: (d^2+1)*u = {lhs:g} <= d*U = {rhs:g} "
            f"(d={model.d}, u={model.u:g}, U={model.U:g})"
        )
    return model


def potts(q: int, d: int, beta: float) -> ClockModel:
    """Potts interaction: unit cost for every disagreement."""
    return build_model(q, d, beta, [0.0] + [1.0] * (q // 2))


def load_model_config(source) -> tuple[ClockModel, tuple[int, ...], dict]:
    """Read ``{"q", "d", "beta", "ubar", "A", ...}`` from a path, str or dict.

    Returns the model, the localisation set and the full raw mapping so that
    callers can pick up additional keys.
    """
    if isinstance(source, dict):
        raw = dict(source)
    else:
        text = Path(source).read_text() if not str(source).lstrip().startswith("{") else str(source)
        raw = json.loads(text)
    missing = [k for k in ("q", "d", "beta", "ubar") if k not in raw]
    if missing:
        raise ValueError(f"model config is missing keys: {missing}")
    model = build_model(raw["q"], raw["d"], raw["beta"], raw["ubar"])
    A = tuple(sorted(int(a) for a in raw.get("A", range(model.q))))
    return model, A, raw


def transfer_operator(model: ClockModel) -> np.ndarray:
    """``Q(k) = exp(-beta * ubar(k))`` over Z_q."""
    return model.Q


def epsilon_norm(model: ClockModel) -> float:
    """``||Q - 1_{0}||_{(d+1)/2}``, evaluated in log space."""
    p = (model.d + 1) / 2
    # factor out exp(-beta u) so the u == U case reproduces the sandwich exactly
    shift = model.beta * model.u
    log_sum = float(logsumexp(p * (model.log_Q[1:] + shift)))
    return math.exp(log_sum / p - shift)


def epsilon_sandwich(model: ClockModel) -> tuple[float, float]:
    """Lower and upper bounds ``(q-1)^{2/(d+1)} exp(-beta U)`` / ``exp(-beta u)``."""
    pref = float(np.log(model.q - 1)) / ((model.d + 1) / 2)
    return math.exp(pref - model.beta * model.U), math.exp(pref - model.beta * model.u)


def rho(d: int, n: int, tol: float = 1e-12) -> float:
    """Unique root of ``(d-1) r^{d+1} + d n r^{d-1} - n`` in ``(0, d^{-1/(d-1)})``.

    Plain bisection; the polynomial is ``-n`` at 0 and positive at the right
    end of the bracket.
    """
    if d < 2 or n < 1:
        raise ValueError("rho needs d >= 2 and n >= 1")

    def poly(r):
        return (d - 1) * r ** (d + 1) + d * n * r ** (d - 1) - n

    lo, hi = 0.0, d ** (-1.0 / (d - 1))
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if poly(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def eta_quantities(d: int, n: int) -> tuple[float, float]:
    """Return ``(eta, eta0)`` for the localisation threshold."""
    r = rho(d, n)
    eta = (r - r**d) / (r ** (d + 1) + n) ** (d / (d + 1))
    eta0 = d ** (-1.0 / (d - 1)) * (1 - 1 / d) * (n + 1) ** (-d / (d + 1))
    return eta, eta0


@dataclass(frozen=True)
class ConstantsBundle:
    q: int
    d: int
    n: int
    rho: float
    eta: float
    eta0: float
    c1: float
    c2: float
    c3: float
    c4: float
    c5: float
    C1: float
    C2: float
    C3: float
    C4: float
    C5: float
    delta0: float
    c: float
    c_tilde: float
    lambda_beta: float
    eps1: float
    eps2: float
    f_beta: float
    log_eps1: float
    log_eps2: float
    log_f_beta: float

    @property
    def lambda_positive(self) -> bool:
        return self.lambda_beta > 0

    @property
    def vacuous(self) -> bool:
        """True when the bad-event bounds carry no information at this beta."""
        return self.lambda_beta <= 0 or self.eps2 >= 1

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["vacuous"] = self.vacuous
        return out


def constants(model: ClockModel, n: int) -> ConstantsBundle:
    """Evaluate every closed-form constant for ``|A| = n``.

    Small quantities (``eps1``, ``eps2``, ``f``) are formed from their
    logarithms; their logs are kept in the bundle as well.
    """
    q, d, beta, u, U = model.q, model.d, model.beta, model.u, model.U
    if not 1 <= n <= q:
        raise ValueError(f"need 1 <= n <= q, got n={n}")
    r = rho(d, n)
    eta, eta0 = eta_quantities(d, n)

    c1 = r ** (d - 1) / eta ** (d - 1)
    c2 = d * (d ** (1 / (d - 1)) - 1) * (n + 1) ** (d / (d + 1))
    c3 = d ** ((d + 1) / (d - 1)) * c1 ** ((d + 1) / (d - 1)) / n
    c4 = (d + 1) / (d - 1) * c2
    c5 = c1 ** ((d + 1) / (d - 1)) / n + c4

    C1 = 2.0 ** (d + 1) * d**3 * (n + 1) ** d * (q - 1) ** 2
    C2 = 3.0 * d * (d ** (1 / (d - 1)) - 1) * (n + 1) * (q - 1)
    C3 = 2.0 * (q - 1)
    delta0 = 0.5 * (d - 1) * u / (u + U)
    C4 = 2 * C1 * (d + 1) / delta0
    C5 = 2 * (q - 1) * C4

    c = min((d**2 + 1) / d * u - U, 1 / d)
    c_tilde = d * math.log(delta0) - d * math.log(d + 1) - delta0 * math.log(C1 + 2 * C3)
    lam = c_tilde + c * delta0 * beta

    log_eps1 = math.log(C3) - 0.5 * (d - 1) * beta * u
    log_eps2 = math.log(C5) - lam
    log_f = math.log(2 * C3 + C1) - c * beta

    return ConstantsBundle(
        q=q, d=d, n=n, rho=r, eta=eta, eta0=eta0,
        c1=c1, c2=c2, c3=c3, c4=c4, c5=c5,
        C1=C1, C2=C2, C3=C3, C4=C4, C5=C5,
        delta0=delta0, c=c, c_tilde=c_tilde, lambda_beta=lam,
        eps1=math.exp(log_eps1), eps2=math.exp(min(log_eps2, 700.0)), f_beta=math.exp(log_f),
        log_eps1=log_eps1, log_eps2=log_eps2, log_f_beta=log_f,
    )
