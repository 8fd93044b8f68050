"""Robust linear least squares under bounded structured data uncertainty.

Solves  min_x max_{||y|| <= phi(x)} (Hx - z + Sy)' R (Hx - z + Sy)  with
phi(x) = ||E_h x - E_z||, the min-max problem induced by the perturbation
model [dH dz] = S Delta [E_h E_z], ||Delta|| <= 1.  The closed-form
solution is

    x_hat = (lam E_h'E_h + H' R_hat H)^-1 (H' R_hat z + lam E_h'E_z)
    R_hat = R + R S (lam I - S'RS)^+ S' R

with lam minimizing

    G(lam) = lam ||E_h x(lam) - E_z||^2 + ||H x(lam) - z||^2_{R(lam)}

over [||S'RS||, inf).  Norms on matrices are spectral.  G is evaluated at
the left endpoint through a relative 1e-12 shift, which realizes the
one-sided limit that the saddle point requires there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError

_EDGE_SHIFT = 1e-12


@dataclass(frozen=True)
class UncertaintyStructure:
    """(S, E_h, E_z) of the structured perturbation; ||Delta|| <= 1 is the
    perturbation contract and is not stored."""

    s: np.ndarray  # m x q
    e_h: np.ndarray  # p x n
    e_z: np.ndarray  # p

    def __post_init__(self):
        if self.e_h.shape[0] != len(self.e_z):
            raise ValidationError("E_h and E_z row dimensions differ")

    @property
    def q(self):
        return self.s.shape[1]

    def is_null(self):
        return self.q == 0 or not np.any(self.s)

    def no_perturbation_bound(self):
        return not np.any(self.e_h) and not np.any(self.e_z)

    def phi(self, x) -> float:
        """Radius of the admissible perturbation ball at x."""
        return float(np.linalg.norm(self.e_h @ x - self.e_z))


def null_uncertainty(m: int, n: int) -> UncertaintyStructure:
    return UncertaintyStructure(np.zeros((m, 0)), np.zeros((n, n)), np.zeros(n))


@dataclass(frozen=True)
class RobustProblem:
    z: np.ndarray
    h: np.ndarray
    r: np.ndarray  # weighting matrix, R = W^-1, symmetric positive definite
    uncertainty: UncertaintyStructure

    def __post_init__(self):
        m, n = self.h.shape
        if len(self.z) != m:
            raise ValidationError("z length does not match H rows")
        if self.r.shape != (m, m):
            raise ValidationError("R must be m x m")
        u = self.uncertainty
        if u.q and u.s.shape[0] != m:
            raise ValidationError("S row dimension does not match H")
        if u.e_h.shape[1] != n:
            raise ValidationError("E_h column dimension does not match H")


@dataclass(frozen=True)
class RobustSolution:
    x: np.ndarray
    lam: float
    r_hat: np.ndarray
    worst_case: float
    strategy: str


def spectral_norm_strs(s, r) -> float:
    """||S' R S|| (largest eigenvalue; the matrix is symmetric PSD)."""
    if s.shape[1] == 0:
        return 0.0
    u = s.T @ r @ s
    return float(np.linalg.eigvalsh(0.5 * (u + u.T))[-1])


class _Evaluator:
    """Shared factorizations for repeated G(lambda) / x(lambda) evaluation."""

    def __init__(self, p: RobustProblem):
        self.p = p
        u = p.uncertainty
        strs = u.s.T @ p.r @ u.s
        d, q = np.linalg.eigh(0.5 * (strs + strs.T)) if u.q else (np.zeros(0), np.zeros((0, 0)))
        self.d = np.clip(d, 0.0, None)
        self.lam0 = float(self.d[-1]) if len(self.d) else 0.0
        self.b = p.r @ u.s @ q if u.q else np.zeros((p.h.shape[0], 0))  # R S Q
        self.htb = p.h.T @ self.b
        self.htrh = p.h.T @ p.r @ p.h
        self.htrz = p.h.T @ p.r @ p.z
        self.ehteh = u.e_h.T @ u.e_h
        self.ehtez = u.e_h.T @ u.e_z
        self._scale = max(1.0, self.lam0)

    def _weights(self, lam: float) -> tuple[float, np.ndarray]:
        """Effective lambda and the eigen-weights of (lam I - S'RS)^+."""
        edge = self.lam0 + _EDGE_SHIFT * self._scale
        lam_eff = max(float(lam), edge)
        return lam_eff, 1.0 / (lam_eff - self.d)

    def r_of(self, lam: float) -> np.ndarray:
        lam_eff, w = self._weights(lam)
        return self.p.r + (self.b * w) @ self.b.T

    def x_of(self, lam: float) -> np.ndarray:
        lam_eff, w = self._weights(lam)
        lhs = lam_eff * self.ehteh + self.htrh + (self.htb * w) @ self.htb.T
        rhs = self.htrz + (self.htb * w) @ (self.b.T @ self.p.z) + lam_eff * self.ehtez
        try:
            return np.linalg.solve(lhs, rhs)
        except np.linalg.LinAlgError:
            raise NumericalError(f"singular robust normal matrix at lambda={lam!r}") from None

    def g(self, lam: float) -> float:
        lam_eff, w = self._weights(lam)
        x = self.x_of(lam)
        res = self.p.h @ x - self.p.z
        weighted = res @ self.p.r @ res + np.sum(w * (self.b.T @ res) ** 2)
        u = self.p.uncertainty
        return float(lam_eff * np.sum((u.e_h @ x - u.e_z) ** 2) + weighted)


def g_of_lambda(lam: float, p: RobustProblem) -> float:
    """G(lambda); domain error below ||S'RS||."""
    ev = _Evaluator(p)
    if lam < ev.lam0 * (1.0 - 1e-9) - 1e-300:
        raise ValidationError(f"lambda={lam!r} below the domain bound {ev.lam0!r}")
    return ev.g(lam)


_GOLD = (np.sqrt(5.0) - 1.0) / 2.0


def _golden(f, lo, hi, tol_of):
    c = hi - _GOLD * (hi - lo)
    d = lo + _GOLD * (hi - lo)
    fc, fd = f(c), f(d)
    while hi - lo > tol_of(0.5 * (lo + hi)):
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - _GOLD * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + _GOLD * (hi - lo)
            fd = f(d)
    return 0.5 * (lo + hi)


def min_g(p: RobustProblem, max_doublings: int = 80):
    """lambda minimizing G over [||S'RS||, inf).

    Brackets by geometric expansion from the left endpoint until G rises,
    then refines by golden section to absolute tolerance 1e-8 (1 + lam).
    A flat G (degenerate structure) returns the left endpoint.
    """
    ev = _Evaluator(p)
    lam0 = ev.lam0
    step = 0.01 * max(1.0, lam0)
    f0 = ev.g(lam0)

    seen = [(lam0, f0)]
    prev_lam, prev_f = lam0, f0
    bracket = None
    for _ in range(max_doublings):
        lam = prev_lam + step
        f = ev.g(lam)
        seen.append((lam, f))
        if f > prev_f:
            bracket = (seen[-3][0] if len(seen) >= 3 else lam0, lam)
            break
        prev_lam, prev_f = lam, f
        step *= 2.0

    values = [f for _, f in seen]
    if max(values) - min(values) <= 1e-12 * (1.0 + abs(f0)):
        return lam0  # degenerate: G flat, pick the endpoint deterministically
    if bracket is None:
        raise NumericalError(
            f"no bracket for the lambda search within {max_doublings} expansions"
        )

    lam_hat = float(max(_golden(ev.g, bracket[0], bracket[1], lambda mid: 1e-8 * (1.0 + mid)), lam0))
    # the minimum may sit exactly on the domain boundary
    if ev.g(lam0) <= ev.g(lam_hat):
        return lam0
    return lam_hat


def lambda_approx(mu: float, s, r) -> float:
    """Practical choice lambda = (1 + mu) ||S'RS||."""
    if mu < 0.0:
        raise ValidationError("mu must be nonnegative")
    return (1.0 + mu) * spectral_norm_strs(s, r)


def _weighted_ls(h, r, z):
    try:
        return np.linalg.solve(h.T @ r @ h, h.T @ r @ z)
    except np.linalg.LinAlgError:
        raise NumericalError("singular normal matrix in weighted least squares") from None


def bdu_solve(p: RobustProblem, lam_strategy: str = "exact", mu: float = 1.0) -> RobustSolution:
    """Solve the min-max problem; with null uncertainty this reduces exactly
    to the plain weighted LS solution (no lambda machinery involved)."""
    u = p.uncertainty
    if u.is_null() or u.no_perturbation_bound():
        x = _weighted_ls(p.h, p.r, p.z)
        res = p.h @ x - p.z
        return RobustSolution(x, 0.0, p.r.copy(), float(res @ p.r @ res), "reduced")

    if lam_strategy == "exact":
        lam = min_g(p)
    elif lam_strategy == "approx":
        lam = lambda_approx(mu, u.s, p.r)
    else:
        raise ValidationError(f"unknown lambda strategy {lam_strategy!r}")

    ev = _Evaluator(p)
    x = ev.x_of(lam)
    return RobustSolution(x, float(lam), ev.r_of(lam), ev.g(lam), lam_strategy)


def worst_case_objective(x, p: RobustProblem, samples: int = 256, seed: int = 0) -> float:
    """Sampled inner maximum of the robust cost at a fixed x.

    Evaluates (Hx - z + Sy)' R (Hx - z + Sy) over boundary-directed draws
    y = phi(x) d plus the analytic candidate directions (the linear-term
    direction and the top curvature eigenvector), and returns the largest.
    """
    if samples < 1:
        raise ValidationError("samples must be at least 1")
    u = p.uncertainty
    v = p.h @ x - p.z
    nominal = float(v @ p.r @ v)
    if u.q == 0:
        return nominal
    phi = u.phi(x)
    if phi == 0.0:
        return nominal

    dirs = []
    lin = u.s.T @ p.r @ v
    if np.linalg.norm(lin) > 0.0:
        dirs.append(lin / np.linalg.norm(lin))
    strs = u.s.T @ p.r @ u.s
    _, vecs = np.linalg.eigh(0.5 * (strs + strs.T))
    dirs.extend([vecs[:, -1], -vecs[:, -1]])
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((samples, u.q))
    norms = np.linalg.norm(raw, axis=1)
    dirs.extend(raw[k] / norms[k] for k in range(samples) if norms[k] > 0.0)

    best = nominal
    for d in dirs:
        y = phi * d
        t = v + u.s @ y
        best = max(best, float(t @ p.r @ t))
    return best
