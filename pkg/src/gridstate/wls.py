"""Nonlinear weighted-least-squares estimation by Gauss-Newton.

This is the traditional (SCADA-only) estimator run at step 1 of the hybrid
method: normal-equation steps dx = (H' W^-1 H)^-1 H' W^-1 (z - h(x)),
stopping when max |dx| < epsilon, with the estimate covariance equal to
the inverse gain matrix at the solution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UnobservableError, ValidationError
from .measurement import MeasurementSet, ModelView, h_eval, jacobian_polar
from .powerflow import StateVector


class PolarModel:
    """Packs/unpacks the estimation vector x = [va (free); vm (all)] for a
    model view and evaluates h and H on it.

    With ``pin_angle`` (the default) the reference-bus angle is pinned at
    ``ref_angle`` and removed from the unknowns.  When the reference bus
    carries a PMU its angle is estimated instead: pass pin_angle=False and
    include anchor rows in the specs so the gain matrix keeps rank.
    """

    def __init__(self, view: ModelView, specs, ref_angle: float = 0.0,
                 pin_angle: bool = True):
        self.view = view
        self.specs = tuple(specs)
        self.ref_angle = float(ref_angle)
        self.pin_angle = bool(pin_angle)
        view.validate(self.specs)
        self.n_bus = view.n_bus
        if view.ref_bus not in view.pos:
            raise ValidationError(f"reference bus {view.ref_bus} is not in the view")
        if pin_angle:
            self.free_va = [k for k, bid in enumerate(view.bus_ids) if bid != view.ref_bus]
        else:
            self.free_va = list(range(self.n_bus))
        self.n_state = len(self.free_va) + self.n_bus

    def flat(self) -> np.ndarray:
        x = np.zeros(self.n_state)
        x[len(self.free_va) :] = 1.0
        return x

    def pack(self, state: StateVector) -> np.ndarray:
        order = [state.index(b) for b in self.view.bus_ids]
        va = state.v2[order]
        vm = state.v1[order]
        return np.concatenate([va[self.free_va], vm])

    def unpack(self, x) -> StateVector:
        va = np.full(self.n_bus, self.ref_angle)
        va[self.free_va] = x[: len(self.free_va)]
        vm = np.array(x[len(self.free_va) :])
        return StateVector("polar", self.view.bus_ids, vm, va, ref_bus=self.view.ref_bus)

    def h(self, x) -> np.ndarray:
        return h_eval(self.view, self.unpack(x), self.specs)

    def jac(self, x) -> np.ndarray:
        full = jacobian_polar(self.view, self.unpack(x), self.specs, pin_ref=False)
        cols = list(self.free_va) + [self.n_bus + k for k in range(self.n_bus)]
        return full[:, cols]

    def embed_cov(self, cov_est: np.ndarray) -> np.ndarray:
        """Estimate covariance embedded into the full [va(n); vm(n)] layout
        (zero variance at a pinned reference angle)."""
        n = self.n_bus
        full = np.zeros((2 * n, 2 * n))
        idx = list(self.free_va) + [n + k for k in range(n)]
        full[np.ix_(idx, idx)] = cov_est
        return full


@dataclass(frozen=True)
class EstimationResult:
    state: StateVector
    covariance: np.ndarray  # over the model's [va(free); vm] layout
    iterations: int
    converged: bool
    objective: float
    residuals: np.ndarray
    model: PolarModel


def objective(mset: MeasurementSet, model: PolarModel, state: StateVector) -> float:
    """J(x) = (z - h(x))' W^-1 (z - h(x))."""
    r = mset.z - model.h(model.pack(state))
    return float(np.sum((r / mset.sigmas) ** 2))


def _solve_gain(h_w, rhs_w):
    """Least-squares step via the whitened Jacobian; raises on rank loss."""
    gain = h_w.T @ h_w
    try:
        c = np.linalg.cholesky(gain)
    except np.linalg.LinAlgError:
        raise UnobservableError(
            "gain matrix H' W^-1 H is singular: system unobservable"
        ) from None
    y = np.linalg.solve(c, h_w.T @ rhs_w)
    return np.linalg.solve(c.T, y), gain


def wls_estimate(
    mset: MeasurementSet,
    model: PolarModel,
    init: StateVector | None = None,
    tol: float = 1e-6,
    k_limit: int = 20,
) -> EstimationResult:
    """Gauss-Newton WLS estimate for the given measurement set and model.

    Returns converged=False (never raises) when k_limit is reached; raises
    UnobservableError when the gain matrix is singular at an iterate.
    """
    if tol <= 0.0:
        raise ValidationError("tolerance must be positive")
    if len(mset) != len(model.specs):
        raise ValidationError("measurement set does not match the model's specs")

    z = mset.z
    w_inv_sqrt = 1.0 / mset.sigmas

    def cost(xv):
        try:
            return float(np.sum(((z - model.h(xv)) * w_inv_sqrt) ** 2))
        except ValidationError:
            return np.inf  # step left the state domain (e.g. vm <= 0)

    x = model.flat() if init is None else model.pack(init)
    j_here = cost(x)
    converged = False
    iterations = 0
    for k in range(1, k_limit + 1):
        r = z - model.h(x)
        h = model.jac(x)
        h_w = h * w_inv_sqrt[:, None]
        g = h_w.T @ (r * w_inv_sqrt)
        dx, _ = _solve_gain(h_w, r * w_inv_sqrt)
        # pure Gauss-Newton (Eq-9-style) step whenever it descends; under
        # weak redundancy the full step can overshoot the curved valley of
        # the P/Q-only objective, so fall back to Marquardt damping
        if cost(x + dx) > j_here:
            gain = h_w.T @ h_w
            damp = np.diag(np.clip(np.diag(gain), 1e-8, None))
            mu = 1e-4
            for _ in range(24):
                dx_mu = np.linalg.solve(gain + mu * damp, g)
                if cost(x + dx_mu) <= j_here:
                    dx = dx_mu
                    break
                mu *= 8.0
        x = x + dx
        j_here = cost(x)
        iterations = k
        if np.max(np.abs(dx)) < tol:
            converged = True
            break

    r = z - model.h(x)
    h = model.jac(x)
    gain = (h * w_inv_sqrt[:, None]).T @ (h * w_inv_sqrt[:, None])
    try:
        cov = np.linalg.inv(gain)
    except np.linalg.LinAlgError:
        raise UnobservableError("gain matrix singular at the solution") from None
    obj = float(np.sum((r * w_inv_sqrt) ** 2))
    return EstimationResult(model.unpack(x), cov, iterations, converged, obj, r, model)


def check_observable(model: PolarModel, state: StateVector | None = None) -> bool:
    """Rank check of the Jacobian at a state (flat start by default)."""
    x = model.flat() if state is None else model.pack(state)
    h = model.jac(x)
    if h.shape[0] < model.n_state:
        return False
    return int(np.linalg.matrix_rank(h)) == model.n_state
