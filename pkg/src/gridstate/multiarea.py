"""Two-level multi-area estimation.

Level 1 runs one robust hybrid estimator per area, independently and
optionally in parallel, over each area's own [internal, boundary,
external] state.  Level 2 is the central coordinator: it re-estimates all
boundary states plus the per-area reference offsets u from boundary
measurements, PMU measurements, and the level-1 results treated as
pseudo-measurements, then applies the same hybrid robust refinement.

Angle frames: each area's traditional estimate pins its reference-bus
angle to the PMU-measured angle when the reference carries a PMU (all
fixture areas do), so local frames are already aligned to the
synchronized one up to measurement noise; the offsets u (u_1 = 0) absorb
what remains.  Final angles are reported in area 1's frame.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .caseio import ExperimentConfig
from .errors import NumericalError, UnobservableError, ValidationError
from .hybrid import (
    HybridResult,
    apply_perturbation,
    build_hybrid_model,
    hybrid_solve,
    hybrid_solve_robust,
    stack_model,
    uncertainty_for_model,
)
from .measurement import (
    FLOW_KINDS,
    INJECTION_KINDS,
    PMU_CURRENT_KINDS,
    PMU_KINDS,
    PMU_VOLTAGE_KINDS,
    MeasurementSet,
    ModelView,
    h_eval,
    jacobian_polar,
    polar_to_rect,
    rect_to_polar,
    wrap_angle,
)
from .netmodel import AreaPartition, PowerNetwork, boundary_measurement_ownership
from .powerflow import StateVector
from .wls import PolarModel, check_observable, wls_estimate


# deweighting of the reference PMU phasor when used as the traditional
# estimator's frame/scale anchor; the full-precision rows belong to the
# hybrid stage, the anchor only has to make frame and voltage scale
# observable from SCADA data
ANCHOR_SIGMA_FACTOR = 10.0


def _pmu_ref_anchor(pmu: MeasurementSet, ref_bus: int):
    """Deweighted copies of the reference-bus PMU voltage phasor rows, or
    () when the reference carries no PMU.

    P/Q-only SCADA sets leave the voltage scale nearly free and fix angles
    only relatively; the anchor rows make both observable while leaving
    essentially all PMU precision to the hybrid stage.  With an anchor the
    reference angle is estimated, not pinned."""
    rows = []
    for m in pmu:
        if m.kind in ("pmu_vr", "pmu_vi") and m.bus == ref_bus:
            rows.append(replace(m, sigma=m.sigma * ANCHOR_SIGMA_FACTOR))
    if len(rows) != 2:
        return ()
    return tuple(rows)


def split_measurements(part: AreaPartition, mset: MeasurementSet):
    """Per-area SCADA and PMU subsets by ownership (metered side)."""
    owned = boundary_measurement_ownership(part, mset)
    scada, pmu = {}, {}
    for area in part.areas:
        sub = mset.subset(owned[area.index])
        scada[area.index] = sub.of_kind(*INJECTION_KINDS, *FLOW_KINDS)
        pmu[area.index] = sub.of_kind(*PMU_KINDS)
    return scada, pmu


def coordinator_measurements(net: PowerNetwork, part: AreaPartition, mset: MeasurementSet,
                             reuse_boundary: bool = True):
    """(z_b, z_PMU) for level 2.

    z_b re-uses the raw boundary measurements: injections at boundary buses
    and flows on tie-lines.  z_PMU keeps PMU voltage rows at boundary buses
    and PMU current rows on branches with both endpoints boundary (rows
    touching internal buses would leak unweighted level-1 error into the
    coordinator).
    """
    bnd = set(part.boundary_buses())
    zb, zpmu = [], []
    for m in mset:
        if m.kind in INJECTION_KINDS and m.bus in bnd:
            zb.append(m)
        elif m.kind in FLOW_KINDS and part.is_tie(net.branch(*m.branch)):
            zb.append(m)
        elif m.kind in PMU_VOLTAGE_KINDS and m.bus in bnd:
            zpmu.append(m)
        elif m.kind in PMU_CURRENT_KINDS and m.branch[0] in bnd and m.branch[1] in bnd:
            zpmu.append(m)
    if not reuse_boundary:
        zb = []
    return MeasurementSet(tuple(zb)), MeasurementSet(tuple(zpmu))


@dataclass(frozen=True)
class LocalResult:
    """Level-1 output for one area: polar estimate over [int, bnd, ext]
    with full covariance over the [va; vm] layout."""

    area_index: int
    state: StateVector
    cov: np.ndarray
    tse_state: StateVector
    tse_iterations: int
    hybrid: HybridResult

    def block(self, bus_ids):
        """(vm, va, joint covariance) for a subset of buses, rows ordered
        [va(bus_ids); vm(bus_ids)]."""
        n = len(self.state.bus_ids)
        pos = [self.state.bus_ids.index(b) for b in bus_ids]
        idx = list(pos) + [n + k for k in pos]
        return self.state.v1[pos], self.state.v2[pos], self.cov[np.ix_(idx, idx)]


def _estimate_area(net, part, area, scada, pmu, cfg: ExperimentConfig, robust, perturb):
    view = ModelView.for_area(net, part, area.index)
    anchor = _pmu_ref_anchor(pmu, area.ref_bus)
    tse_set = MeasurementSet(tuple(scada) + anchor)
    model = PolarModel(view, tuple(tse_set), pin_angle=not anchor)
    if not check_observable(model):
        raise UnobservableError(
            f"area {area.index}: SCADA measurement set does not observe the local state"
        )
    tse = wls_estimate(tse_set, model, tol=cfg.epsilon, k_limit=cfg.k_limit)
    if not tse.converged:
        raise NumericalError(f"area {area.index}: traditional estimator did not converge")

    hmodel = build_hybrid_model(
        tse, pmu, view,
        variance_floor=cfg.variance_floor,
        diagonal_tse_cov=cfg.tse_cov_diagonal,
    )
    sampling = uncertainty_for_model(hmodel, cfg.s0, cfg.e0, cfg.ez0, anchored=False)
    if perturb is not None and not sampling.is_null():
        delta = perturb(("level1", area.index), sampling.q, sampling.e_h.shape[0])
        hmodel = apply_perturbation(hmodel, sampling, delta)
    if robust:
        unc = uncertainty_for_model(hmodel, cfg.s0, cfg.e0, cfg.ez0, anchored=True)
        hres = hybrid_solve_robust(hmodel, unc, cfg.lambda_strategy, cfg.mu)
    else:
        hres = hybrid_solve(hmodel)

    polar, cov_polar = rect_to_polar(hres.state, hres.covariance)
    return LocalResult(area.index, polar, cov_polar, tse.state, tse.iterations, hres)


def level1_run(
    net: PowerNetwork,
    part: AreaPartition,
    scada_by_area: dict,
    pmu_by_area: dict,
    cfg: ExperimentConfig,
    robust: bool = True,
    perturb=None,
    parallel: bool = False,
) -> list[LocalResult]:
    """Run every area's robust hybrid estimator; areas never exchange data.

    Results are gathered in area-index order regardless of completion
    order.  Raises NumericalError listing every failing area.
    """
    def job(area):
        return _estimate_area(
            net, part, area,
            scada_by_area[area.index], pmu_by_area[area.index],
            cfg, robust, perturb,
        )

    results: dict[int, LocalResult] = {}
    failures: list[str] = []
    if parallel:
        with ThreadPoolExecutor(max_workers=len(part.areas)) as pool:
            futures = {area.index: pool.submit(job, area) for area in part.areas}
        for idx in sorted(futures):
            try:
                results[idx] = futures[idx].result()
            except (NumericalError, ValidationError) as exc:
                failures.append(str(exc))
    else:
        for area in part.areas:
            try:
                results[area.index] = job(area)
            except (NumericalError, ValidationError) as exc:
                failures.append(str(exc))
    if failures:
        raise NumericalError("level 1 failed: " + "; ".join(failures))
    return [results[a.index] for a in part.areas]


# ---------------------------------------------------------------------------
# level 2: the central coordinator


@dataclass(frozen=True)
class CoordinatorProblem:
    """Assembled level-2 estimation problem.

    Unknowns x_c = [va(bnd, global frame); vm(bnd); u_2..u_r].  Rows:
    boundary SCADA, coordinator PMU rows, then per-area pseudo-measurement
    rows [va(bnd_i); vm(bnd_i); va(ext_i); vm(ext_i)] carrying the level-1
    covariance blocks as weights.
    """

    bnd_ids: tuple[int, ...]
    physical: MeasurementSet
    pseudo_area_order: tuple[int, ...]
    pseudo_bus_lists: tuple[tuple[int, ...], ...]
    z: np.ndarray
    w: np.ndarray

    @property
    def n_bnd(self):
        return len(self.bnd_ids)


class _CoordinatorModel:
    """h and Jacobian of the coordinator problem.

    Physical rows are evaluated on the full network with every
    non-boundary bus pinned to its owning area's level-1 estimate, rotated
    by that area's offset u; the chain rule folds the pinned angles'
    u-dependence into the u columns.
    """

    def __init__(self, net, part, locals_, prob: CoordinatorProblem, cfg):
        self.net = net
        self.part = part
        self.locals = {lr.area_index: lr for lr in locals_}
        self.prob = prob
        self.view = ModelView.full(net, ref_bus=part.global_ref)
        self.bus_ids = self.view.bus_ids
        self.n = len(self.bus_ids)
        self.bnd_pos = [self.view.pos[b] for b in prob.bnd_ids]
        self.r = part.area_count
        self.n_state = 2 * prob.n_bnd + (self.r - 1)
        # pinned (non-boundary) buses: owning area and local estimate
        self.pinned = {}
        for area in part.areas:
            lr = self.locals[area.index]
            for b in area.internal:
                vm, va = lr.state.at(b)
                self.pinned[b] = (area.index, vm, va)

    def unpack(self, x):
        nb = self.prob.n_bnd
        va_b = x[:nb]
        vm_b = x[nb : 2 * nb]
        u = np.concatenate([[0.0], x[2 * nb :]])
        vm = np.empty(self.n)
        va = np.empty(self.n)
        for k, bid in enumerate(self.bus_ids):
            if bid in self.pinned:
                ai, pvm, pva = self.pinned[bid]
                vm[k] = pvm
                va[k] = pva + u[ai - 1]
            else:
                j = self.prob.bnd_ids.index(bid)
                vm[k] = vm_b[j]
                va[k] = va_b[j]
        return StateVector("polar", self.bus_ids, vm, va, ref_bus=self.part.global_ref), u

    def h(self, x):
        state, u = self.unpack(x)
        out = [h_eval(self.view, state, tuple(self.prob.physical))] if len(self.prob.physical) else []
        for ai, buses in zip(self.prob.pseudo_area_order, self.prob.pseudo_bus_lists):
            pos = [self.prob.bnd_ids.index(b) for b in buses]
            nb = self.prob.n_bnd
            va_rows = x[pos] - u[ai - 1]
            vm_rows = x[[nb + p for p in pos]]
            out.append(np.concatenate([va_rows, vm_rows]))
        return np.concatenate(out) if out else np.zeros(0)

    def jac(self, x):
        state, _ = self.unpack(x)
        nb = self.prob.n_bnd
        rows = []
        if len(self.prob.physical):
            jfull = jacobian_polar(self.view, state, tuple(self.prob.physical), pin_ref=False)
            j_va, j_vm = jfull[:, : self.n], jfull[:, self.n :]
            block = np.zeros((jfull.shape[0], self.n_state))
            block[:, :nb] = j_va[:, self.bnd_pos]
            block[:, nb : 2 * nb] = j_vm[:, self.bnd_pos]
            for k, bid in enumerate(self.bus_ids):
                if bid in self.pinned:
                    ai = self.pinned[bid][0]
                    if ai >= 2:  # pinned angle = local + u_ai
                        block[:, 2 * nb + ai - 2] += j_va[:, k]
            rows.append(block)
        for ai, buses in zip(self.prob.pseudo_area_order, self.prob.pseudo_bus_lists):
            pos = [self.prob.bnd_ids.index(b) for b in buses]
            nbus = len(buses)
            block = np.zeros((2 * nbus, self.n_state))
            for r_, p in enumerate(pos):
                block[r_, p] = 1.0  # va row
                if ai >= 2:
                    block[r_, 2 * nb + ai - 2] = -1.0
                block[nbus + r_, nb + p] = 1.0  # vm row
            rows.append(block)
        return np.vstack(rows)


def _assemble_coordinator(net, part, locals_, z_b, z_pmu, cfg) -> CoordinatorProblem:
    bnd_ids = part.boundary_buses()
    physical = MeasurementSet(tuple(z_b) + tuple(z_pmu))
    z_parts = [physical.z] if len(physical) else []
    w_blocks = [np.diag(physical.sigmas**2)] if len(physical) else []
    area_order, bus_lists = [], []
    for area in part.areas:
        lr = next(l for l in locals_ if l.area_index == area.index)
        buses = tuple(area.boundary) + tuple(area.external)
        if not buses:
            continue
        vm, va, cov = lr.block(buses)
        area_order.append(area.index)
        bus_lists.append(buses)
        z_parts.append(np.concatenate([va, vm]))
        w_blocks.append(cov + cfg.variance_floor * np.eye(2 * len(buses)))
    z = np.concatenate(z_parts) if z_parts else np.zeros(0)
    total = len(z)
    w = np.zeros((total, total))
    at = 0
    for blk in w_blocks:
        k = blk.shape[0]
        w[at : at + k, at : at + k] = blk
        at += k
    return CoordinatorProblem(bnd_ids, physical, tuple(area_order), tuple(bus_lists), z, w)


@dataclass(frozen=True)
class GlobalResult:
    """Final per-bus estimates: internal buses from level 1 (re-referenced
    through u), boundary buses from the coordinator."""

    bus_ids: tuple[int, ...]
    vm: np.ndarray
    va: np.ndarray
    source: tuple[str, ...]
    u: np.ndarray
    method: str
    locals: tuple[LocalResult, ...] = ()
    coordinator_iterations: int = 0

    def state(self) -> StateVector:
        return StateVector("polar", self.bus_ids, self.vm.copy(), self.va.copy())


def _coordinator_init(model: _CoordinatorModel, prob: CoordinatorProblem):
    nb = prob.n_bnd
    sums_va = np.zeros(nb)
    sums_vm = np.zeros(nb)
    counts = np.zeros(nb)
    for ai, buses in zip(prob.pseudo_area_order, prob.pseudo_bus_lists):
        lr = model.locals[ai]
        for b in buses:
            vm, va = lr.state.at(b)
            j = prob.bnd_ids.index(b)
            sums_va[j] += va
            sums_vm[j] += vm
            counts[j] += 1.0
    if np.any(counts == 0.0):
        missing = [prob.bnd_ids[j] for j in range(nb) if counts[j] == 0.0]
        raise NumericalError(f"boundary buses {missing} have no level-1 pseudo-measurement")
    x0 = np.concatenate([sums_va / counts, sums_vm / counts, np.zeros(model.r - 1)])
    return x0


def _gauss_newton(model, z, w, x0, tol, k_limit, label):
    sigma_inv = 1.0 / np.sqrt(np.diag(w))
    # non-diagonal weight: whiten through a Cholesky factor instead
    dense = np.any(w != np.diag(np.diag(w)))
    if dense:
        try:
            l_fac = np.linalg.cholesky(w)
        except np.linalg.LinAlgError:
            raise NumericalError(f"{label}: weight matrix not positive definite") from None
    x = np.array(x0, dtype=float)
    for k in range(1, k_limit + 1):
        r = z - model.h(x)
        j = model.jac(x)
        if dense:
            r_w = np.linalg.solve(l_fac, r)
            j_w = np.linalg.solve(l_fac, j)
        else:
            r_w = r * sigma_inv
            j_w = j * sigma_inv[:, None]
        try:
            dx = np.linalg.lstsq(j_w, r_w, rcond=None)[0]
            gain = j_w.T @ j_w
            cov = np.linalg.inv(gain)
        except np.linalg.LinAlgError:
            raise UnobservableError(f"{label}: singular normal matrix") from None
        x = x + dx
        if np.max(np.abs(dx)) < tol:
            return x, cov, k
    raise NumericalError(f"{label}: no convergence in {k_limit} iterations")


def level2_run(
    net: PowerNetwork,
    part: AreaPartition,
    locals_: list[LocalResult],
    z_b: MeasurementSet,
    z_pmu: MeasurementSet,
    cfg: ExperimentConfig,
    robust: bool = True,
    perturb=None,
    method_label: str | None = None,
) -> GlobalResult:
    """Central coordinator: nonlinear WLS over [boundary states; u], then
    the hybrid robust refinement of the boundary voltages."""
    label = method_label or ("robust" if robust else "wls")
    bnd_ids = part.boundary_buses()
    u = np.zeros(part.area_count)
    iters = 0

    if bnd_ids:
        prob = _assemble_coordinator(net, part, locals_, z_b, z_pmu, cfg)
        model = _CoordinatorModel(net, part, locals_, prob, cfg)
        x0 = _coordinator_init(model, prob)
        x_hat, cov_c, iters = _gauss_newton(
            model, prob.z, prob.w, x0, cfg.epsilon, cfg.k_limit, "coordinator"
        )
        nb = len(bnd_ids)
        u = np.concatenate([[0.0], x_hat[2 * nb :]])

        # hybrid refinement of the boundary voltages (rectangular, linear);
        # u passes through with its step-4 estimate
        bnd_state = StateVector(
            "polar", bnd_ids, np.array(x_hat[nb : 2 * nb]), np.array(x_hat[:nb])
        )
        rect, cov_rect = polar_to_rect(bnd_state, cov_c[: 2 * nb, : 2 * nb])
        bnd_view = ModelView(net, bnd_ids, ref_bus=part.global_ref)
        hmodel = stack_model(bnd_view, rect, cov_rect, z_pmu, cfg.variance_floor)
        sampling = uncertainty_for_model(hmodel, cfg.s0, cfg.e0, cfg.ez0, anchored=False)
        if perturb is not None and not sampling.is_null():
            delta = perturb(("level2", 0), sampling.q, sampling.e_h.shape[0])
            hmodel = apply_perturbation(hmodel, sampling, delta)
        if robust:
            unc = uncertainty_for_model(hmodel, cfg.s0, cfg.e0, cfg.ez0, anchored=True)
            hres = hybrid_solve_robust(hmodel, unc, cfg.lambda_strategy, cfg.mu)
        else:
            hres = hybrid_solve(hmodel)
        bnd_polar, _ = rect_to_polar(hres.state)
    else:
        bnd_polar = None

    # assemble the global estimate: internal from level 1 (+u), boundary
    # from the coordinator
    by_area = {lr.area_index: lr for lr in locals_}
    bus_ids = tuple(sorted(b.id for b in net.buses))
    vm = np.empty(len(bus_ids))
    va = np.empty(len(bus_ids))
    source = []
    bnd_set = set(bnd_ids)
    for k, bid in enumerate(bus_ids):
        if bid in bnd_set:
            bvm, bva = bnd_polar.at(bid)
            vm[k], va[k] = bvm, bva
            source.append("coordinator")
        else:
            ai = part.area_of(bid)
            lvm, lva = by_area[ai].state.at(bid)
            vm[k] = lvm
            va[k] = lva + u[ai - 1]
            source.append(f"area{ai}")
    return GlobalResult(
        bus_ids, vm, va, tuple(source), u, label, tuple(locals_), iters
    )


def run_two_level(
    net: PowerNetwork,
    part: AreaPartition,
    mset: MeasurementSet,
    cfg: ExperimentConfig,
    robust: bool = True,
    perturb=None,
    parallel: bool = False,
) -> GlobalResult:
    """Full pipeline: ownership split, level 1 in all areas, level 2."""
    scada, pmu = split_measurements(part, mset)
    locals_ = level1_run(net, part, scada, pmu, cfg, robust, perturb, parallel)
    z_b, z_pmu = coordinator_measurements(net, part, mset, cfg.level2_reuse_boundary)
    return level2_run(net, part, locals_, z_b, z_pmu, cfg, robust, perturb)


def run_centralized(
    net: PowerNetwork,
    mset: MeasurementSet,
    cfg: ExperimentConfig,
    robust: bool = True,
    ref_bus: int | None = None,
    perturb=None,
) -> GlobalResult:
    """Single-estimator reference pipeline over the whole network."""
    from .netmodel import single_area

    part = single_area(net, ref_bus)
    return run_two_level(net, part, mset, cfg, robust, perturb)


def compute_errors(result: GlobalResult, truth: StateVector):
    """Per-bus absolute errors (|dV|, |dtheta|); angles wrapped to (-pi, pi]."""
    if truth.coord != "polar":
        raise ValidationError("truth must be polar")
    order = [truth.index(b) for b in result.bus_ids]
    dvm = np.abs(result.vm - truth.v1[order])
    dva = np.abs(wrap_angle(result.va - truth.v2[order]))
    return dvm, dva
