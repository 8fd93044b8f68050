"""Measurement functions h(x), analytic Jacobians, noisy synthesis, and
polar/rectangular conversions with first-order covariance transport.

Measurement classes:

====================  ===========================================
p_inj / q_inj         bus power injection (active / reactive)
p_flow / q_flow       branch power flow at the metered end
pmu_vr / pmu_vi       PMU bus-voltage phasor, rectangular parts
pmu_ir / pmu_ii       PMU branch-current phasor at the metered end
====================  ===========================================

Flows and PMU currents carry a branch plus a side ('from'/'to') naming the
metered end.  All evaluation routines run against a :class:`ModelView`,
which is either the whole network or one area's [internal, boundary,
external] sub-model.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ValidationError
from .netmodel import AreaPartition, PowerNetwork, build_ybus
from .powerflow import StateVector

INJECTION_KINDS = ("p_inj", "q_inj")
FLOW_KINDS = ("p_flow", "q_flow")
PMU_VOLTAGE_KINDS = ("pmu_vr", "pmu_vi")
PMU_CURRENT_KINDS = ("pmu_ir", "pmu_ii")
PMU_KINDS = PMU_VOLTAGE_KINDS + PMU_CURRENT_KINDS
ALL_KINDS = INJECTION_KINDS + FLOW_KINDS + PMU_KINDS


@dataclass(frozen=True)
class Measurement:
    id: int
    kind: str
    value: float
    sigma: float
    bus: int | None = None
    branch: tuple[int, int] | None = None
    side: str = "from"

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ValidationError(f"unknown measurement kind {self.kind!r}")
        if self.sigma <= 0.0:
            raise ValidationError(f"measurement {self.id}: sigma must be positive")
        needs_branch = self.kind in FLOW_KINDS + PMU_CURRENT_KINDS
        if needs_branch and self.branch is None:
            raise ValidationError(f"measurement {self.id}: {self.kind} requires a branch")
        if not needs_branch and self.bus is None:
            raise ValidationError(f"measurement {self.id}: {self.kind} requires a bus")
        if self.side not in ("from", "to"):
            raise ValidationError(f"measurement {self.id}: bad side {self.side!r}")

    def metered_bus(self) -> int:
        if self.branch is not None:
            return self.branch[0] if self.side == "from" else self.branch[1]
        return self.bus


@dataclass(frozen=True)
class MeasurementSet:
    """Ordered measurements; the order fixes the rows of z, W and H."""

    items: tuple[Measurement, ...]

    @property
    def z(self) -> np.ndarray:
        return np.array([m.value for m in self.items])

    @property
    def sigmas(self) -> np.ndarray:
        return np.array([m.sigma for m in self.items])

    @property
    def weight_matrix(self) -> np.ndarray:
        """W = diag(sigma^2), the diagonal error covariance."""
        return np.diag(self.sigmas**2)

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def subset(self, ids) -> "MeasurementSet":
        wanted = set(ids)
        return MeasurementSet(tuple(m for m in self.items if m.id in wanted))

    def of_kind(self, *kinds) -> "MeasurementSet":
        return MeasurementSet(tuple(m for m in self.items if m.kind in kinds))

    def with_values(self, values) -> "MeasurementSet":
        if len(values) != len(self.items):
            raise ValidationError("value vector length mismatch")
        return MeasurementSet(
            tuple(replace(m, value=float(v)) for m, v in zip(self.items, values))
        )


@dataclass(frozen=True)
class PlanEntry:
    """One line of a measurement plan (pre-expansion)."""

    kind: str  # 'inj' | 'flow' | 'pmu'
    bus: int | None = None
    branch: tuple[int, int] | None = None
    side: str = "from"


@dataclass(frozen=True)
class MeasurementPlan:
    entries: tuple[PlanEntry, ...]

    def injection_buses(self):
        return tuple(e.bus for e in self.entries if e.kind == "inj")

    def pmu_buses(self):
        return tuple(e.bus for e in self.entries if e.kind == "pmu")

    def expand(self, net: PowerNetwork) -> tuple[Measurement, ...]:
        """Expand plan lines into concrete measurement specs (values unset).

        An injection contributes a P/Q pair; a flow a P/Q pair at its
        metered side; a PMU contributes the bus voltage phasor plus the
        current phasors of every incident branch, metered at the PMU bus.
        """
        specs = []
        mid = 0

        def emit(kind, **where):
            nonlocal mid
            specs.append(Measurement(mid, kind, value=0.0, sigma=1.0, **where))
            mid += 1

        for e in self.entries:
            if e.kind == "inj":
                net.bus(e.bus)
                emit("p_inj", bus=e.bus)
                emit("q_inj", bus=e.bus)
            elif e.kind == "flow":
                br = net.branch(*e.branch)
                side = e.side if e.branch == (br.f, br.t) else ("to" if e.side == "from" else "from")
                emit("p_flow", branch=(br.f, br.t), side=side)
                emit("q_flow", branch=(br.f, br.t), side=side)
            elif e.kind == "pmu":
                net.bus(e.bus)
                emit("pmu_vr", bus=e.bus)
                emit("pmu_vi", bus=e.bus)
                for br in net.branches:
                    if e.bus in (br.f, br.t):
                        side = "from" if br.f == e.bus else "to"
                        emit("pmu_ir", branch=(br.f, br.t), side=side)
                        emit("pmu_ii", branch=(br.f, br.t), side=side)
            else:
                raise ValidationError(f"unknown plan entry kind {e.kind!r}")
        return tuple(specs)


class ModelView:
    """Evaluation context: a bus layout with its induced admittance data.

    For an area view the layout is [internal, boundary, external]; the
    induced Ybus rows are exact for any bus whose whole neighborhood lies
    inside the layout (internal and boundary buses), which is the only
    place injections are evaluated.
    """

    def __init__(self, net: PowerNetwork, bus_ids, ref_bus):
        self.net = net
        self.bus_ids = tuple(bus_ids)
        self.ref_bus = ref_bus
        self.pos = {b: k for k, b in enumerate(self.bus_ids)}
        inside = set(self.bus_ids)
        self.branches = tuple(br for br in net.branches if br.f in inside and br.t in inside)
        self.adm = build_ybus(net, self.bus_ids, self.branches)
        adj = net.adjacency()
        self.injection_ok = frozenset(
            b for b in self.bus_ids if all(nb in inside for nb in adj[b])
        )

    @classmethod
    def full(cls, net: PowerNetwork, ref_bus=None) -> "ModelView":
        return cls(net, net.bus_ids, ref_bus if ref_bus is not None else net.slack_bus.id)

    @classmethod
    def for_area(cls, net: PowerNetwork, part: AreaPartition, area_index: int) -> "ModelView":
        area = part.areas[area_index - 1]
        return cls(net, area.layout, area.ref_bus)

    @property
    def n_bus(self):
        return len(self.bus_ids)

    def require(self, bus_id) -> int:
        if bus_id not in self.pos:
            raise ValidationError(f"bus {bus_id} is outside this model view")
        return self.pos[bus_id]

    def branch_ends(self, m: Measurement):
        """(metered index, far index, metered-end admittances) for m's branch."""
        br = self.net.branch(*m.branch)
        yff, yft, ytf, ytt = br.admittances()
        i, j = self.require(br.f), self.require(br.t)
        if m.side == "from":
            return i, j, yff, yft
        return j, i, ytt, ytf

    def validate(self, specs) -> None:
        for m in specs:
            if m.kind in INJECTION_KINDS:
                k = self.require(m.bus)
                if m.bus not in self.injection_ok:
                    raise ValidationError(
                        f"injection at bus {m.bus} needs neighbors outside the view"
                    )
                del k
            elif m.kind in PMU_VOLTAGE_KINDS:
                self.require(m.bus)
            else:
                self.require(m.branch[0])
                self.require(m.branch[1])


def h_eval(view: ModelView, state: StateVector, specs) -> np.ndarray:
    """Evaluate the nonlinear measurement functions at a polar state."""
    if state.coord != "polar":
        raise ValidationError("h_eval expects a polar state")
    order = [state.index(b) for b in view.bus_ids]
    vm = state.v1[order]
    va = state.v2[order]
    v = vm * np.exp(1j * va)
    s_inj = v * np.conj(view.adm.y @ v)

    out = np.empty(len(specs))
    for r, m in enumerate(specs):
        if m.kind in INJECTION_KINDS:
            k = view.require(m.bus)
            if m.bus not in view.injection_ok:
                raise ValidationError(f"injection at bus {m.bus} not evaluable in this view")
            out[r] = s_inj[k].real if m.kind == "p_inj" else s_inj[k].imag
        elif m.kind in FLOW_KINDS:
            i, j, ymm, ymf = view.branch_ends(m)
            s = v[i] * np.conj(ymm * v[i] + ymf * v[j])
            out[r] = s.real if m.kind == "p_flow" else s.imag
        elif m.kind in PMU_VOLTAGE_KINDS:
            k = view.require(m.bus)
            out[r] = vm[k] * np.cos(va[k]) if m.kind == "pmu_vr" else vm[k] * np.sin(va[k])
        else:  # PMU current
            i, j, ymm, ymf = view.branch_ends(m)
            cur = ymm * v[i] + ymf * v[j]
            out[r] = cur.real if m.kind == "pmu_ir" else cur.imag
    return out


def jacobian_polar(view: ModelView, state: StateVector, specs, pin_ref: bool = True) -> np.ndarray:
    """Analytic H = dh/dx for the polar layout [va (free); vm (all)].

    With ``pin_ref`` the reference-bus angle column is removed ("will not
    be estimated"); pass False to keep all 2n columns.
    """
    if state.coord != "polar":
        raise ValidationError("jacobian_polar expects a polar state")
    order = [state.index(bid) for bid in view.bus_ids]
    vm = state.v1[order]
    va = state.v2[order]
    n = view.n_bus
    g, b = view.adm.g, view.adm.b
    v = vm * np.exp(1j * va)
    s_inj = v * np.conj(view.adm.y @ v)
    p_calc, q_calc = s_inj.real, s_inj.imag

    rows = len(specs)
    d_va = np.zeros((rows, n))
    d_vm = np.zeros((rows, n))
    theta = va[:, None] - va[None, :]
    ct, st = np.cos(theta), np.sin(theta)
    a_mat = g * ct + b * st
    c_mat = g * st - b * ct

    for r, m in enumerate(specs):
        if m.kind == "p_inj":
            i = view.require(m.bus)
            d_va[r] = vm[i] * vm * c_mat[i]
            d_va[r, i] = -q_calc[i] - b[i, i] * vm[i] ** 2
            d_vm[r] = vm[i] * a_mat[i]
            d_vm[r, i] = p_calc[i] / vm[i] + g[i, i] * vm[i]
        elif m.kind == "q_inj":
            i = view.require(m.bus)
            d_va[r] = -vm[i] * vm * a_mat[i]
            d_va[r, i] = p_calc[i] - g[i, i] * vm[i] ** 2
            d_vm[r] = vm[i] * c_mat[i]
            d_vm[r, i] = q_calc[i] / vm[i] - b[i, i] * vm[i]
        elif m.kind in FLOW_KINDS:
            i, j, ymm, ymf = view.branch_ends(m)
            g1, b1 = ymm.real, ymm.imag
            g2, b2 = ymf.real, ymf.imag
            th = va[i] - va[j]
            cth, sth = np.cos(th), np.sin(th)
            if m.kind == "p_flow":
                dth = vm[i] * vm[j] * (-g2 * sth + b2 * cth)
                d_va[r, i] = dth
                d_va[r, j] = -dth
                d_vm[r, i] = 2.0 * vm[i] * g1 + vm[j] * (g2 * cth + b2 * sth)
                d_vm[r, j] = vm[i] * (g2 * cth + b2 * sth)
            else:
                dth = vm[i] * vm[j] * (g2 * cth + b2 * sth)
                d_va[r, i] = dth
                d_va[r, j] = -dth
                d_vm[r, i] = -2.0 * vm[i] * b1 + vm[j] * (g2 * sth - b2 * cth)
                d_vm[r, j] = vm[i] * (g2 * sth - b2 * cth)
        elif m.kind in PMU_VOLTAGE_KINDS:
            k = view.require(m.bus)
            if m.kind == "pmu_vr":
                d_vm[r, k] = np.cos(va[k])
                d_va[r, k] = -vm[k] * np.sin(va[k])
            else:
                d_vm[r, k] = np.sin(va[k])
                d_va[r, k] = vm[k] * np.cos(va[k])
        else:  # PMU current
            i, j, ymm, ymf = view.branch_ends(m)
            for k, y in ((i, ymm), (j, ymf)):
                gk, bk = y.real, y.imag
                ck, sk = np.cos(va[k]), np.sin(va[k])
                if m.kind == "pmu_ir":
                    d_vm[r, k] += gk * ck - bk * sk
                    d_va[r, k] += vm[k] * (-gk * sk - bk * ck)
                else:
                    d_vm[r, k] += gk * sk + bk * ck
                    d_va[r, k] += vm[k] * (gk * ck - bk * sk)

    if pin_ref:
        keep = [k for k, bid in enumerate(view.bus_ids) if bid != view.ref_bus]
        d_va = d_va[:, keep]
    return np.hstack([d_va, d_vm])


def jacobian_rect(view: ModelView, specs) -> np.ndarray:
    """Constant H over the rectangular layout [vr (n); vi (n)].

    Only measurement kinds that are linear in rectangular coordinates are
    supported: PMU voltage rows are 0/1 selectors, PMU current rows carry
    branch-admittance coefficients.
    """
    n = view.n_bus
    h = np.zeros((len(specs), 2 * n))
    for r, m in enumerate(specs):
        if m.kind in PMU_VOLTAGE_KINDS:
            k = view.require(m.bus)
            h[r, k if m.kind == "pmu_vr" else n + k] = 1.0
        elif m.kind in PMU_CURRENT_KINDS:
            i, j, ymm, ymf = view.branch_ends(m)
            for k, y in ((i, ymm), (j, ymf)):
                if m.kind == "pmu_ir":
                    h[r, k] += y.real
                    h[r, n + k] += -y.imag
                else:
                    h[r, k] += y.imag
                    h[r, n + k] += y.real
        else:
            raise ValidationError(f"{m.kind} is not linear in rectangular coordinates")
    return h


def synthesize(view: ModelView, true_state: StateVector, specs, sigma_for, rng) -> MeasurementSet:
    """True values plus independent Gaussian noise, deterministic under rng.

    ``sigma_for`` maps a measurement kind to its standard deviation; the
    generator is owned by the caller (pass sigma 0 values via a zeroed
    table to get exact h values -- noise is drawn as sigma * N(0,1), so a
    zero sigma reproduces h exactly under any seed).
    """
    truth = h_eval(view, true_state, specs)
    out = []
    for m, h0 in zip(specs, truth):
        sig = float(sigma_for(m.kind)) if callable(sigma_for) else float(sigma_for[m.kind])
        noise = sig * rng.standard_normal()
        out.append(replace(m, value=float(h0 + noise), sigma=sig if sig > 0.0 else 1.0))
    return MeasurementSet(tuple(out))


# ---------------------------------------------------------------------------
# polar <-> rectangular conversion with covariance transport


def _polar_rect_jacobian(vm, va):
    """d(vr, vi)/d(va, vm) as a dense 2n x 2n block matrix."""
    n = len(vm)
    j = np.zeros((2 * n, 2 * n))
    c, s = np.cos(va), np.sin(va)
    j[:n, :n] = np.diag(-vm * s)  # dvr/dva
    j[:n, n:] = np.diag(c)  # dvr/dvm
    j[n:, :n] = np.diag(vm * c)  # dvi/dva
    j[n:, n:] = np.diag(s)  # dvi/dvm
    return j


def expand_polar_cov(cov, n, free_angle_idx):
    """Embed an estimate covariance over [va(free); vm(all)] into the full
    [va(all); vm(all)] layout, zero variance at pinned angles."""
    full = np.zeros((2 * n, 2 * n))
    idx = list(free_angle_idx) + [n + k for k in range(n)]
    full[np.ix_(idx, idx)] = cov
    return full


def polar_to_rect(state: StateVector, cov=None):
    """(V, theta) -> (V cos theta, V sin theta); covariance transported by
    first-order propagation C_rect = J C_polar J^T.

    ``cov``, when given, must be over the full [va; vm] layout (use
    :func:`expand_polar_cov` for pinned-reference estimates).
    """
    if state.coord != "polar":
        raise ValidationError("polar_to_rect expects a polar state")
    vm, va = state.v1, state.v2
    rect = StateVector(
        "rect", state.bus_ids, vm * np.cos(va), vm * np.sin(va), ref_bus=state.ref_bus
    )
    if cov is None:
        return rect, None
    j = _polar_rect_jacobian(vm, va)
    return rect, j @ cov @ j.T


def rect_to_polar(state: StateVector, cov=None):
    """Inverse conversion; angles in (-pi, pi].  Covariance over [vr; vi]
    comes back over the full [va; vm] layout."""
    if state.coord != "rect":
        raise ValidationError("rect_to_polar expects a rectangular state")
    vr, vi = state.v1, state.v2
    vm = np.hypot(vr, vi)
    if np.any(vm <= 0.0):
        raise ValidationError("cannot convert zero phasor to polar")
    va = np.arctan2(vi, vr)
    polar = StateVector("polar", state.bus_ids, vm, va, ref_bus=state.ref_bus)
    if cov is None:
        return polar, None
    n = len(vm)
    j = np.zeros((2 * n, 2 * n))
    j[:n, :n] = np.diag(-vi / vm**2)  # dva/dvr
    j[:n, n:] = np.diag(vr / vm**2)  # dva/dvi
    j[n:, :n] = np.diag(vr / vm)  # dvm/dvr
    j[n:, n:] = np.diag(vi / vm)  # dvm/dvi
    return polar, j @ cov @ j.T


def wrap_angle(delta):
    """Wrap angle differences into (-pi, pi]."""
    return -np.mod(-np.asarray(delta) + np.pi, 2.0 * np.pi) + np.pi


# ---------------------------------------------------------------------------
# redundancy bookkeeping


def redundancy(net: PowerNetwork, part: AreaPartition, plan: MeasurementPlan):
    """Per-area (measurement count, state dimension, eta = m/n) for the
    level-1 SCADA models; warnings for any area below eta = 1.0."""
    specs = plan.expand(net)
    from .netmodel import boundary_measurement_ownership

    scada = [m for m in specs if m.kind in INJECTION_KINDS + FLOW_KINDS]
    owned = boundary_measurement_ownership(part, scada)
    report = {}
    warnings = []
    for area in part.areas:
        m_count = len(owned[area.index])
        n_state = 2 * len(area.layout) - 1
        eta = m_count / n_state
        report[area.index] = (m_count, n_state, eta)
        if eta < 1.0:
            warnings.append(
                f"area {area.index}: eta = {eta:.3f} < 1.0 "
                f"({m_count} measurements for {n_state} states); likely unobservable"
            )
    return report, warnings
