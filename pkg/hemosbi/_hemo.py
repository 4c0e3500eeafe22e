#!/usr/bin/env python
"""_hemo: finite volume kernels for the 1D blood flow equations

State per segment is the cell averaged area A and flow Q. The conservative flux is
F = (Q, alpha Q^2/A + beta A^(3/2) / (3 rho)); boundary conditions hand back face
states (A*, Q*) that are turned into fluxes with the same F.

For new code use the wrappers in hemo.py, this module works on plain arrays and
precomputed coefficients and performs no validation of its own.
"""

from .utils import SolverError, InternalError
from scipy.optimize import newton as _newton
from scipy.linalg import solve_banded as _solve_banded
from collections import namedtuple
import math

import numpy as np

SQRT_PI = math.sqrt(math.pi)

JUNCTION_TOL = 1e-10
JUNCTION_MAX_ITER = 50
BOUNDARY_TOL = 1e-13

# coefficients of a segment end (a face): reference area, its root, beta, external
# pressure and the reference wave speed c0 = sqrt(beta / 2 rho) A0^(1/4)
Face = namedtuple('Face', 'a0 sqrt_a0 beta p_ext c0')

# coefficients of the cell next to a face, used to evaluate the outgoing characteristic
CellCoefficients = namedtuple('CellCoefficients', 'a0 beta')


def minmod(a, b):
    return np.where(a * b > 0, np.sign(a) * np.minimum(np.abs(a), np.abs(b)), 0.0)


def monotonized_central(a, b):
    slope = np.minimum(np.minimum(2 * np.abs(a), 2 * np.abs(b)), 0.5 * np.abs(a + b))
    return np.where(a * b > 0, np.sign(a) * slope, 0.0)


def superbee(a, b):
    aa, ab = np.abs(a), np.abs(b)
    slope = np.maximum(np.minimum(2 * aa, ab), np.minimum(aa, 2 * ab))
    return np.where(a * b > 0, np.sign(a) * slope, 0.0)


LIMITERS = {'minmod': minmod, 'mc': monotonized_central, 'superbee': superbee}


def celerity(A, beta, rho):
    return np.sqrt(beta / (2.0 * rho)) * A ** 0.25


def flux(A, Q, beta, rho, alpha):
    return Q, alpha * Q * Q / A + beta * A ** 1.5 / (3.0 * rho)


def max_speed(A, Q, beta, rho, alpha):
    """Largest characteristic speed |lambda| of the (A, Q) system"""
    u = Q / A
    c = celerity(A, beta, rho)
    return alpha * np.abs(u) + np.sqrt(c * c + alpha * (alpha - 1.0) * u * u)


def make_face(a0, beta, p_ext, rho):
    return Face(a0, math.sqrt(a0), beta, p_ext, math.sqrt(beta / (2.0 * rho)) * a0 ** 0.25)


class SegmentPlan(object):
    """Per cell and per face coefficients of one discretised segment"""
    __slots__ = ('id', 'n', 'length', 'dx', 'centers', 'a0', 'sqrt_a0', 'beta', 'gamma',
                 'face_beta', 'dsqrt_a0', 'dbeta', 'p_ext', 'tapered', 'left', 'right',
                 'left_cell', 'right_cell')

    def __init__(self, seg, n_cells, blood):
        self.id = seg.id
        self.n = n_cells
        self.length = seg.length
        self.dx = seg.length / n_cells
        rel = (np.arange(n_cells) + 0.5) / n_cells
        self.centers = rel * seg.length
        radius = seg.radius_at(rel)
        self.a0 = np.pi * radius ** 2
        self.sqrt_a0 = np.sqrt(self.a0)
        self.beta = seg.beta_at(rel)
        self.gamma = seg.gamma_at(rel)
        self.face_beta = seg.beta_at(np.arange(n_cells + 1) / float(n_cells))
        slope = (seg.radius_distal - seg.radius_proximal) / seg.length
        self.dsqrt_a0 = SQRT_PI * slope * np.ones(n_cells)
        # beta ~ 1 / r^2
        self.dbeta = -2.0 * self.beta * slope / radius
        self.p_ext = seg.external_pressure
        self.tapered = seg.tapered
        self.left = make_face(seg.reference_area_at(0.0), seg.beta_at(0.0), seg.external_pressure,
                              blood.density)
        self.right = make_face(seg.reference_area_at(1.0), seg.beta_at(1.0), seg.external_pressure,
                               blood.density)
        self.left_cell = CellCoefficients(self.a0[0], self.beta[0])
        self.right_cell = CellCoefficients(self.a0[-1], self.beta[-1])

    def pressure(self, A):
        return self.p_ext + self.beta * (np.sqrt(A) - self.sqrt_a0)

    def interpolate(self, values, position):
        return float(np.interp(position * self.length, self.centers, values))


class NetworkPlan(object):
    """Discretised network: segment plans plus the boundary bookkeeping"""
    def __init__(self, net, cells):
        self.blood = net.blood
        self.root = net.root
        self.order = [seg.id for seg in net.segments]
        self.segments = dict((seg.id, SegmentPlan(seg, n, net.blood))
                             for seg, n in zip(net.segments, cells))
        self.junctions = net.junctions()
        self.leaves = net.leaves()
        self.beds = dict((leaf, net.beds[leaf]) for leaf in self.leaves)

    def volume(self, areas):
        return math.fsum(float(np.sum(areas[sid])) * self.segments[sid].dx for sid in self.order)


def characteristic(A, Q, cell, rho, sign):
    """Riemann invariant W = u + sign 4 (c - c0) evaluated with the cell coefficients"""
    return Q / A + sign * 4.0 * (celerity(A, cell.beta, rho) - celerity(cell.a0, cell.beta, rho))


def inlet_state(q_in, A, Q, cell, face, rho):
    """Face state at a prescribed inflow using the outgoing (backward) characteristic

    Solves q_in / A* - 4 (c(A*) - c0) = W2 for A*, in units of the face reference area.
    """
    w2 = characteristic(A, Q, cell, rho, -1.0)
    q = q_in / face.a0
    c0 = face.c0

    def f(x):
        return q / x - 4.0 * c0 * (x ** 0.25 - 1.0) - w2

    def fprime(x):
        return -q / (x * x) - c0 * x ** -0.75

    x = _scalar_newton(f, fprime, A / face.a0, "inlet")
    return x * face.a0, q_in


def windkessel_update(pc, q, bed, dt):
    """Implicit Euler step of the bed (capacitor) pressure for outflow q

    Returns the new bed pressure and d(new pressure)/dq.
    """
    r2, cap = bed.distal_resistance, bed.compliance
    if r2 == 0:
        return bed.outflow_pressure, 0.0
    denom = 1.0 + dt / (r2 * cap)
    gain = dt / cap / denom
    return (pc + dt / cap * (q + bed.outflow_pressure / r2)) / denom, gain


def outlet_state(A, Q, cell, face, bed, pc, dt, rho):
    """Face state at a 3-element Windkessel coupled to the forward characteristic

    The terminal pressure P(A*) must equal P_c(new) + R1 Q* where Q* follows from
    the invariant W1 of the last cell.

    Returns (A*, Q*, new bed pressure).
    """
    w1 = characteristic(A, Q, cell, rho, 1.0)
    c0, a0, r1 = face.c0, face.a0, bed.proximal_resistance
    stiffness = face.beta * face.sqrt_a0

    def flow(x):
        return a0 * x * (w1 - 4.0 * c0 * (x ** 0.25 - 1.0))

    def g(x):
        q = flow(x)
        pc_new, _ = windkessel_update(pc, q, bed, dt)
        return face.p_ext + stiffness * (math.sqrt(x) - 1.0) - r1 * q - pc_new

    def gprime(x):
        u = w1 - 4.0 * c0 * (x ** 0.25 - 1.0)
        dq = a0 * (u - c0 * x ** 0.25)
        _, gain = windkessel_update(pc, 0.0, bed, dt)
        return stiffness / (2.0 * math.sqrt(x)) - (r1 + gain) * dq

    x = _scalar_newton(g, gprime, A / a0, "outlet")
    q = flow(x)
    pc_new, _ = windkessel_update(pc, q, bed, dt)
    return x * a0, q, pc_new


def _scalar_newton(f, fprime, x0, where):
    try:
        x = _newton(f, x0, fprime=fprime, tol=BOUNDARY_TOL, maxiter=50)
    except (RuntimeError, ZeroDivisionError, OverflowError, ValueError) as err:
        raise SolverError("{} boundary solve failed: {}".format(where, err))
    if not (np.isfinite(x) and x > 0):
        raise SolverError("{} boundary solve produced a non-positive area".format(where),
                          residual=float(x))
    return float(x)


def solve_junction(ends, rho, total_pressure=True):
    """Damped Newton solve of the junction coupling

    ends is a list of (A, Q, cell, face, sign), the parent first with sign +1 (its
    forward characteristic leaves the segment into the junction), then every child
    with sign -1. Unknowns are the face areas scaled by their reference areas; the
    equations are conservation of mass and continuity of (total) pressure between the
    parent and each child.

    Returns ([(A*, Q*) per end], iterations, scaled residual). The parent flow is
    set to the sum of the child flows so the coupling is mass conservative to
    rounding.
    """
    m = len(ends)
    invariants = np.array([characteristic(A, Q, cell, rho, sign) for A, Q, cell, _, sign in ends])
    a0 = np.array([face.a0 for _, _, _, face, _ in ends])
    c0 = np.array([face.c0 for _, _, _, face, _ in ends])
    stiffness = np.array([face.beta * face.sqrt_a0 for _, _, _, face, _ in ends])
    p_ext = np.array([face.p_ext for _, _, _, face, _ in ends])
    signs = np.array([sign for _, _, _, _, sign in ends], dtype=float)
    kinetic = 1.0 if total_pressure else 0.0

    flow_scale = a0[0] * c0[0]
    pressure_scale = rho * c0[0] * c0[0]

    def evaluate(x):
        root4 = x ** 0.25
        u = invariants - signs * 4.0 * c0 * (root4 - 1.0)
        q = a0 * x * u
        h = p_ext + stiffness * (np.sqrt(x) - 1.0) + kinetic * 0.5 * rho * u * u
        residual = np.empty(m)
        residual[0] = (q[0] - np.sum(q[1:])) / flow_scale
        residual[1:] = (h[0] - h[1:]) / pressure_scale

        dq = a0 * (u - signs * c0 * root4)
        du = -signs * c0 * x ** -0.75
        dh = stiffness / (2.0 * np.sqrt(x)) + kinetic * rho * u * du
        jac = np.zeros((m, m))
        jac[0, 0] = dq[0] / flow_scale
        jac[0, 1:] = -dq[1:] / flow_scale
        jac[1:, 0] = dh[0] / pressure_scale
        jac[np.arange(1, m), np.arange(1, m)] = -dh[1:] / pressure_scale
        return residual, jac, q

    x = np.array([A for A, _, _, _, _ in ends]) / a0
    residual, jac, q = evaluate(x)
    norm = np.max(np.abs(residual))
    iterations = 0
    while norm >= JUNCTION_TOL:
        if iterations >= JUNCTION_MAX_ITER:
            raise SolverError("junction Newton iteration did not converge", residual=float(norm))
        iterations += 1
        try:
            step = np.linalg.solve(jac, -residual)
        except np.linalg.LinAlgError:
            raise SolverError("singular junction Jacobian", residual=float(norm))

        damping = 1.0
        while True:
            trial = x + damping * step
            if np.all(trial > 0):
                t_residual, t_jac, t_q = evaluate(trial)
                t_norm = np.max(np.abs(t_residual))
                if t_norm < norm or damping < 1e-4:
                    break
            elif damping < 1e-4:
                raise SolverError("junction Newton step leaves the positive areas", residual=float(norm))
            damping *= 0.5
        x, residual, jac, q, norm = trial, t_residual, t_jac, t_q, t_norm
        if not np.isfinite(norm):
            raise SolverError("junction residual is not finite", residual=float(norm))

    q = q.copy()
    q[0] = math.fsum(q[1:])
    return [(float(x[i] * a0[i]), float(q[i])) for i in range(m)], iterations, float(norm)


def boundary_states(plan, areas, flows, t, bed_pressure, dt, inflow, total_pressure):
    """Face states for every segment end at time t

    Returns (faces, new bed pressures, inflow, outflows) where faces maps a segment id
    to [left (A, Q), right (A, Q)].
    """
    rho = plan.blood.density
    faces = dict((sid, [None, None]) for sid in plan.order)

    root = plan.segments[plan.root]
    q_in = float(inflow(t))
    faces[plan.root][0] = inlet_state(q_in, areas[plan.root][0], flows[plan.root][0],
                                      root.left_cell, root.left, rho)

    for parent, children in plan.junctions:
        p = plan.segments[parent]
        ends = [(areas[parent][-1], flows[parent][-1], p.right_cell, p.right, 1.0)]
        for child in children:
            c = plan.segments[child]
            ends.append((areas[child][0], flows[child][0], c.left_cell, c.left, -1.0))
        try:
            states, _, _ = solve_junction(ends, rho, total_pressure)
        except SolverError as err:
            err.segment, err.time = parent, t
            raise
        faces[parent][1] = states[0]
        for child, state in zip(children, states[1:]):
            faces[child][0] = state

    new_pc, outflow = {}, {}
    for leaf in plan.leaves:
        s = plan.segments[leaf]
        try:
            A, Q, pc = outlet_state(areas[leaf][-1], flows[leaf][-1], s.right_cell, s.right,
                                    plan.beds[leaf], bed_pressure[leaf], dt, rho)
        except SolverError as err:
            err.segment, err.time = leaf, t
            raise
        faces[leaf][1] = (A, Q)
        new_pc[leaf] = pc
        outflow[leaf] = Q

    return faces, new_pc, q_in, outflow


def segment_rhs(seg, A, Q, left, right, blood, limiter, friction):
    """Semi-discrete right hand side dU/dt of one segment (MUSCL + Rusanov)"""
    rho, alpha = blood.density, blood.coriolis
    n = seg.n
    slope_a = np.zeros(n)
    slope_q = np.zeros(n)
    if n > 2:
        da = np.diff(A)
        dq = np.diff(Q)
        slope_a[1:-1] = limiter(da[:-1], da[1:])
        slope_q[1:-1] = limiter(dq[:-1], dq[1:])

    a_l = A[:-1] + 0.5 * slope_a[:-1]
    a_r = A[1:] - 0.5 * slope_a[1:]
    q_l = Q[:-1] + 0.5 * slope_q[:-1]
    q_r = Q[1:] - 0.5 * slope_q[1:]
    beta_f = seg.face_beta[1:-1]

    fa_l, fq_l = flux(a_l, q_l, beta_f, rho, alpha)
    fa_r, fq_r = flux(a_r, q_r, beta_f, rho, alpha)
    speed = np.maximum(max_speed(a_l, q_l, beta_f, rho, alpha),
                       max_speed(a_r, q_r, beta_f, rho, alpha))

    flux_a = np.empty(n + 1)
    flux_q = np.empty(n + 1)
    flux_a[1:-1] = 0.5 * (fa_l + fa_r) - 0.5 * speed * (a_r - a_l)
    flux_q[1:-1] = 0.5 * (fq_l + fq_r) - 0.5 * speed * (q_r - q_l)
    flux_a[0], flux_q[0] = flux(left[0], left[1], seg.face_beta[0], rho, alpha)
    flux_a[-1], flux_q[-1] = flux(right[0], right[1], seg.face_beta[-1], rho, alpha)

    rhs_a = -(flux_a[1:] - flux_a[:-1]) / seg.dx
    rhs_q = -(flux_q[1:] - flux_q[:-1]) / seg.dx
    if friction:
        rhs_q -= blood.friction_coefficient * Q / A
    if seg.tapered:
        rhs_q += A / rho * (seg.beta * seg.dsqrt_a0 + seg.dbeta * (seg.sqrt_a0 - (2.0 / 3.0) * np.sqrt(A)))
    return rhs_a, rhs_q


def viscous_split(seg, A, Q, dt, rho):
    """Implicit step of the wall viscosity term dQ/dt = A/rho d/dx(Gamma/sqrt(A) dQ/dx)

    The visco-elastic part of the tube law enters the momentum equation as this
    diffusion of Q: the correction acts on Q, not on A. Zero gradient at both
    segment ends, the areas are left untouched, so the step conserves volume exactly.
    """
    n = seg.n
    if n < 2 or not np.any(seg.gamma > 0):
        return Q
    g = seg.gamma / np.sqrt(A)
    g_face = 0.5 * (g[:-1] + g[1:])
    w = dt * A / (rho * seg.dx * seg.dx)
    left = np.zeros(n)
    right = np.zeros(n)
    left[1:] = g_face
    right[:-1] = g_face

    bands = np.zeros((3, n))
    bands[0, 1:] = -w[:-1] * g_face
    bands[1, :] = 1.0 + w * (left + right)
    bands[2, :-1] = -w[1:] * g_face
    return _solve_banded((1, 1), bands, Q)


def ssp_rk2_step(plan, areas, flows, t, bed_pressure, dt, inflow, limiter, friction, viscous,
                 total_pressure):
    """One SSP-RK2 step of the whole network

    Returns (areas, flows, bed pressures, effective inflow, effective outflows); the
    effective boundary flows are the stage averages, so the network volume changes by
    exactly dt (inflow - sum outflows).
    """
    blood = plan.blood

    faces1, pc1, qin1, qout1 = boundary_states(plan, areas, flows, t, bed_pressure, dt, inflow,
                                               total_pressure)
    stage_a, stage_q = {}, {}
    for sid in plan.order:
        seg = plan.segments[sid]
        ra, rq = segment_rhs(seg, areas[sid], flows[sid], faces1[sid][0], faces1[sid][1],
                             blood, limiter, friction)
        stage_a[sid] = areas[sid] + dt * ra
        stage_q[sid] = flows[sid] + dt * rq
    _check_state(plan, stage_a, stage_q, t + dt)

    faces2, pc2, qin2, qout2 = boundary_states(plan, stage_a, stage_q, t + dt, pc1, dt, inflow,
                                               total_pressure)
    new_a, new_q = {}, {}
    for sid in plan.order:
        seg = plan.segments[sid]
        ra, rq = segment_rhs(seg, stage_a[sid], stage_q[sid], faces2[sid][0], faces2[sid][1],
                             blood, limiter, friction)
        new_a[sid] = 0.5 * areas[sid] + 0.5 * (stage_a[sid] + dt * ra)
        new_q[sid] = 0.5 * flows[sid] + 0.5 * (stage_q[sid] + dt * rq)
        if viscous:
            new_q[sid] = viscous_split(seg, new_a[sid], new_q[sid], dt, blood.density)
    _check_state(plan, new_a, new_q, t + dt)

    new_pc = dict((leaf, 0.5 * (bed_pressure[leaf] + pc2[leaf])) for leaf in plan.leaves)
    outflow = dict((leaf, 0.5 * (qout1[leaf] + qout2[leaf])) for leaf in plan.leaves)
    return new_a, new_q, new_pc, 0.5 * (qin1 + qin2), outflow


def _check_state(plan, areas, flows, t):
    for sid in plan.order:
        A, Q = areas[sid], flows[sid]
        bad = ~(np.isfinite(A) & np.isfinite(Q) & (A > 0))
        if np.any(bad):
            cell = int(np.argmax(bad))
            raise SolverError("non-finite or non-positive state", segment=sid, cell=cell, time=t)


def timestep(plan, areas, flows, cfl):
    blood = plan.blood
    dt = np.inf
    for sid in plan.order:
        seg = plan.segments[sid]
        if not seg.dx > 0:
            raise InternalError("segment {} has a degenerate cell width".format(sid))
        speed = np.max(max_speed(areas[sid], flows[sid], seg.beta, blood.density, blood.coriolis))
        dt = min(dt, seg.dx / speed)
    return cfl * dt
