"""Planar articulated-chain dynamics: semi-implicit Euler with impulse constraints.

Bodies are uniform rods (capsule ends for ground contact) linked by revolute
joints at the parent's distal tip. Each substep: apply gravity and joint
torques to velocities, run Gauss-Seidel impulse iterations (joint point
constraints, joint angle limits, ground contacts with Coulomb friction),
integrate positions, then correct positional drift. Contacts use a per-rod
2x2 block solve so a rod resting flat comes to an exact standstill.

The substep kernel compiles with numba when available; the pure-Python path
is the same function body, so behavior stays aligned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SUBSTEP_HZ = 240.0
CONTACT_ACTIVATE = 1e-3   # endpoints this close to the ground join the solve
GROUND_SLOP = 1e-4
POSITION_BETA = 0.5

try:
    from numba import njit as _njit

    def _maybe_jit(fn):
        return _njit(cache=True, fastmath=False)(fn)

    NUMBA_ENABLED = True
except ImportError:  # pragma: no cover - exercised only without numba
    def _maybe_jit(fn):
        return fn

    NUMBA_ENABLED = False


class SimulationDiverged(RuntimeError):
    """Physics state became non-finite."""


@dataclass
class PhysState:
    """Maximal-coordinate body state, preorder-aligned with the morphology."""

    px: np.ndarray
    pz: np.ndarray
    th: np.ndarray
    vx: np.ndarray
    vz: np.ndarray
    om: np.ndarray
    length: np.ndarray
    radius: np.ndarray
    inv_m: np.ndarray
    inv_i: np.ndarray
    parent: np.ndarray      # int64, -1 for the root
    rot_half: np.ndarray    # joint limit half-range, 0.0 for the root
    max_torque: np.ndarray  # 0.0 for the root

    def copy(self) -> "PhysState":
        return PhysState(**{k: v.copy() for k, v in self.__dict__.items()})

    def finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in
                   (self.px, self.pz, self.th, self.vx, self.vz, self.om))


def rest_layout(lengths, radii, parent):
    """Horizontal rest pose: every rod at angle 0, chained tip-to-base.

    Returns (px, pz) of rod centers with the root resting on the ground plane;
    the shared height is the largest radius so no rod starts penetrating.
    """
    n = len(lengths)
    px = np.zeros(n)
    pz = np.full(n, float(np.max(radii)) if n else 0.0)
    for i in range(n):
        p = parent[i]
        if p >= 0:
            tip = px[p] + lengths[p] / 2.0
            px[i] = tip + lengths[i] / 2.0
    return px, pz


def build_state(lengths, radii, rot_ranges, max_torques, parent, density: float) -> PhysState:
    """Assemble body arrays from preorder per-limb attributes."""
    lengths = np.asarray(lengths, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64)
    parent = np.asarray(parent, dtype=np.int64)
    n = lengths.shape[0]
    mass = density * lengths * (2.0 * radii)
    width = 2.0 * radii
    inertia = mass * (lengths ** 2 + width ** 2) / 12.0
    px, pz = rest_layout(lengths, radii, parent)
    return PhysState(
        px=px, pz=pz, th=np.zeros(n), vx=np.zeros(n), vz=np.zeros(n), om=np.zeros(n),
        length=lengths, radius=radii,
        inv_m=1.0 / mass, inv_i=1.0 / inertia,
        parent=parent,
        rot_half=np.asarray(rot_ranges, dtype=np.float64) / 2.0,
        max_torque=np.asarray(max_torques, dtype=np.float64),
    )


def _substep_impl(px, pz, th, vx, vz, om, length, radius, inv_m, inv_i,
                  parent, torque, rot_half, gravity, mu, dt,
                  n_vel, n_pos, slop, activate, beta):
    n = px.shape[0]

    # external forces: gravity plus joint torques (equal and opposite)
    for i in range(n):
        vz[i] -= gravity * dt
        p = parent[i]
        if p >= 0:
            om[i] += torque[i] * inv_i[i] * dt
            om[p] -= torque[i] * inv_i[p] * dt

    # per-endpoint impulse accumulators for the Coulomb friction budget
    pn_acc = np.zeros((n, 2))
    pt_acc = np.zeros((n, 2))

    for _ in range(n_vel):
        # revolute joints: zero relative velocity at the shared anchor
        for i in range(n):
            p = parent[i]
            if p < 0:
                continue
            ax = px[p] + np.cos(th[p]) * length[p] * 0.5
            az = pz[p] + np.sin(th[p]) * length[p] * 0.5
            rpx_ = ax - px[p]
            rpz_ = az - pz[p]
            rcx_ = ax - px[i]
            rcz_ = az - pz[i]
            relx = (vx[i] - om[i] * rcz_) - (vx[p] - om[p] * rpz_)
            relz = (vz[i] + om[i] * rcx_) - (vz[p] + om[p] * rpx_)
            k11 = inv_m[i] + inv_m[p] + inv_i[i] * rcz_ * rcz_ + inv_i[p] * rpz_ * rpz_
            k12 = -inv_i[i] * rcx_ * rcz_ - inv_i[p] * rpx_ * rpz_
            k22 = inv_m[i] + inv_m[p] + inv_i[i] * rcx_ * rcx_ + inv_i[p] * rpx_ * rpx_
            det = k11 * k22 - k12 * k12
            if det <= 0.0:
                continue
            lx = (-relx * k22 + relz * k12) / det
            lz = (relx * k12 - relz * k11) / det
            vx[i] += lx * inv_m[i]
            vz[i] += lz * inv_m[i]
            om[i] += (rcx_ * lz - rcz_ * lx) * inv_i[i]
            vx[p] -= lx * inv_m[p]
            vz[p] -= lz * inv_m[p]
            om[p] -= (rpx_ * lz - rpz_ * lx) * inv_i[p]

        # joint angle limits: kill outward relative spin at the stops
        for i in range(n):
            p = parent[i]
            if p < 0:
                continue
            phi = th[i] - th[p]
            wrel = om[i] - om[p]
            if (phi >= rot_half[i] and wrel > 0.0) or (phi <= -rot_half[i] and wrel < 0.0):
                lam = -wrel / (inv_i[i] + inv_i[p])
                om[i] += lam * inv_i[i]
                om[p] -= lam * inv_i[p]

        # ground contacts at rod endpoints
        for i in range(n):
            cth = np.cos(th[i])
            sth = np.sin(th[i])
            hx = cth * length[i] * 0.5
            hz = sth * length[i] * 0.5
            act0 = False
            act1 = False
            rx0 = rz0 = rx1 = rz1 = 0.0
            for e in range(2):
                s = -1.0 if e == 0 else 1.0
                ez = pz[i] + s * hz
                if ez - radius[i] <= activate:
                    if e == 0:
                        act0 = True
                        rx0 = s * hx
                        rz0 = s * hz - radius[i]
                    else:
                        act1 = True
                        rx1 = s * hx
                        rz1 = s * hz - radius[i]
            if act0 and act1:
                vn0 = vz[i] + om[i] * rx0
                vn1 = vz[i] + om[i] * rx1
                k11 = inv_m[i] + inv_i[i] * rx0 * rx0
                k22 = inv_m[i] + inv_i[i] * rx1 * rx1
                k12 = inv_m[i] + inv_i[i] * rx0 * rx1
                det = k11 * k22 - k12 * k12
                l0 = 0.0
                l1 = 0.0
                solved = False
                if det > 1e-16:
                    c0 = (-vn0 * k22 + vn1 * k12) / det
                    c1 = (vn0 * k12 - vn1 * k11) / det
                    if c0 >= 0.0 and c1 >= 0.0:
                        l0 = c0
                        l1 = c1
                        solved = True
                if not solved:
                    c0 = -vn0 / k11
                    if c0 >= 0.0 and vn1 + k12 * c0 >= 0.0:
                        l0 = c0
                        solved = True
                if not solved:
                    c1 = -vn1 / k22
                    if c1 >= 0.0 and vn0 + k12 * c1 >= 0.0:
                        l1 = c1
                        solved = True
                if l0 > 0.0 or l1 > 0.0:
                    vz[i] += (l0 + l1) * inv_m[i]
                    om[i] += (rx0 * l0 + rx1 * l1) * inv_i[i]
                    pn_acc[i, 0] += l0
                    pn_acc[i, 1] += l1
            elif act0 or act1:
                e = 0 if act0 else 1
                rx_ = rx0 if act0 else rx1
                vn = vz[i] + om[i] * rx_
                if vn < 0.0:
                    k = inv_m[i] + inv_i[i] * rx_ * rx_
                    lam = -vn / k
                    vz[i] += lam * inv_m[i]
                    om[i] += rx_ * lam * inv_i[i]
                    pn_acc[i, e] += lam
            # friction, budgeted by the accumulated normal impulse
            for e in range(2):
                active = act0 if e == 0 else act1
                if not active:
                    continue
                rx_ = rx0 if e == 0 else rx1
                rz_ = rz0 if e == 0 else rz1
                vt = vx[i] - om[i] * rz_
                kt = inv_m[i] + inv_i[i] * rz_ * rz_
                raw = -vt / kt
                budget = mu * pn_acc[i, e]
                total = pt_acc[i, e] + raw
                if total > budget:
                    total = budget
                elif total < -budget:
                    total = -budget
                lam = total - pt_acc[i, e]
                if lam != 0.0:
                    pt_acc[i, e] = total
                    vx[i] += lam * inv_m[i]
                    om[i] += -rz_ * lam * inv_i[i]

    # integrate positions with the constrained velocities
    for i in range(n):
        px[i] += vx[i] * dt
        pz[i] += vz[i] * dt
        th[i] += om[i] * dt

    # positional maintenance: hard angle clamps, joint drift, ground penetration
    for _ in range(n_pos):
        for i in range(n):
            p = parent[i]
            if p < 0:
                continue
            phi = th[i] - th[p]
            if phi > rot_half[i]:
                th[i] = th[p] + rot_half[i]
                wrel = om[i] - om[p]
                if wrel > 0.0:
                    lam = -wrel / (inv_i[i] + inv_i[p])
                    om[i] += lam * inv_i[i]
                    om[p] -= lam * inv_i[p]
            elif phi < -rot_half[i]:
                th[i] = th[p] - rot_half[i]
                wrel = om[i] - om[p]
                if wrel < 0.0:
                    lam = -wrel / (inv_i[i] + inv_i[p])
                    om[i] += lam * inv_i[i]
                    om[p] -= lam * inv_i[p]
        for i in range(n):
            p = parent[i]
            if p < 0:
                continue
            ax = px[p] + np.cos(th[p]) * length[p] * 0.5
            az = pz[p] + np.sin(th[p]) * length[p] * 0.5
            bx = px[i] - np.cos(th[i]) * length[i] * 0.5
            bz = pz[i] - np.sin(th[i]) * length[i] * 0.5
            gx = bx - ax
            gz = bz - az
            w = inv_m[i] / (inv_m[i] + inv_m[p])
            px[i] -= gx * w
            pz[i] -= gz * w
            px[p] += gx * (1.0 - w)
            pz[p] += gz * (1.0 - w)
        for i in range(n):
            hz = np.sin(th[i]) * length[i] * 0.5
            for e in range(2):
                s = -1.0 if e == 0 else 1.0
                ez = pz[i] + s * hz
                pen = radius[i] - ez
                if pen > slop:
                    pz[i] += beta * (pen - slop)


_substep = _maybe_jit(_substep_impl)


def step(state: PhysState, torques, gravity: float, mu: float, n_sub: int,
         n_vel: int, n_pos: int) -> None:
    """Advance the state by n_sub fixed 1/240 s substeps under held torques.

    `torques` has one entry per body; the root entry is ignored. Values are
    clamped to the joint's +-max_torque.
    """
    tq = np.clip(np.asarray(torques, dtype=np.float64),
                 -state.max_torque, state.max_torque)
    tq = np.where(state.parent >= 0, tq, 0.0)
    dt = 1.0 / SUBSTEP_HZ
    for _ in range(n_sub):
        _substep(state.px, state.pz, state.th, state.vx, state.vz, state.om,
                 state.length, state.radius, state.inv_m, state.inv_i,
                 state.parent, tq, state.rot_half,
                 gravity, mu, dt, n_vel, n_pos,
                 GROUND_SLOP, CONTACT_ACTIVATE, POSITION_BETA)
    if not state.finite():
        raise SimulationDiverged("non-finite physics state")


def energy(state: PhysState, gravity: float) -> float:
    """Kinetic plus gravitational potential energy of all bodies."""
    m = 1.0 / state.inv_m
    inertia = 1.0 / state.inv_i
    ke = 0.5 * np.sum(m * (state.vx ** 2 + state.vz ** 2) + inertia * state.om ** 2)
    pe = gravity * np.sum(m * state.pz)
    return float(ke + pe)


def warmup() -> None:
    """Trigger the JIT compile once so forked workers inherit it."""
    st = build_state([0.5, 0.5], [0.05, 0.05], [1.0, 1.0], [10.0, 10.0],
                     [-1, 0], density=10.0)
    step(st, np.zeros(2), gravity=9.81, mu=1.0, n_sub=1, n_vel=8, n_pos=4)
