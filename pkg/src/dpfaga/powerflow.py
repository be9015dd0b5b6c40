"""Newton-Raphson AC power flow in polar coordinates, plus limit checking.

Solves the nodal power-balance equations for a validated `GridCase`:
PQ buses hold specified (P, Q), PV buses hold (P, |V|), the slack bus holds
(|V|, angle 0). Scheduled active generation is not part of the case schema,
so PV buses are modeled with zero scheduled generation and the slack bus
balances the system.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import AdmittanceMatrix, GridCase, build_ybus


class NonConvergence(RuntimeError):
    def __init__(self, iterations: int, final_mismatch: float):
        self.iterations = iterations
        self.final_mismatch = final_mismatch
        super().__init__(
            f"power flow did not converge after {iterations} iterations "
            f"(max mismatch {final_mismatch:.3e} pu)"
        )


class SingularJacobian(RuntimeError):
    def __init__(self, iteration: int):
        self.iteration = iteration
        super().__init__(f"singular Jacobian in Newton iteration {iteration}")


@dataclass(frozen=True)
class LoadVector:
    """Per-bus real/reactive demand (pu)."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        if self.p.shape != self.q.shape or self.p.ndim != 1:
            raise ValueError(f"load vectors must be equal-length 1-D, got {self.p.shape} and {self.q.shape}")


@dataclass(frozen=True)
class PfSolution:
    v_mag: np.ndarray
    v_ang: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    iterations: int
    max_mismatch: float


@dataclass(frozen=True)
class LimitEntry:
    index: int          # bus id (voltage/angle families) or generator position
    value: float
    lo: float
    hi: float

    @property
    def violation(self) -> float:
        if self.value < self.lo:
            return self.lo - self.value
        if self.value > self.hi:
            return self.value - self.hi
        return 0.0

    @property
    def satisfied(self) -> bool:
        return self.violation == 0.0


@dataclass(frozen=True)
class LimitReport:
    """Bound checks for generator P/Q injections and bus voltage magnitude/angle."""

    p_gen: tuple[LimitEntry, ...]
    q_gen: tuple[LimitEntry, ...]
    v_mag: tuple[LimitEntry, ...]
    v_ang: tuple[LimitEntry, ...]

    def all_satisfied(self) -> bool:
        return all(e.satisfied for fam in (self.p_gen, self.q_gen, self.v_mag, self.v_ang) for e in fam)


def compute_injections(ybus: AdmittanceMatrix, v_mag: np.ndarray, v_ang: np.ndarray):
    """Nodal injections implied by a voltage profile: S = V * conj(Y V)."""
    if v_mag.shape != (ybus.n,) or v_ang.shape != (ybus.n,):
        raise ValueError(f"profile shapes {v_mag.shape}/{v_ang.shape} do not match Y dimension {ybus.n}")
    v = v_mag * np.exp(1j * v_ang)
    s = v * np.conj(ybus.y @ v)
    return s.real, s.imag


def _mismatch(ybus, v_mag, v_ang, s_sched, pvpq, pq):
    v = v_mag * np.exp(1j * v_ang)
    s = v * np.conj(ybus.y @ v)
    ds = s - s_sched
    return np.concatenate([ds.real[pvpq], ds.imag[pq]]), v


def _jacobian(ybus, v, pvpq, pq):
    # Complex-derivative assembly of the polar power-flow Jacobian:
    #   dS/dtheta = j diag(V) conj(diag(I) - Y diag(V))
    #   dS/d|V|   = diag(V/|V|) conj(diag(I)) + diag(V) conj(Y diag(V/|V|))
    i_bus = ybus.y @ v
    diag_v = np.diag(v)
    e = v / np.abs(v)
    ds_dth = 1j * diag_v @ np.conj(np.diag(i_bus) - ybus.y @ diag_v)
    ds_dvm = np.diag(e) @ np.conj(np.diag(i_bus)) + diag_v @ np.conj(ybus.y @ np.diag(e))
    j11 = ds_dth[np.ix_(pvpq, pvpq)].real
    j12 = ds_dvm[np.ix_(pvpq, pq)].real
    j21 = ds_dth[np.ix_(pq, pvpq)].imag
    j22 = ds_dvm[np.ix_(pq, pq)].imag
    return np.block([[j11, j12], [j21, j22]])


def solve_pf(case: GridCase, loads: LoadVector, tol: float = 1e-8, max_iter: int = 20,
             ybus: AdmittanceMatrix | None = None,
             mismatch_trace: list | None = None) -> PfSolution:
    """Newton-Raphson from flat start (PQ: 1 at angle 0, PV/slack: v_set at angle 0).

    Pure function of its inputs and bit-deterministic; safe to call
    concurrently over independent samples. If `mismatch_trace` is a list,
    the max mismatch after each evaluation is appended to it.

    Raises NonConvergence if max_iter is exhausted or the mismatch stops
    being finite, SingularJacobian if a Newton linear solve fails.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = case.n_bus
    if loads.p.shape != (n,):
        raise ValueError(f"load vector length {loads.p.shape[0]} does not match case size {n}")
    if ybus is None:
        ybus = build_ybus(case)

    slack = case.slack_index
    pv = case.pv_indices()
    pq = case.pq_indices()
    pvpq = np.sort(np.concatenate([pv, pq]))

    s_sched = -(loads.p + 1j * loads.q)  # zero scheduled generation at PV buses
    v_mag = case.v_setpoints().copy()
    v_mag[pq] = 1.0
    v_ang = np.zeros(n)

    f, v = _mismatch(ybus, v_mag, v_ang, s_sched, pvpq, pq)
    mism = float(np.max(np.abs(f))) if f.size else 0.0
    if mismatch_trace is not None:
        mismatch_trace.append(mism)
    n_pvpq = len(pvpq)
    iterations = 0
    while mism >= tol:
        if iterations >= max_iter:
            raise NonConvergence(iterations, mism)
        try:
            dx = np.linalg.solve(_jacobian(ybus, v, pvpq, pq), f)
        except np.linalg.LinAlgError:
            raise SingularJacobian(iterations + 1) from None
        iterations += 1
        v_ang[pvpq] -= dx[:n_pvpq]
        v_mag[pq] -= dx[n_pvpq:]
        f, v = _mismatch(ybus, v_mag, v_ang, s_sched, pvpq, pq)
        mism = float(np.max(np.abs(f))) if f.size else 0.0
        if mismatch_trace is not None:
            mismatch_trace.append(mism)
        if not np.isfinite(mism):
            raise NonConvergence(iterations, mism)

    p_inj, q_inj = compute_injections(ybus, v_mag, v_ang)
    return PfSolution(v_mag=v_mag, v_ang=v_ang, p_inj=p_inj, q_inj=q_inj,
                      iterations=iterations, max_mismatch=mism)


def check_limits(case: GridCase, sol: PfSolution) -> LimitReport:
    """Evaluate generator injection and bus voltage/angle bounds on a solution.

    Generator injections are recovered as net injection plus local load at
    the generator's bus (a bus hosting several generators is checked
    against each generator's bounds with the bus total).
    """
    p_gen = []
    q_gen = []
    for idx, g in enumerate(case.generators):
        b = case.buses[g.bus]
        p_gen.append(LimitEntry(index=idx, value=float(sol.p_inj[g.bus] + b.p_load), lo=g.p_min, hi=g.p_max))
        q_gen.append(LimitEntry(index=idx, value=float(sol.q_inj[g.bus] + b.q_load), lo=g.q_min, hi=g.q_max))
    v_mag = [LimitEntry(index=b.id, value=float(sol.v_mag[b.id]), lo=b.v_min, hi=b.v_max) for b in case.buses]
    v_ang = [LimitEntry(index=b.id, value=float(sol.v_ang[b.id]), lo=b.d_min, hi=b.d_max) for b in case.buses]
    return LimitReport(p_gen=tuple(p_gen), q_gen=tuple(q_gen), v_mag=tuple(v_mag), v_ang=tuple(v_ang))
