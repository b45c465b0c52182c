"""
Module: Power Flow
Description: unbalanced three-phase quasi-static power flow on radial feeders using a
backward/forward sweep, with shunt faults, open breakers and symmetrical components
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import pandas as pd

from functions.feeder import PHASES, PHASE_INDEX, FeederNetwork, Generator

S_BASE = 1e6
TOLERANCE = 1e-8
STEP_TOLERANCE = 1e-10
MAX_ITER = 100
V_MIN = 0.7
FAULT_PHASE_COUNT = {'SLG': 1, 'LL': 2, 'LLG': 2, '3PH': 3}
FAULT_IMPEDANCE_RANGE = (0.001, 20.0)

A_OP = np.exp(2j * np.pi / 3)
# * phase -> sequence (zero, positive, negative)
SEQ_FROM_PHASE = np.array([
    [1, 1, 1],
    [1, A_OP, A_OP ** 2],
    [1, A_OP ** 2, A_OP]]) / 3
PHASE_FROM_SEQ = np.array([
    [1, 1, 1],
    [1, A_OP ** 2, A_OP],
    [1, A_OP, A_OP ** 2]])


class PowerFlowError(RuntimeError):
    pass


@dataclass(frozen=True)
class FaultSpec:
    bus: str
    fault_type: str
    phases: tuple
    impedance_ohm: float

    def __post_init__(self):
        if self.fault_type not in FAULT_PHASE_COUNT:
            raise ValueError(f'unknown fault type {self.fault_type}, must be one of {list(FAULT_PHASE_COUNT)}')
        phases = tuple(self.phases)
        if any(p not in PHASES for p in phases) or len(set(phases)) != len(phases):
            raise ValueError(f'invalid fault phases {phases}')
        if len(phases) != FAULT_PHASE_COUNT[self.fault_type]:
            raise ValueError(
                f'{self.fault_type} fault needs {FAULT_PHASE_COUNT[self.fault_type]} phase(s), got {len(phases)}')
        lo, hi = FAULT_IMPEDANCE_RANGE
        if not (lo <= self.impedance_ohm <= hi):
            raise ValueError(f'fault impedance {self.impedance_ohm} ohm outside [{lo}, {hi}]')
        object.__setattr__(self, 'phases', phases)

    def to_dict(self) -> dict:
        return {'bus': self.bus, 'fault_type': self.fault_type,
                'phases': list(self.phases), 'impedance_ohm': self.impedance_ohm}

    @classmethod
    def from_dict(cls, doc: dict) -> 'FaultSpec':
        return cls(bus=str(doc['bus']), fault_type=doc['fault_type'],
                   phases=tuple(doc['phases']), impedance_ohm=float(doc['impedance_ohm']))


@dataclass(frozen=True, eq=False)
class OperatingCondition:
    """operating point of one quasi-static step

    breakers maps relay id -> closed (True) / open (False); relays not listed are closed.
    generator_outputs maps generator id (document or extra) -> output fraction; missing ids run at 1.0.
    """
    global_multiplier: float = 1.0
    load_multipliers: dict = field(default_factory=dict)
    generator_outputs: dict = field(default_factory=dict)
    extra_generators: tuple = ()
    breakers: dict = field(default_factory=dict)
    fault: FaultSpec = None

    def __post_init__(self):
        multipliers = [self.global_multiplier, *self.load_multipliers.values()]
        if any(not math.isfinite(m) or m <= 0 for m in multipliers):
            raise ValueError('load multipliers must be positive and finite')
        if any(not math.isfinite(g) or g < 0 for g in self.generator_outputs.values()):
            raise ValueError('generator output fractions must be finite and non-negative')
        if any(not isinstance(b, (bool, np.bool_)) for b in self.breakers.values()):
            raise ValueError('breaker states must be booleans')

    def validate_against(self, network: FeederNetwork) -> None:
        loads = {ld.id for ld in network.loads}
        gens = {g.id for g in network.generators} | {g.id for g in self.extra_generators}
        for key in self.load_multipliers:
            if key not in loads:
                raise KeyError(f'condition references unknown load {key}')
        for key in self.generator_outputs:
            if key not in gens:
                raise KeyError(f'condition references unknown generator {key}')
        for key in self.breakers:
            if key not in network.relay_by_id:
                raise KeyError(f'condition references unknown relay {key}')
        for g in self.extra_generators:
            if g.bus not in network.bus_by_id:
                raise KeyError(f'generator {g.id} references unknown bus {g.bus}')
        if self.fault is not None:
            bus = network.bus_by_id.get(self.fault.bus)
            if bus is None or self.fault.bus == network.source.bus:
                raise KeyError(f'fault must sit on a non-source bus, got {self.fault.bus}')
            if not set(self.fault.phases) <= set(bus.phases):
                raise ValueError(f'fault phases {self.fault.phases} not present at bus {bus.id}')

    @classmethod
    def from_dict(cls, doc: dict) -> 'OperatingCondition':
        extra = tuple(
            Generator(id=str(g['id']), bus=str(g['bus']),
                      s_va=np.array([complex(*v) for v in g['s']], dtype=complex))
            for g in doc.get('extra_generators', []))
        fault = doc.get('fault')
        return cls(
            global_multiplier=float(doc.get('global_multiplier', 1.0)),
            load_multipliers={k: float(v) for k, v in doc.get('load_multipliers', {}).items()},
            generator_outputs={k: float(v) for k, v in doc.get('generator_outputs', {}).items()},
            extra_generators=extra,
            breakers={k: bool(v) for k, v in doc.get('breakers', {}).items()},
            fault=FaultSpec.from_dict(fault) if fault else None)


@dataclass(frozen=True, eq=False)
class PowerFlowSolution:
    """per-unit phasors of one solve

    Rows of voltages follow network.bus_order; row k of currents is the current on the
    line feeding bus k (the source row stays zero).
    """
    network: FeederNetwork
    voltages: np.ndarray
    currents: np.ndarray
    energized: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float

    def bus_voltage(self, bus_id: str) -> np.ndarray:
        return self.voltages[self.network.bus_index[bus_id]]

    def line_current(self, line_id: str) -> np.ndarray:
        line = self.network.line_by_id[line_id]
        return self.currents[self.network.bus_index[line.to_bus]]

    def to_dict(self) -> dict:
        def pairs(vec):
            return [[float(z.real), float(z.imag)] for z in vec]
        return {
            'feeder': self.network.name,
            'converged': bool(self.converged),
            'iterations': int(self.iterations),
            'max_mismatch': float(self.max_mismatch),
            'voltages': {b: pairs(self.bus_voltage(b)) for b in self.network.bus_order},
            'currents': {ln.id: pairs(self.line_current(ln.id)) for ln in self.network.lines}}

    def to_frame(self) -> tuple:
        """voltage and current tables in magnitude / angle (degrees) form

        Returns:
            tuple: (bus voltage dataframe, line current dataframe)
        """
        v_rows, i_rows = [], []
        for b in self.network.bus_order:
            v = self.bus_voltage(b)
            row = {'bus': b}
            for p, z in zip(PHASES, v):
                row[f'|V{p}| pu'] = abs(z)
                row[f'<V{p} deg'] = np.degrees(np.angle(z))
            v_rows.append(row)
        for ln in self.network.lines:
            i = self.line_current(ln.id)
            row = {'line': ln.id}
            for p, z in zip(PHASES, i):
                row[f'|I{p}| pu'] = abs(z)
                row[f'<I{p} deg'] = np.degrees(np.angle(z))
            i_rows.append(row)
        return pd.DataFrame(v_rows).set_index('bus'), pd.DataFrame(i_rows).set_index('line')


@dataclass(frozen=True)
class _NetworkArrays:
    parent: np.ndarray
    children: tuple
    z: np.ndarray
    mask: np.ndarray
    relay_bus: dict


@lru_cache(maxsize=32)
def _network_arrays(network: FeederNetwork) -> _NetworkArrays:
    n = len(network.bus_order)
    z_base = network.v_base ** 2 / S_BASE
    parent = np.full(n, -1)
    z = np.zeros((n, 3, 3), dtype=complex)
    mask = np.zeros((n, 3), dtype=bool)
    for k, bus_id in enumerate(network.bus_order):
        mask[k] = network.bus_by_id[bus_id].mask
        line = network.incoming_line.get(bus_id)
        if line is not None:
            parent[k] = network.bus_index[line.from_bus]
            z[k] = line.z_ohm / z_base
    children = tuple(
        tuple(network.bus_index[c] for c in network.children[b]) for b in network.bus_order)
    relay_bus = {r.id: network.bus_index[network.line_by_id[r.line].to_bus] for r in network.relays}
    return _NetworkArrays(parent=parent, children=children, z=z, mask=mask, relay_bus=relay_bus)


def bus_injections(network: FeederNetwork, cond: OperatingCondition) -> np.ndarray:
    """net constant-power consumption per bus and phase in per-unit (loads minus generation)

    Returns:
        np.ndarray: complex array of shape (n_bus, 3), rows in network.bus_order
    """
    s = np.zeros((len(network.bus_order), 3), dtype=complex)
    for ld in network.loads:
        mult = cond.global_multiplier * cond.load_multipliers.get(ld.id, 1.0)
        s[network.bus_index[ld.bus]] += ld.s_va * mult / S_BASE
    for g in (*network.generators, *cond.extra_generators):
        s[network.bus_index[g.bus]] -= g.s_va * cond.generator_outputs.get(g.id, 1.0) / S_BASE
    return s


def fault_admittance(network: FeederNetwork, fault: FaultSpec) -> np.ndarray:
    """3x3 per-unit shunt admittance of a fault

    SLG, LLG and 3PH faults connect each faulted phase to ground through the fault
    impedance; LL faults connect the two phases to each other.
    """
    y = (network.v_base ** 2 / S_BASE) / fault.impedance_ohm
    idx = [PHASE_INDEX[p] for p in fault.phases]
    out = np.zeros((3, 3), dtype=complex)
    if fault.fault_type == 'LL':
        p, q = idx
        out[p, p] += y
        out[q, q] += y
        out[p, q] -= y
        out[q, p] -= y
    else:
        for p in idx:
            out[p, p] += y
    return out


def injection_current(s0: np.ndarray, v: np.ndarray, v_min: float = V_MIN) -> np.ndarray:
    """current drawn by constant-power injections, reverting to constant impedance below v_min"""
    mag = np.abs(v)
    low = mag < v_min
    safe_v = np.where(low, 1.0, v)
    return np.where(low, np.conj(s0) * v / v_min ** 2, np.conj(s0 / safe_v))


def injection_power(s0: np.ndarray, v: np.ndarray, v_min: float = V_MIN) -> np.ndarray:
    mag = np.abs(v)
    return np.where(mag < v_min, s0 * (mag / v_min) ** 2, s0)


def energized_buses(network: FeederNetwork, breakers: dict) -> np.ndarray:
    arrays = _network_arrays(network)
    open_buses = {arrays.relay_bus[r] for r, closed in breakers.items() if not closed}
    energized = np.zeros(len(network.bus_order), dtype=bool)
    stack = [0]
    while stack:
        k = stack.pop()
        energized[k] = True
        stack.extend(c for c in arrays.children[k] if c not in open_buses)
    return energized


def solve(
        network: FeederNetwork,
        cond: OperatingCondition,
        tolerance: float = TOLERANCE,
        step_tolerance: float = STEP_TOLERANCE,
        max_iter: int = MAX_ITER,
        v_min: float = V_MIN) -> PowerFlowSolution:
    """solve the unbalanced power flow with a backward/forward sweep

    The backward pass reduces every energized subtree to an affine current law
    I = A V + b seen from its feeding line, which treats fault shunts exactly; the
    forward pass propagates voltages from the source. Constant-power injections are
    re-linearized at the latest voltages every iteration.

    Args:
        network (FeederNetwork): a validated network
        cond (OperatingCondition): loads, generation, breakers and fault for this step
        tolerance (float, optional): max complex power mismatch in per-unit. Defaults to 1e-8.
        step_tolerance (float, optional): max voltage update between iterations in per-unit. Defaults to 1e-10.
        max_iter (int, optional): iteration cap. Defaults to 100.
        v_min (float, optional): voltage below which injections become constant impedance. Defaults to 0.7.

    Raises:
        PowerFlowError: a branch reduction is singular

    Returns:
        PowerFlowSolution: phasors in per-unit; converged is False when the cap is reached
    """
    cond.validate_against(network)
    arrays = _network_arrays(network)
    n = len(network.bus_order)
    energized = energized_buses(network, cond.breakers)
    order = [k for k in range(1, n) if energized[k]]

    s0 = bus_injections(network, cond) * arrays.mask
    s0[0] = 0
    y_shunt = np.zeros((n, 3, 3), dtype=complex)
    if cond.fault is not None:
        k_fault = network.bus_index[cond.fault.bus]
        if energized[k_fault]:
            y_shunt[k_fault] = fault_admittance(network, cond.fault)

    v = np.zeros((n, 3), dtype=complex)
    v[0] = network.source.v / network.v_base * arrays.mask[0]
    for k in order:
        v[k] = v[0] * arrays.mask[k]
    i_line = np.zeros((n, 3), dtype=complex)
    a = np.zeros((n, 3, 3), dtype=complex)
    b = np.zeros((n, 3), dtype=complex)
    m = np.zeros((n, 3, 3), dtype=complex)
    eye = np.eye(3)
    work = np.zeros(n, dtype=bool)
    work[order] = True

    converged, mismatch, iteration = False, np.inf, 0
    for iteration in range(1, max_iter + 1):
        v_prev = v.copy()
        i_inj = injection_current(s0, v, v_min) * arrays.mask

        # * backward sweep: leaf to root
        for k in reversed(order):
            a[k] = y_shunt[k]
            b[k] = i_inj[k]
            for c in arrays.children[k]:
                if energized[c]:
                    a[k] += m[c] @ a[c]
                    b[k] += m[c] @ b[c]
            try:
                m[k] = np.linalg.inv(eye + a[k] @ arrays.z[k])
            except np.linalg.LinAlgError:
                raise PowerFlowError(f'singular branch reduction at bus {network.bus_order[k]}')

        # * forward sweep: root to leaf
        for k in order:
            p = arrays.parent[k]
            i_line[k] = m[k] @ (a[k] @ v[p] + b[k])
            v[k] = (v[p] - arrays.z[k] @ i_line[k]) * arrays.mask[k]

        if not np.all(np.isfinite(v)):
            break
        diff = np.abs(v * np.conj(i_inj) - injection_power(s0, v, v_min))[work]
        mismatch = float(diff.max()) if diff.size else 0.0
        # * both the power mismatch and the voltage update must settle
        step = float(np.abs(v - v_prev)[work].max()) if work.any() else 0.0
        if mismatch < tolerance and step < step_tolerance:
            converged = True
            break

    if not converged:
        logging.warning(
            f'power flow on {network.name} did not converge after {iteration} iterations '
            f'(mismatch {mismatch:.3e} pu)')
    return PowerFlowSolution(
        network=network,
        voltages=v,
        currents=i_line,
        energized=energized,
        converged=converged,
        iterations=iteration,
        max_mismatch=mismatch)


def sequence_components(x) -> np.ndarray:
    """transform phase phasors (A, B, C) into sequence phasors (zero, positive, negative)

    Args:
        x (array-like): three complex phase values, or an array whose last axis has length 3

    Returns:
        np.ndarray: sequence components along the last axis
    """
    return np.asarray(x, dtype=complex) @ SEQ_FROM_PHASE.T


def phase_components(x) -> np.ndarray:
    """inverse of sequence_components"""
    return np.asarray(x, dtype=complex) @ PHASE_FROM_SEQ.T


def measure(solution: PowerFlowSolution, relay_id: str) -> tuple:
    """local measurements of a relay

    Args:
        solution (PowerFlowSolution): a power flow solution
        relay_id (str): relay id

    Raises:
        KeyError: unknown relay id

    Returns:
        tuple: (voltage at the relay's upstream bus, current through the relay's branch)
    """
    line = solution.network.relay_line(relay_id)
    return solution.bus_voltage(line.from_bus).copy(), solution.line_current(line.id).copy()
