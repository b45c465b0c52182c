"""
Module: Monte Carlo
Description: Monte Carlo sampling of randomized feeder episodes (loads, distributed
generation, faults, relay failures and disturbances)
"""

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import pandas as pd

from functions.data_reader import config_hash, read_jsonl
from functions.feeder import FeederNetwork
from functions.power_flow import FAULT_IMPEDANCE_RANGE, FAULT_PHASE_COUNT, FaultSpec

INPUT_MODES = ('phase', 'sequence')
DISTURBANCE_KINDS = ('loss_of_load', 'loss_of_dg')
DEFAULT_FAULT_WEIGHTS = {'SLG': 0.40, 'LL': 0.20, 'LLG': 0.25, '3PH': 0.15}


def _ordered(name: str, pair, lo=-math.inf, hi=math.inf) -> tuple:
    pair = tuple(pair)
    if len(pair) != 2 or not (lo <= pair[0] <= pair[1] <= hi):
        raise ValueError(f'{name} must be an ordered pair within [{lo}, {hi}], got {pair}')
    return pair


@dataclass(frozen=True)
class EnvConfig:
    m: int = 8
    episode_length: int = 50
    fault_window: tuple = (15, 35)
    input_mode: str = 'sequence'
    global_multiplier_range: tuple = (0.7, 1.3)
    load_multiplier_range: tuple = (0.9, 1.1)
    dg_count_range: tuple = (0, 3)
    dg_size_range: tuple = (0.5, 1.25)
    fault_type_weights: dict = field(default_factory=lambda: dict(DEFAULT_FAULT_WEIGHTS))
    fault_impedance_range: tuple = FAULT_IMPEDANCE_RANGE
    step_seconds: float = 0.002
    gamma: float = 0.99
    fault_probability: float = 1.0
    deactivation_probability: float = 0.5
    disturbance_range: tuple = (0.1, 0.4)
    v_min: float = 0.7

    def __post_init__(self):
        if not 1 <= self.m <= self.episode_length:
            raise ValueError(f'm must be in [1, episode_length], got {self.m}')
        t_lo, t_hi = _ordered('fault_window', self.fault_window)
        if not 0 < t_lo < t_hi < self.episode_length:
            raise ValueError(f'fault_window must satisfy 0 < t_lo < t_hi < episode_length, got {self.fault_window}')
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f'input_mode must be one of {INPUT_MODES}, got {self.input_mode}')
        _ordered('global_multiplier_range', self.global_multiplier_range, lo=0)
        _ordered('load_multiplier_range', self.load_multiplier_range, lo=0)
        _ordered('dg_count_range', self.dg_count_range, lo=0)
        _ordered('dg_size_range', self.dg_size_range, lo=0)
        _ordered('fault_impedance_range', self.fault_impedance_range, *FAULT_IMPEDANCE_RANGE)
        _ordered('disturbance_range', self.disturbance_range, lo=0, hi=1)
        weights = self.fault_type_weights
        if set(weights) - set(FAULT_PHASE_COUNT) or any(w <= 0 for w in weights.values()):
            raise ValueError(f'fault_type_weights must be positive weights over {list(FAULT_PHASE_COUNT)}')
        if abs(sum(weights.values()) - 1) > 1e-9:
            raise ValueError('fault_type_weights must sum to 1')
        for name in ('fault_probability', 'deactivation_probability'):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f'{name} must be in [0, 1]')
        if not 0 <= self.gamma < 1:
            raise ValueError('gamma must be in [0, 1)')
        if self.step_seconds <= 0 or self.v_min <= 0:
            raise ValueError('step_seconds and v_min must be positive')
        for name in ('fault_window', 'global_multiplier_range', 'load_multiplier_range', 'dg_count_range',
                     'dg_size_range', 'fault_impedance_range', 'disturbance_range'):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @property
    def features_per_step(self) -> int:
        return 12 if self.input_mode == 'phase' else 6

    @property
    def observation_size(self) -> int:
        return self.features_per_step * self.m + 2

    def config_hash(self) -> str:
        return config_hash(self)


@dataclass(frozen=True, eq=False)
class DGPlacement:
    id: str
    bus: str
    # * per-phase complex output in VA, unity power factor
    s_va: np.ndarray

    def to_dict(self) -> dict:
        return {'id': self.id, 'bus': self.bus, 's': [[float(z.real), float(z.imag)] for z in self.s_va]}

    @classmethod
    def from_dict(cls, doc: dict) -> 'DGPlacement':
        return cls(id=doc['id'], bus=doc['bus'], s_va=np.array([complex(*v) for v in doc['s']]))


@dataclass(frozen=True)
class Disturbance:
    """a fault-free load step-down or DG curtailment

    fraction is the share of total load (loss_of_load) or of total DG capacity (loss_of_dg) removed
    from step on; disconnected lists the generators whose output drops.
    """
    kind: str
    fraction: float
    step: int
    disconnected: tuple = ()

    def __post_init__(self):
        if self.kind not in DISTURBANCE_KINDS:
            raise ValueError(f'disturbance kind must be one of {DISTURBANCE_KINDS}, got {self.kind}')
        if not 0 <= self.fraction <= 1:
            raise ValueError(f'disturbance fraction must be in [0, 1], got {self.fraction}')

    def generator_outputs(self) -> dict:
        """output fraction per affected generator; every one loses the same share of its capacity"""
        if self.kind != 'loss_of_dg':
            return {}
        return {g: 1.0 - self.fraction for g in self.disconnected}

    def to_dict(self) -> dict:
        return {'kind': self.kind, 'fraction': self.fraction, 'step': self.step,
                'disconnected': list(self.disconnected)}

    @classmethod
    def from_dict(cls, doc: dict) -> 'Disturbance':
        return cls(kind=doc['kind'], fraction=float(doc['fraction']), step=int(doc['step']),
                   disconnected=tuple(doc.get('disconnected', ())))


@dataclass(frozen=True, eq=False)
class EpisodeScenario:
    seed: int
    global_multiplier: float
    load_multipliers: dict
    dg_placements: tuple
    fault: FaultSpec = None
    fault_onset: int = None
    deactivated: frozenset = frozenset()
    disturbance: Disturbance = None
    fault_bus_distribution: str = 'uniform'

    def to_dict(self) -> dict:
        return {
            'seed': int(self.seed),
            'global_multiplier': self.global_multiplier,
            'load_multipliers': dict(self.load_multipliers),
            'dg_placements': [d.to_dict() for d in self.dg_placements],
            'fault': self.fault.to_dict() if self.fault else None,
            'fault_onset': self.fault_onset,
            'deactivated': sorted(self.deactivated),
            'disturbance': self.disturbance.to_dict() if self.disturbance else None,
            'fault_bus_distribution': self.fault_bus_distribution}

    @classmethod
    def from_dict(cls, doc: dict) -> 'EpisodeScenario':
        return cls(
            seed=int(doc['seed']),
            global_multiplier=float(doc['global_multiplier']),
            load_multipliers={k: float(v) for k, v in doc['load_multipliers'].items()},
            dg_placements=tuple(DGPlacement.from_dict(d) for d in doc['dg_placements']),
            fault=FaultSpec.from_dict(doc['fault']) if doc.get('fault') else None,
            fault_onset=doc.get('fault_onset'),
            deactivated=frozenset(doc.get('deactivated', ())),
            disturbance=Disturbance.from_dict(doc['disturbance']) if doc.get('disturbance') else None,
            fault_bus_distribution=doc.get('fault_bus_distribution', 'uniform'))


def scenario_seed(seed: int, attempt: int) -> int:
    """seed of the attempt-th resample of a scenario; attempt 0 is the seed itself"""
    if attempt == 0:
        return int(seed)
    return int(np.random.SeedSequence([int(seed), attempt]).generate_state(1)[0])


def _draw_open_low(rng, lo: float, hi: float) -> float:
    # * uniform on (lo, hi]
    return hi - rng.random() * (hi - lo)


class MonteCarloSimulator():
    """draw randomized episodes for a feeder

    Every draw comes from a fresh generator seeded with the scenario seed, so a
    scenario is fully determined by (seed, config, network, deactivatable, disturbance kind).
    """

    def __init__(self, network: FeederNetwork, config: EnvConfig) -> None:
        self.network = network
        self.config = config
        self.load_buses = tuple(sorted({ld.bus for ld in network.loads}))

    def _bus_load(self, bus: str) -> np.ndarray:
        return sum((ld.s_va for ld in self.network.loads if ld.bus == bus), np.zeros(3, dtype=complex))

    def _fault_types(self, bus: str) -> tuple:
        n_phase = len(self.network.bus_by_id[bus].phases)
        return tuple(t for t in self.config.fault_type_weights if FAULT_PHASE_COUNT[t] <= n_phase)

    def _sample_dgs(self, rng, minimum: int = 0) -> tuple:
        lo, hi = self.config.dg_count_range
        count = int(rng.integers(max(lo, minimum), max(hi, minimum) + 1))
        count = min(count, len(self.load_buses))
        if count == 0:
            return ()
        buses = rng.choice(len(self.load_buses), size=count, replace=False)
        size_lo, size_hi = self.config.dg_size_range
        placements = []
        for i, b in enumerate(sorted(int(x) for x in buses)):
            bus = self.load_buses[b]
            fraction = rng.uniform(size_lo, size_hi)
            s = np.abs(self._bus_load(bus)) * fraction + 0j
            placements.append(DGPlacement(id=f'DG{i + 1}_{bus}', bus=bus, s_va=s))
        return tuple(placements)

    def _sample_fault(self, rng) -> tuple:
        buses = self.network.non_source_buses
        bus = buses[int(rng.integers(len(buses)))]
        types = self._fault_types(bus)
        weights = np.array([self.config.fault_type_weights[t] for t in types])
        fault_type = types[int(rng.choice(len(types), p=weights / weights.sum()))]
        phase_sets = list(combinations(self.network.bus_by_id[bus].phases, FAULT_PHASE_COUNT[fault_type]))
        phases = phase_sets[int(rng.integers(len(phase_sets)))]
        z_lo, z_hi = self.config.fault_impedance_range
        impedance = float(np.exp(rng.uniform(np.log(z_lo), np.log(z_hi))))
        impedance = min(max(impedance, z_lo), z_hi)
        t_lo, t_hi = self.config.fault_window
        onset = int(rng.integers(t_lo, t_hi + 1))
        return FaultSpec(bus=bus, fault_type=fault_type, phases=phases, impedance_ohm=impedance), onset

    def sample(self, seed: int, deactivatable=(), disturbance: str = None) -> EpisodeScenario:
        """draw one episode

        Args:
            seed (int): scenario seed
            deactivatable (iterable, optional): relays that flip the deactivation coin. Defaults to ().
            disturbance (str, optional): 'loss_of_load' or 'loss_of_dg' for a fault-free disturbance episode. Defaults to None.

        Returns:
            EpisodeScenario: the sampled scenario
        """
        if disturbance is not None and disturbance not in DISTURBANCE_KINDS:
            raise ValueError(f'disturbance must be one of {DISTURBANCE_KINDS}, got {disturbance}')
        cfg = self.config
        rng = np.random.default_rng(int(seed))
        global_multiplier = _draw_open_low(rng, *cfg.global_multiplier_range)
        load_multipliers = {ld.id: _draw_open_low(rng, *cfg.load_multiplier_range) for ld in self.network.loads}
        dgs = self._sample_dgs(rng, minimum=1 if disturbance == 'loss_of_dg' else 0)

        fault, onset, event = None, None, None
        if disturbance is None:
            if rng.random() < cfg.fault_probability:
                fault, onset = self._sample_fault(rng)
        else:
            fraction = rng.uniform(*cfg.disturbance_range)
            step = int(rng.integers(cfg.fault_window[0], cfg.fault_window[1] + 1))
            disconnected = tuple(g.id for g in dgs) if disturbance == 'loss_of_dg' else ()
            event = Disturbance(kind=disturbance, fraction=float(fraction), step=step, disconnected=disconnected)

        deactivated = frozenset(
            r for r in sorted(deactivatable) if rng.random() < cfg.deactivation_probability)
        return EpisodeScenario(
            seed=int(seed),
            global_multiplier=float(global_multiplier),
            load_multipliers=load_multipliers,
            dg_placements=dgs,
            fault=fault,
            fault_onset=onset,
            deactivated=deactivated,
            disturbance=event)

    def simulate(self, n_iteration: int, seed: int, deactivatable=(), to_pandas: bool = True):
        """draw n scenarios with seeds seed, seed + 1, ...

        Returns:
            pd.DataFrame | list: one row per scenario when to_pandas, else the scenarios
        """
        scenarios = [self.sample(seed + i, deactivatable=deactivatable) for i in range(n_iteration)]
        return self.summarize(scenarios) if to_pandas else scenarios

    def summarize(self, scenarios: list) -> pd.DataFrame:
        rows = []
        for s in scenarios:
            rows.append({
                'seed': s.seed,
                'global_multiplier': s.global_multiplier,
                'n_dg': len(s.dg_placements),
                'fault_bus': s.fault.bus if s.fault else None,
                'fault_type': s.fault.fault_type if s.fault else None,
                'fault_impedance_ohm': s.fault.impedance_ohm if s.fault else np.nan,
                'fault_onset': s.fault_onset,
                'n_deactivated': len(s.deactivated)})
        return pd.DataFrame(rows).set_index('seed')

    def get_stat_values(self, simulation: pd.DataFrame) -> pd.DataFrame:
        """empirical fault-type frequencies of a simulated batch next to the configured weights"""
        counts = simulation['fault_type'].value_counts()
        total = int(simulation['fault_type'].notna().sum())
        rows = [{'fault_type': t, 'weight': w, 'count': int(counts.get(t, 0)),
                 'frequency': counts.get(t, 0) / total if total else np.nan}
                for t, w in self.config.fault_type_weights.items()]
        return pd.DataFrame(rows).set_index('fault_type')


def generate_scenario(
        seed: int,
        config: EnvConfig,
        network: FeederNetwork,
        deactivatable=(),
        disturbance: str = None) -> EpisodeScenario:
    return MonteCarloSimulator(network, config).sample(seed, deactivatable=deactivatable, disturbance=disturbance)


def load_scenarios(path: str) -> list:
    """scenarios written one per line by generate-scenarios"""
    return [EpisodeScenario.from_dict(doc) for doc in read_jsonl(path)]
