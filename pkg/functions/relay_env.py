"""
Module: Relay Environment
Description: episodic environment for reinforcement-learning relays on a radial feeder:
countdown-timer actions, local measurement windows, rewards and episode traces
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from functions.feeder import FeederNetwork, Generator, protection_zones, training_order
from functions.monte_carlo import EnvConfig, EpisodeScenario
from functions.power_flow import OperatingCondition, PowerFlowError, measure, sequence_components, solve

RESET = 0
DECREMENT = 10
MAX_COUNT = 9
N_ACTIONS = 11

REWARD_TRIP = 100.0
REWARD_FALSE_TRIP = -120.0
REWARD_HOLD = 5.0
REWARD_MISS = -10.0


class ScenarioRejected(RuntimeError):
    def __init__(self, seed: int, message: str = 'pre-fault power flow did not converge') -> None:
        self.seed = seed
        super().__init__(f'scenario {seed}: {message}')


class EpisodeAborted(RuntimeError):
    def __init__(self, seed: int, step: int, message: str = 'power flow did not converge') -> None:
        self.seed = seed
        self.step = step
        super().__init__(f'scenario {seed}, step {step}: {message}')


@dataclass(frozen=True)
class AgentKey:
    """one learning unit: a relay in sequence mode, a (relay, phase) pair in phase mode"""
    relay: str
    phase: str = None

    @property
    def label(self) -> str:
        return self.relay if self.phase is None else f'{self.relay}_{self.phase}'


def agent_units(network: FeederNetwork, input_mode: str) -> list:
    """agent units in training order; phase mode expands each relay into its branch phases A -> B -> C"""
    units = []
    for relay in training_order(network):
        if input_mode == 'phase':
            units.extend(AgentKey(relay, p) for p in network.relay_phases(relay))
        else:
            units.append(AgentKey(relay))
    return units


@dataclass(frozen=True)
class RelayState:
    closed: bool = True
    # * None is the inactive counter
    counter: int = None
    deactivated: bool = False


def is_trip_attempt(state: RelayState, action: int) -> bool:
    """True when the action decrements an armed counter from 1, i.e. the relay tries to open its breaker"""
    return state.closed and action == DECREMENT and state.counter == 1


def apply_action(state: RelayState, action: int) -> RelayState:
    """countdown-timer transition

    0 resets the counter, 1..9 set it, 10 decrements it. Decrementing from 1 opens the
    breaker unless the relay is deactivated, in which case only the counter clears.
    Relays with an open breaker ignore every action.
    """
    if not 0 <= action < N_ACTIONS:
        raise ValueError(f'action must be in [0, {N_ACTIONS - 1}], got {action}')
    if not state.closed:
        return state
    if action == RESET:
        return RelayState(closed=True, counter=None, deactivated=state.deactivated)
    if action <= MAX_COUNT:
        return RelayState(closed=True, counter=int(action), deactivated=state.deactivated)
    if state.counter is None:
        return state
    if state.counter > 1:
        return RelayState(closed=True, counter=state.counter - 1, deactivated=state.deactivated)
    return RelayState(closed=state.deactivated, counter=None, deactivated=state.deactivated)


def reward(in_region: bool, opened: bool) -> float:
    if opened:
        return REWARD_TRIP if in_region else REWARD_FALSE_TRIP
    return REWARD_MISS if in_region else REWARD_HOLD


def _angle(z: np.ndarray) -> np.ndarray:
    a = np.angle(z)
    return np.where(a <= -np.pi, np.pi, a)


def relay_features(v: np.ndarray, i: np.ndarray, input_mode: str) -> np.ndarray:
    """one measurement block: 12 phase features or 6 sequence magnitudes

    Current magnitudes are log-compressed to log(1 + |I|), |I| in per-unit; voltages stay linear.
    """
    if input_mode == 'phase':
        return np.concatenate([np.abs(v), _angle(v), np.log1p(np.abs(i)), _angle(i)])
    return np.concatenate([np.abs(sequence_components(v)), np.log1p(np.abs(sequence_components(i)))])


@dataclass
class StepRecord:
    t: int
    actions: dict
    rewards: dict
    breakers: dict
    in_region: dict
    regions: dict
    attempts: list
    obs_hash: dict

    def to_dict(self) -> dict:
        return {'t': self.t, 'actions': self.actions, 'rewards': self.rewards, 'breakers': self.breakers,
                'in_region': self.in_region, 'regions': self.regions, 'attempts': self.attempts,
                'obs_hash': self.obs_hash}


@dataclass
class EpisodeTrace:
    scenario: EpisodeScenario
    units: tuple
    steps: list = field(default_factory=list)
    # * relay -> state index at which its breaker is first seen open
    open_step: dict = field(default_factory=dict)
    # * unit label -> step of its first counter set / first trip attempt
    first_set: dict = field(default_factory=dict)
    trip_step: dict = field(default_factory=dict)
    # * unit label -> step at which the countdown behind its first trip attempt was set
    armed_step: dict = field(default_factory=dict)
    complete: bool = False

    def to_jsonl(self) -> str:
        return '\n'.join(json.dumps(s.to_dict()) for s in self.steps)


class RelayEnv():
    """simulate one feeder for episodes of quasi-static steps

    State index t = 0 is the reset state. Actions chosen at t are applied, then the
    feeder advances to t + 1 and is re-solved; the fault is present in every state
    t >= onset. Power flow results are cached per (breakers, fault, disturbance) state.
    """

    def __init__(self, network: FeederNetwork, config: EnvConfig) -> None:
        self.network = network
        self.config = config
        self.zones = protection_zones(network)
        self.units = tuple(agent_units(network, config.input_mode))
        self.relays = tuple(dict.fromkeys(u.relay for u in self.units))
        self.scenario = None
        self.done = True

    # * scenario -> operating condition
    def _condition(self, t: int) -> OperatingCondition:
        s = self.scenario
        fault_on = s.fault is not None and t >= s.fault_onset
        event = s.disturbance if s.disturbance is not None and t >= s.disturbance.step else None
        multiplier = s.global_multiplier
        outputs = {}
        if event is not None and event.kind == 'loss_of_load':
            multiplier *= 1 - event.fraction
        if event is not None and event.kind == 'loss_of_dg':
            outputs = event.generator_outputs()
        return OperatingCondition(
            global_multiplier=multiplier,
            load_multipliers=s.load_multipliers,
            generator_outputs=outputs,
            extra_generators=self._generators,
            breakers=dict(self.breakers),
            fault=s.fault if fault_on else None)

    def _solve(self, t: int):
        s = self.scenario
        key = (tuple(sorted(self.breakers.items())),
               s.fault is not None and t >= s.fault_onset,
               s.disturbance is not None and t >= s.disturbance.step)
        if key not in self._cache:
            try:
                solution = solve(self.network, self._condition(t), v_min=self.config.v_min)
            except PowerFlowError as e:
                logging.warning(f'scenario {s.seed}: {e}')
                solution = None
            self._cache[key] = solution
        solution = self._cache[key]
        if solution is None or not solution.converged:
            if t == 0:
                raise ScenarioRejected(s.seed)
            raise EpisodeAborted(s.seed, t)
        return solution

    def _measure(self) -> None:
        for r in self.relays:
            v, i = measure(self.solution, r)
            block = relay_features(v, i, self.config.input_mode)
            if self.windows[r] is None:
                self.windows[r] = np.tile(block, (self.config.m, 1))
            else:
                self.windows[r] = np.vstack([self.windows[r][1:], block])

    def observation(self, unit: AgentKey) -> np.ndarray:
        state = self.states[unit]
        counter = 0.0 if state.counter is None else state.counter / MAX_COUNT
        return np.concatenate([self.windows[unit.relay].ravel(), [float(state.closed), counter]])

    def observe(self) -> dict:
        return {u: self.observation(u) for u in self.units}

    def reset(self, scenario: EpisodeScenario) -> dict:
        """start an episode: breakers closed, counters inactive, windows padded with the first measurement

        Raises:
            ScenarioRejected: the pre-fault power flow did not converge
        """
        self.scenario = scenario
        self._generators = tuple(Generator(id=d.id, bus=d.bus, s_va=d.s_va) for d in scenario.dg_placements)
        self._cache = {}
        self.t = 0
        self.breakers = {r: True for r in self.relays}
        self.states = {u: RelayState(deactivated=u.relay in scenario.deactivated) for u in self.units}
        self.first_attempt = {}
        self.windows = {r: None for r in self.relays}
        self.solution = self._solve(0)
        self._measure()
        self.done = False
        return self.observe()

    def region(self, relay: str) -> str:
        """where the active fault sits relative to a relay at the current state

        Returns:
            str: 'primary', 'backup' (downstream relay deactivated and already attempted) or None
        """
        s = self.scenario
        if s.fault is None or self.t < s.fault_onset:
            return None
        if not self.solution.energized[self.network.bus_index[s.fault.bus]]:
            return None
        zone = self.zones[relay]
        if s.fault.bus in zone.primary:
            return 'primary'
        for d in zone.downstream_relays:
            if (s.fault.bus in self.zones[d].primary and d in s.deactivated
                    and self.first_attempt.get(d, self.t) < self.t):
                return 'backup'
        return None

    def in_region(self, unit: AgentKey, regions: dict = None) -> str:
        where = regions[unit.relay] if regions is not None else self.region(unit.relay)
        if where is None:
            return None
        if unit.phase is not None and unit.phase not in self.scenario.fault.phases:
            return None
        return where

    def step(self, actions: dict) -> tuple:
        """apply one action per unit (missing units reset) and advance one step

        Raises:
            EpisodeAborted: the power flow of the next state did not converge

        Returns:
            tuple: (observations, rewards, done, info); info holds t, regions, in_region,
            opened units, trip attempts and the per-unit terminal flags
        """
        if self.done:
            raise RuntimeError('episode is over, call reset first')
        t = self.t
        regions = {r: self.region(r) for r in self.relays}
        in_region = {u: self.in_region(u, regions) for u in self.units}

        new_states, opened, attempts = {}, [], []
        for u in self.units:
            state = self.states[u]
            action = int(actions.get(u, RESET))
            if is_trip_attempt(state, action):
                attempts.append(u)
            new = apply_action(state, action)
            if state.closed and not new.closed:
                opened.append(u)
            new_states[u] = new
        for u in attempts:
            self.first_attempt.setdefault(u.relay, t)

        # * breakers are gang-operated
        opened_relays = {u.relay for u in opened}
        for u in self.units:
            if u.relay in opened_relays:
                new_states[u] = RelayState(closed=False, counter=None, deactivated=new_states[u].deactivated)
        rewards = {
            u: reward(in_region[u] is not None, u in opened) if self.states[u].closed else 0.0
            for u in self.units}
        terminal = {u: u.relay in opened_relays for u in self.units}

        for r in opened_relays:
            self.breakers[r] = False
        self.states = new_states
        self.t = t + 1
        self.solution = self._solve(self.t)
        self._measure()
        self.done = self.t >= self.config.episode_length
        logging.debug(f'scenario {self.scenario.seed} step {t}: global reward {sum(rewards.values())}')
        info = {'t': t, 'regions': regions, 'in_region': in_region, 'opened': opened,
                'attempts': attempts, 'terminal': terminal}
        return self.observe(), rewards, self.done, info

    def rollout(self, scenario: EpisodeScenario, policies: dict) -> EpisodeTrace:
        """run a full episode with fixed policies

        Args:
            scenario (EpisodeScenario): episode to play
            policies (dict): AgentKey -> callable(observation) -> action; missing units reset every step

        Returns:
            EpisodeTrace: per-step record of the episode
        """
        obs = self.reset(scenario)
        trace = EpisodeTrace(scenario=scenario, units=self.units)
        last_set = {}
        while not self.done:
            actions = {}
            for u in self.units:
                policy = policies.get(u)
                actions[u] = int(policy(obs[u])) if policy is not None and self.states[u].closed else RESET
                if 1 <= actions[u] <= MAX_COUNT and self.states[u].closed:
                    trace.first_set.setdefault(u.label, self.t)
                    last_set[u.label] = self.t
            hashes = {u.label: hashlib.sha1(obs[u].tobytes()).hexdigest()[:16] for u in self.units}
            next_obs, rewards, _, info = self.step(actions)
            for u in info['attempts']:
                trace.trip_step.setdefault(u.label, info['t'])
                trace.armed_step.setdefault(u.label, last_set.get(u.label, info['t']))
            for u in info['opened']:
                trace.open_step.setdefault(u.relay, info['t'] + 1)
            trace.steps.append(StepRecord(
                t=info['t'],
                actions={u.label: a for u, a in actions.items()},
                rewards={u.label: r for u, r in rewards.items()},
                breakers=dict(self.breakers),
                in_region={u.label: w for u, w in info['in_region'].items()},
                regions=dict(info['regions']),
                attempts=[u.label for u in info['attempts']],
                obs_hash=hashes))
            obs = next_obs
        trace.complete = True
        return trace
