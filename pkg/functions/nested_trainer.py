"""
Module: Nested Trainer
Description: sequential training of relay agents in post-order, each against frozen
downstream policies and passive upstream relays, with learning curves and run manifests
"""

import datetime as dt
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from tqdm import tqdm

from functions.data_reader import read_json, write_json
from functions.dqn import DQNAgent, GreedyPolicy, NullPolicy, QNetwork, TrainConfig, TrainingFaultError
from functions.feeder import FeederNetwork
from functions.monte_carlo import EnvConfig, MonteCarloSimulator, scenario_seed
from functions.relay_env import REWARD_FALSE_TRIP, AgentKey, EpisodeAborted, RelayEnv, ScenarioRejected

TRAILING_WINDOW = 50
MAX_RESAMPLE = 20


@dataclass
class TrainingRun:
    network: FeederNetwork
    env_config: EnvConfig
    train_config: TrainConfig
    seed: int
    order: list
    n_episodes: int
    policies: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    phases: list = field(default_factory=list)
    status: str = 'running'

    def manifest(self, weight_paths: dict = None) -> dict:
        return {
            'feeder': self.network.name,
            'relays': [r.id for r in self.network.relays],
            'input_mode': self.env_config.input_mode,
            'order': [u.label for u in self.order],
            'seed': self.seed,
            'episodes_per_unit': self.n_episodes,
            'env_config_hash': self.env_config.config_hash(),
            'train_config_hash': self.train_config.config_hash(),
            'phases': self.phases,
            'weights': weight_paths or {},
            'status': self.status}


def phase_seed(seed: int, phase_index: int, episode: int) -> int:
    return int(np.random.SeedSequence([int(seed), phase_index, episode]).generate_state(1)[0])


def draw_episode(env: RelayEnv, sampler: MonteCarloSimulator, seed: int, deactivatable=(), disturbance: str = None):
    """sample a scenario and reset the environment, resampling rejected scenarios

    Returns:
        tuple: (scenario, observations)
    """
    for attempt in range(MAX_RESAMPLE):
        scenario = sampler.sample(scenario_seed(seed, attempt), deactivatable=deactivatable, disturbance=disturbance)
        try:
            return scenario, env.reset(scenario)
        except ScenarioRejected as e:
            logging.info(f'{e}, resampling')
    raise ScenarioRejected(seed, f'no convergent scenario after {MAX_RESAMPLE} attempts')


def _false_operation_curve(returns: list, false_ops: list) -> pd.DataFrame:
    curve = pd.DataFrame({
        'episode': np.arange(1, len(returns) + 1),
        'return': returns,
        'false_operation': np.asarray(false_ops, dtype=int)})
    curve['false_operations_trailing'] = curve['false_operation'].rolling(TRAILING_WINDOW, min_periods=1).sum().astype(int)
    return curve


def train_relay(
        network: FeederNetwork,
        env_config: EnvConfig,
        unit: AgentKey,
        frozen: dict,
        train_config: TrainConfig,
        n_episodes: int,
        seed: int,
        phase_index: int = 0,
        verbose: bool = False) -> tuple:
    """train one agent unit with every other unit frozen (already trained) or passive

    Args:
        network (FeederNetwork): feeder
        env_config (EnvConfig): environment settings
        unit (AgentKey): unit to train
        frozen (dict): AgentKey -> QNetwork of units trained earlier
        train_config (TrainConfig): DQN settings
        n_episodes (int): number of completed episodes
        seed (int): run seed
        phase_index (int, optional): position of the unit in the training order. Defaults to 0.
        verbose (bool, optional): show a progress bar. Defaults to False.

    Returns:
        tuple: (trained QNetwork, learning curve dataframe)
    """
    env = RelayEnv(network, env_config)
    sampler = MonteCarloSimulator(network, env_config)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), phase_index]))
    agent = DQNAgent(env_config.observation_size, train_config, rng, gamma=env_config.gamma)
    policies = {u: GreedyPolicy(frozen[u]) if u in frozen else NullPolicy() for u in env.units if u != unit}
    # * the primary-failure coin is flipped for the relays this unit backs up
    deactivatable = env.zones[unit.relay].downstream_relays

    returns, false_ops = [], []
    episode, attempt_offset = 0, 0
    bar = tqdm(total=n_episodes, desc=unit.label, disable=not verbose)
    while episode < n_episodes:
        epsilon = train_config.epsilon(episode, n_episodes)
        ep_seed = phase_seed(seed, phase_index, episode + attempt_offset)
        scenario, obs = draw_episode(env, sampler, ep_seed, deactivatable=deactivatable)
        total, false_op, saw_fault, tripped = 0.0, False, False, False
        try:
            while not env.done:
                actions = {u: p(obs[u]) for u, p in policies.items()}
                actions[unit] = agent.act(obs[unit], epsilon)
                next_obs, rewards, _, info = env.step(actions)
                r = rewards[unit]
                terminal = info['terminal'][unit]
                agent.remember(obs[unit], actions[unit], r, next_obs[unit], terminal)
                agent.learn()
                total += r
                false_op |= r == REWARD_FALSE_TRIP
                saw_fault |= info['in_region'][unit] is not None
                tripped |= unit in info['opened']
                obs = next_obs
                if terminal:
                    break
        except EpisodeAborted as e:
            logging.warning(f'{e}, episode discarded')
            attempt_offset += 1
            continue
        returns.append(total)
        false_ops.append(false_op or (saw_fault and not tripped))
        episode += 1
        bar.update(1)
    bar.close()
    if not agent.online.all_finite():
        raise TrainingFaultError('non-finite weights after training', {'unit': unit.label})
    return agent.online.copy(), _false_operation_curve(returns, false_ops)


def train_all(
        network: FeederNetwork,
        env_config: EnvConfig,
        train_config: TrainConfig,
        seed: int,
        out_dir: str = None,
        n_episodes: int = None,
        verbose: bool = False) -> TrainingRun:
    """train every unit in post-order, freezing each before the next phase starts

    Writes one weights JSON and one curve CSV per unit plus manifest.json to out_dir.
    A failing phase aborts the run, keeping the partial manifest.

    Raises:
        TrainingFaultError: a unit produced non-finite weights
    """
    env = RelayEnv(network, env_config)
    order = list(env.units)
    if n_episodes is None:
        n_episodes = train_config.episodes_single if len(network.relays) == 1 else train_config.episodes_nested
    run = TrainingRun(network=network, env_config=env_config, train_config=train_config,
                      seed=seed, order=order, n_episodes=n_episodes)
    weight_paths = {}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    for phase_index, unit in enumerate(order):
        started = dt.datetime.now().isoformat()
        logging.info(f'training phase {phase_index + 1}/{len(order)}: {unit.label}')
        try:
            net, curve = train_relay(network, env_config, unit, run.policies, train_config,
                                     n_episodes, seed, phase_index=phase_index, verbose=verbose)
        except (TrainingFaultError, ScenarioRejected) as e:
            logging.error(f'training of {unit.label} aborted: {e}')
            run.status = 'aborted'
            run.phases.append({'unit': unit.label, 'started': started, 'finished': None, 'status': 'aborted'})
            if out_dir is not None:
                write_json(run.manifest(weight_paths), os.path.join(out_dir, 'manifest.json'))
            raise
        run.policies[unit] = net
        run.curves[unit.label] = curve
        run.phases.append({'unit': unit.label, 'started': started,
                           'finished': dt.datetime.now().isoformat(), 'status': 'done',
                           'weights_sha256': net.digest()})
        logging.info(f'{unit.label} done, final trailing false operations {int(curve["false_operations_trailing"].iloc[-1])}')
        if out_dir is not None:
            path = os.path.join(out_dir, f'{unit.label}.json')
            net.to_json(path, input_mode=env_config.input_mode, m=env_config.m, relay=unit.relay, phase=unit.phase)
            weight_paths[unit.label] = os.path.basename(path)
            learning_curve_export(run, out_dir, only=unit.label)

    run.status = 'complete'
    if out_dir is not None:
        write_json(run.manifest(weight_paths), os.path.join(out_dir, 'manifest.json'))
    return run


def learning_curve_export(run: TrainingRun, out_dir: str, only: str = None) -> list:
    """write curve_<unit>.csv per trained unit

    Returns:
        list: paths written
    """
    paths = []
    for label, curve in run.curves.items():
        if only is not None and label != only:
            continue
        path = os.path.join(out_dir, f'curve_{label}.csv')
        curve.to_csv(path, index=False)
        paths.append(path)
    return paths


def load_policies(manifest: dict, base_dir: str = '.') -> dict:
    """frozen networks of a finished run, keyed by AgentKey; weight paths are relative to base_dir"""
    policies = {}
    for path in manifest['weights'].values():
        doc = read_json(os.path.join(base_dir, path))
        policies[AgentKey(doc['relay'], doc.get('phase'))] = QNetwork.from_dict(doc)
    return policies


def aggregate_curves(curves: list) -> pd.DataFrame:
    """mean and standard deviation per episode across repeated runs

    Args:
        curves (list): learning curve dataframes (or CSV paths) of one unit over several seeds

    Returns:
        pd.DataFrame: per-episode mean/std of return and trailing false operations
    """
    frames = [pd.read_csv(c) if isinstance(c, str) else c for c in curves]
    stacked = pd.concat(frames, keys=range(len(frames)), names=['run'])
    grouped = stacked.groupby('episode')[['return', 'false_operations_trailing']]
    out = grouped.agg(['mean', 'std'])
    out.columns = [f'{col}_{stat}' for col, stat in out.columns]
    out['runs'] = len(frames)
    return out.reset_index()
