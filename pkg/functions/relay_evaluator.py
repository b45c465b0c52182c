"""
Module: Relay Evaluator
Description: episode classification, failure-rate reports, robustness sweeps and
response-time histograms for trained relay policies
"""

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from functions.dqn import GreedyPolicy, QNetwork
from functions.feeder import FeederNetwork
from functions.monte_carlo import EnvConfig, MonteCarloSimulator
from functions.nested_trainer import draw_episode
from functions.relay_env import EpisodeAborted, EpisodeTrace, RelayEnv, ScenarioRejected

SUCCESS = 'Success'
NO_FAULT_TRIP = 'No Fault / Trip'
REMOTE_TRIP = 'Remote Fault / Trip'
BACKUP_HOLD = 'Backup / Hold'
LAYOUTS = {
    'single_sequence': (NO_FAULT_TRIP, 'After Fault / Hold'),
    'single_phase': (NO_FAULT_TRIP, 'After Fault in Assigned Phase / Hold', 'After Fault in Other Phases / Trip'),
    'multi': (NO_FAULT_TRIP, 'Local Fault / Hold', REMOTE_TRIP, BACKUP_HOLD)}
DISTURBANCE_CATEGORY = {'loss_of_load': 'Loss of Load / Trip', 'loss_of_dg': 'Loss of DG / Trip'}
FALSE_TRIPS = ('false_trip_no_fault', 'false_trip_remote', 'false_trip_other_phase')
# * outcome precedence when an episode has several failing units
PRIORITY = ('false_trip_no_fault', 'missed', 'false_trip_remote', 'false_trip_other_phase', 'backup_failure')


def report_layout(network: FeederNetwork, input_mode: str) -> str:
    return 'multi' if len(network.relays) > 1 else f'single_{input_mode}'


def outcome_category(outcome: str, layout: str) -> str:
    missed = LAYOUTS[layout][1]
    other_phase = 'After Fault in Other Phases / Trip' if layout == 'single_phase' else REMOTE_TRIP
    return {
        'false_trip_no_fault': NO_FAULT_TRIP,
        'missed': missed,
        'false_trip_remote': REMOTE_TRIP,
        'false_trip_other_phase': other_phase,
        'backup_failure': BACKUP_HOLD}[outcome]


@dataclass
class EpisodeOutcome:
    seed: int
    category: str
    units: dict
    delays: list = field(default_factory=list)
    fault_type: str = None
    deactivated: tuple = ()

    @property
    def success(self) -> bool:
        return self.category == SUCCESS


def classify_unit(trace: EpisodeTrace, label: str, relay: str) -> str:
    """label one unit: correct, backup_success, missed, backup_failure or a false trip kind"""
    scenario = trace.scenario
    trip = trace.trip_step.get(label)
    if trip is not None:
        where = trace.steps[trip].in_region[label]
        if where == 'primary':
            return 'correct'
        if where == 'backup':
            return 'backup_success'
        if scenario.fault is None or trip < scenario.fault_onset:
            return 'false_trip_no_fault'
        if trace.steps[trip].regions[relay] is not None:
            return 'false_trip_other_phase'
        return 'false_trip_remote'
    if relay in trace.open_step:
        return 'correct'
    seen = {s.in_region[label] for s in trace.steps}
    if 'primary' in seen:
        return 'missed'
    if 'backup' in seen:
        return 'backup_failure'
    return 'correct'


def classify_episode(trace: EpisodeTrace, layout: str) -> EpisodeOutcome:
    """classify every unit of a finished episode and derive the episode category

    Raises:
        ValueError: the trace does not cover a full episode

    Returns:
        EpisodeOutcome: category, per-unit outcomes and response delays
    """
    if not trace.complete:
        raise ValueError(f'incomplete trace for scenario {trace.scenario.seed}')
    scenario = trace.scenario
    units = {u.label: classify_unit(trace, u.label, u.relay) for u in trace.units}

    category = SUCCESS
    if scenario.disturbance is not None and any(o in FALSE_TRIPS for o in units.values()):
        category = DISTURBANCE_CATEGORY[scenario.disturbance.kind]
    else:
        for outcome in PRIORITY:
            if outcome in units.values():
                category = outcome_category(outcome, layout)
                break

    delays = []
    if scenario.fault is not None:
        for relay, opened in trace.open_step.items():
            if opened - 1 < scenario.fault_onset:
                continue
            openers = [u for u in trace.units if u.relay == relay and trace.trip_step.get(u.label) == opened - 1]
            where = trace.steps[opened - 1].in_region[openers[0].label] if openers else None
            # * a countdown armed before onset is timed from its arming step
            start = scenario.fault_onset
            if openers:
                start = min(start, trace.armed_step.get(openers[0].label, start))
            delays.append({'relay': relay, 'role': where or 'false', 'steps': opened - start})
    return EpisodeOutcome(
        seed=scenario.seed,
        category=category,
        units=units,
        delays=delays,
        fault_type=scenario.fault.fault_type if scenario.fault else None,
        deactivated=tuple(sorted(scenario.deactivated)))


def tabulate(outcomes: list, layout: str, disturbance: str = None) -> pd.DataFrame:
    """category table: occurrences, total and probability in percent

    Layout rows always appear; other categories appear only when observed.
    """
    total = len(outcomes)
    counts = pd.Series([o.category for o in outcomes], dtype=object).value_counts()
    rows = list(LAYOUTS[layout])
    if disturbance is not None:
        rows.append(DISTURBANCE_CATEGORY[disturbance])
    rows.extend(c for c in counts.index if c not in rows and c != SUCCESS)
    rows.append(SUCCESS)
    table = pd.DataFrame({'category': rows, 'occurrences': [int(counts.get(c, 0)) for c in rows]})
    table['total'] = total
    table['probability'] = 100.0 * table['occurrences'] / total if total else np.nan
    return table


@dataclass
class EvaluationReport:
    layout: str
    categories: pd.DataFrame
    outcomes: list
    delays: pd.DataFrame
    aborted: list
    metadata: dict
    robustness: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return len(self.outcomes)

    @property
    def failures(self) -> int:
        return sum(not o.success for o in self.outcomes)

    @property
    def failure_rate(self) -> float:
        return self.failures / self.total if self.total else np.nan

    @property
    def complete(self) -> bool:
        """False when any episode was aborted by a non-convergent power flow"""
        return not self.aborted

    def to_dict(self) -> dict:
        return {
            'metadata': self.metadata,
            'layout': self.layout,
            'failure_rate': self.failure_rate,
            'categories': self.categories.to_dict(orient='records'),
            'response_histogram': response_histogram(self).to_dict(orient='records'),
            'aborted': self.aborted,
            'robustness': {k: v.to_dict(orient='records') for k, v in self.robustness.items()},
            'episodes': [{'seed': o.seed, 'category': o.category, 'units': o.units} for o in self.outcomes]}

    def to_json(self, path: str) -> None:
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True, default=lambda o: o.item() if hasattr(o, 'item') else str(o))

    def to_text(self) -> str:
        parts = [f'feeder {self.metadata.get("feeder")} | episodes {self.total} | aborted {len(self.aborted)}',
                 self.categories.to_string(index=False, float_format=lambda x: f'{x:.2f}'),
                 '', 'response delays']
        hist = response_histogram(self)
        parts.append(hist.to_string(index=False) if not hist.empty else '(no trips)')
        for name, table in self.robustness.items():
            parts.extend(['', name, table.to_string(index=False, float_format=lambda x: f'{x:.2f}')])
        return '\n'.join(parts)


def _as_policy(policy):
    return GreedyPolicy(policy) if isinstance(policy, QNetwork) else policy


def _run_episode(network, config, policies, seed, deactivatable, disturbance, layout, keep_trace, scenario=None):
    env = RelayEnv(network, config)
    sampler = MonteCarloSimulator(network, config)
    try:
        if scenario is None:
            scenario, _ = draw_episode(env, sampler, seed, deactivatable=deactivatable, disturbance=disturbance)
        trace = env.rollout(scenario, policies)
    except (EpisodeAborted, ScenarioRejected) as e:
        logging.warning(f'{e}, episode excluded')
        return {'seed': seed, 'aborted': str(e)}
    out = {'seed': seed, 'outcome': classify_episode(trace, layout)}
    if keep_trace:
        out['trace'] = [s.to_dict() for s in trace.steps]
    return out


def evaluate(
        policies: dict,
        network: FeederNetwork,
        config: EnvConfig,
        n_episodes: int,
        seed: int,
        n_jobs: int = 1,
        disturbance: str = None,
        trace_path: str = None,
        verbose: bool = False,
        scenarios: list = None) -> EvaluationReport:
    """run n greedy episodes with seeds seed, seed + 1, ... and aggregate their outcomes

    Args:
        policies (dict): AgentKey -> QNetwork or callable(observation) -> action
        network (FeederNetwork): feeder
        config (EnvConfig): environment settings
        n_episodes (int): number of episodes
        seed (int): first seed
        n_jobs (int, optional): joblib workers; results are merged in seed order. Defaults to 1.
        disturbance (str, optional): run fault-free disturbance episodes of this kind. Defaults to None.
        trace_path (str, optional): write every step of every episode as JSON Lines. Defaults to None.
        verbose (bool, optional): show a progress bar. Defaults to False.
        scenarios (list, optional): replay these scenarios instead of sampling; n_episodes and seed are then
            ignored and scenarios that do not converge are reported as aborted. Defaults to None.

    Returns:
        EvaluationReport: failure table, delays and metadata
    """
    policies = {k: _as_policy(p) for k, p in policies.items()}
    layout = report_layout(network, config.input_mode)
    zones = RelayEnv(network, config).zones
    deactivatable = tuple(sorted(r for r, z in zones.items() if z.upstream_relay is not None))
    if scenarios is None:
        scenarios = [None] * n_episodes
        seeds = [seed + i for i in range(n_episodes)]
    else:
        seeds = [s.seed for s in scenarios]
    results = Parallel(n_jobs=n_jobs)(
        delayed(_run_episode)(network, config, policies, s, deactivatable, disturbance, layout, trace_path is not None,
                              scenario=sc)
        for s, sc in tqdm(list(zip(seeds, scenarios)), desc='evaluate', disable=not verbose))

    outcomes = [r['outcome'] for r in results if 'outcome' in r]
    aborted = [{'seed': r['seed'], 'reason': r['aborted']} for r in results if 'aborted' in r]
    if trace_path is not None:
        with open(trace_path, 'w') as f:
            for r in results:
                for step in r.get('trace', []):
                    f.write(json.dumps({'seed': r['seed'], **step}) + '\n')

    delays = pd.DataFrame(
        [{'seed': o.seed, **d} for o in outcomes for d in o.delays],
        columns=['seed', 'relay', 'role', 'steps'])
    metadata = {
        'feeder': network.name,
        'relays': [r.id for r in network.relays],
        'input_mode': config.input_mode,
        'env_config_hash': config.config_hash(),
        'seed_range': [min(seeds), max(seeds)] if seeds else [],
        'episodes': len(seeds),
        'fault_episodes': sum(o.fault_type is not None for o in outcomes),
        'step_seconds': config.step_seconds,
        'disturbance': disturbance}
    report = EvaluationReport(
        layout=layout,
        categories=tabulate(outcomes, layout, disturbance),
        outcomes=outcomes,
        delays=delays,
        aborted=aborted,
        metadata=metadata)
    logging.info(f'evaluated {len(outcomes)} episodes on {network.name}: failure rate {report.failure_rate:.2%}, '
                 f'{len(aborted)} aborted')
    return report


def robustness_peak(
        policies: dict,
        network: FeederNetwork,
        config: EnvConfig,
        levels=(5, 10, 15, 20),
        n_episodes: int = 500,
        seed: int = 0,
        n_jobs: int = 1) -> pd.DataFrame:
    """failure rate when the global load multiplier exceeds the training peak by up to L percent

    For level L the multiplier is drawn from (peak, peak * (1 + L / 100)]; L = 0 keeps
    the nominal range. Policies are not retrained.
    """
    peak = config.global_multiplier_range[1]
    rows = []
    for level in levels:
        cfg = config if level == 0 else replace(config, global_multiplier_range=(peak, peak * (1 + level / 100)))
        report = evaluate(policies, network, cfg, n_episodes, seed, n_jobs=n_jobs)
        rows.append({'level': level, 'failures': report.failures, 'total': report.total,
                     'failure_rate': 100.0 * report.failure_rate, 'aborted': len(report.aborted)})
    return pd.DataFrame(rows)


def robustness_disturbance(
        policies: dict,
        network: FeederNetwork,
        config: EnvConfig,
        kind: str,
        n_episodes: int = 500,
        seed: int = 0,
        n_jobs: int = 1) -> EvaluationReport:
    """fault-free episodes with a loss-of-load or loss-of-DG step; any trip is a failure"""
    return evaluate(policies, network, config, n_episodes, seed, n_jobs=n_jobs, disturbance=kind)


def disturbance_table(reports: dict) -> pd.DataFrame:
    """one row per disturbance kind: failures / total"""
    rows = [{'disturbance': DISTURBANCE_CATEGORY[k], 'failures': r.failures, 'total': r.total,
             'failure_rate': 100.0 * r.failure_rate, 'aborted': len(r.aborted)} for k, r in reports.items()]
    return pd.DataFrame(rows)


def response_histogram(report: EvaluationReport) -> pd.DataFrame:
    """breaker-opening delays after fault onset per relay and role, in steps and milliseconds"""
    columns = ['relay', 'role', 'steps', 'count', 'ms']
    if report.delays.empty:
        return pd.DataFrame(columns=columns)
    hist = report.delays.groupby(['relay', 'role', 'steps']).size().rename('count').reset_index()
    hist['ms'] = (hist['steps'] * report.metadata['step_seconds'] * 1000).round(6)
    return hist.sort_values(['relay', 'role', 'steps']).reset_index(drop=True)[columns]
