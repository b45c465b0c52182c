"""
File: relay_protection.py
How to run:
    From your command line:
    python relay_protection.py train --feeder ./content/feeders/feeder5.json --relays RA \
        --config ./keys/relay_config.json --seed 7 --out ./runs/feeder5_ra
    python relay_protection.py evaluate --feeder ./content/feeders/feeder5.json --relays RA \
        --weights ./runs/feeder5_ra --episodes 500 --seed 100000 --out ./runs/feeder5_ra/eval
    python relay_protection.py evaluate --feeder ./content/feeders/feeder5.json --relays RA \
        --weights ./runs/feeder5_ra --scenarios ./scenarios.jsonl --out ./runs/feeder5_ra/replay
    python relay_protection.py robustness --feeder ./content/feeders/feeder5.json --relays RA \
        --weights ./runs/feeder5_ra --out ./runs/feeder5_ra/robustness
    python relay_protection.py powerflow --feeder ./content/feeders/feeder13.json --condition ./condition.json
    python relay_protection.py generate-scenarios --feeder ./content/feeders/feeder5.json --episodes 100 \
        --out ./scenarios.jsonl
    python relay_protection.py aggregate-curves --curves ./runs/*/curve_RA.csv --out ./curve_RA_mean.csv
    (all parameters description can be found in the parser block below)
    evaluate and robustness exit with status 1 when any episode was aborted
"""

import argparse
import logging
import os
import sys

import pandas as pd

from functions.data_reader import load_run_config, read_json, save_frame, write_json, write_jsonl
from functions.dqn import TrainingFaultError
from functions.feeder import FeederConfigError, load_feeder
from functions.monte_carlo import MonteCarloSimulator, load_scenarios
from functions.nested_trainer import aggregate_curves, load_policies, train_all
from functions.power_flow import OperatingCondition, PowerFlowError, solve
from functions.relay_evaluator import (
    DISTURBANCE_CATEGORY, disturbance_table, evaluate, response_histogram, robustness_disturbance, robustness_peak)
from functions.relay_env import RelayEnv, ScenarioRejected

# * get arguments
common = argparse.ArgumentParser(add_help=False)
common.add_argument('--feeder', help='Feeder JSON document')
common.add_argument('--config', help='Run config JSON with env / agent / train / evaluate sections',
                    default='./keys/relay_config.json')
common.add_argument('--seed', help='Run seed (first seed for evaluation)', type=int, default=0)
common.add_argument('--out', help='Output directory or file')
common.add_argument('--episodes', help='Episode count, overrides the config', type=int, default=None)
common.add_argument('--mode', help='Observation input mode', choices=['phase', 'sequence'], default=None)
common.add_argument('--relays', help='Comma-separated relay subset, e.g. RA or RB,RC', default=None)
common.add_argument('--n-jobs', help='Parallel evaluation workers', type=int, default=None)
common.add_argument('--log', default='warning')

parser = argparse.ArgumentParser(description='Reinforcement-learning protective relays on radial feeders')
commands = parser.add_subparsers(dest='command', required=True)
commands.add_parser('train', parents=[common], help='Nested training in post-order')
p_eval = commands.add_parser('evaluate', parents=[common], help='Failure-rate report of trained relays')
p_eval.add_argument('--weights', help='Training output directory holding manifest.json')
p_eval.add_argument('--trace', help='If given, dump every episode step as JSON Lines to this file', default=None)
p_eval.add_argument('--scenarios', help='If given, replay the scenarios of this generate-scenarios file', default=None)
p_rob = commands.add_parser('robustness', parents=[common], help='Peak-load and disturbance sweeps')
p_rob.add_argument('--weights', help='Training output directory holding manifest.json')
p_rob.add_argument('--levels', help='Comma-separated peak increase levels in percent', default=None)
p_pf = commands.add_parser('powerflow', parents=[common], help='Solve one operating condition')
p_pf.add_argument('--condition', help='Operating condition JSON', default=None)
commands.add_parser('generate-scenarios', parents=[common], help='Write sampled scenarios as JSON Lines')
p_agg = commands.add_parser('aggregate-curves', parents=[common], help='Mean and std of learning curves')
p_agg.add_argument('--curves', help='Learning curve CSV files of repeated runs', nargs='+')

# * access arguments
args = parser.parse_args()
LOGGING_LEVEL = args.log

# * check logging config
log_level_mapping = {
    'debug': logging.DEBUG,
    'info': logging.INFO,
    'warning': logging.WARNING,
    'error': logging.ERROR,
    'critical': logging.CRITICAL
}
log_level = log_level_mapping[LOGGING_LEVEL.lower()]
logging.basicConfig(
    level=log_level,
    format='%(asctime)s - %(levelname)s - %(message)s')
VERBOSE = log_level <= logging.INFO


def load_inputs():
    config = load_run_config(args.config if args.config and os.path.exists(args.config) else None)
    config = config.override(input_mode=args.mode, n_jobs=args.n_jobs)
    network = load_feeder(args.feeder)
    if args.relays:
        network = network.with_relays(args.relays.split(','))
    logging.info(f'feeder {network.name}: {len(network.buses)} buses, relays {[r.id for r in network.relays]}')
    logging.info(f'input mode {config.env.input_mode}, seed {args.seed}')
    return network, config


def run_train():
    network, config = load_inputs()
    out = args.out or './runs/latest'
    run = train_all(network, config.env, config.train, args.seed, out_dir=out,
                    n_episodes=args.episodes, verbose=VERBOSE)
    print(f'trained {[u.label for u in run.order]} -> {out}')


def _policies(network, config):
    manifest = read_json(os.path.join(args.weights, 'manifest.json'))
    if manifest['status'] != 'complete':
        raise ValueError(f'training run in {args.weights} is {manifest["status"]}')
    policies = load_policies(manifest, args.weights)
    missing = [u.label for u in RelayEnv(network, config.env).units if u not in policies]
    if missing:
        raise ValueError(f'no trained weights for {missing}')
    return policies


def run_evaluate():
    network, config = load_inputs()
    policies = _policies(network, config)
    n = args.episodes or config.evaluate.episodes
    scenarios = load_scenarios(args.scenarios) if args.scenarios else None
    report = evaluate(policies, network, config.env, n, args.seed, n_jobs=config.evaluate.n_jobs,
                      trace_path=args.trace, verbose=VERBOSE, scenarios=scenarios)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        report.to_json(os.path.join(args.out, 'report.json'))
        with open(os.path.join(args.out, 'report.txt'), 'w') as f:
            f.write(report.to_text() + '\n')
        save_frame(report.categories, os.path.join(args.out, 'failure_table.csv'))
        save_frame(response_histogram(report), os.path.join(args.out, 'response_histogram.csv'))
    print(report.to_text())
    if not report.complete:
        logging.error(f'{len(report.aborted)} evaluation episodes aborted')
        sys.exit(1)


def run_robustness():
    network, config = load_inputs()
    policies = _policies(network, config)
    n = args.episodes or config.evaluate.episodes
    levels = [int(x) for x in args.levels.split(',')] if args.levels else config.evaluate.peak_levels
    peak = robustness_peak(policies, network, config.env, levels, n, args.seed, n_jobs=config.evaluate.n_jobs)
    reports = {kind: robustness_disturbance(policies, network, config.env, kind, n, args.seed,
                                            n_jobs=config.evaluate.n_jobs)
               for kind in DISTURBANCE_CATEGORY}
    disturbances = disturbance_table(reports)
    aborted = int(peak['aborted'].sum() + disturbances['aborted'].sum())
    if args.out:
        save_frame(peak, os.path.join(args.out, 'robustness_peak.csv'))
        save_frame(disturbances, os.path.join(args.out, 'robustness_disturbance.csv'))
    print('peak load increase')
    print(peak.to_string(index=False, float_format=lambda x: f'{x:.2f}'))
    print('\ndisturbances without fault')
    print(disturbances.to_string(index=False, float_format=lambda x: f'{x:.2f}'))
    if aborted:
        logging.error(f'{aborted} robustness episodes aborted')
        sys.exit(1)


def run_powerflow():
    network = load_feeder(args.feeder)
    cond = OperatingCondition.from_dict(read_json(args.condition)) if args.condition else OperatingCondition()
    solution = solve(network, cond)
    if args.out:
        write_json(solution.to_dict(), args.out)
    voltages, currents = solution.to_frame()
    with pd.option_context('display.float_format', lambda x: f'{x:.5f}'):
        print(f'converged {solution.converged} in {solution.iterations} iterations, '
              f'mismatch {solution.max_mismatch:.3e} pu')
        print(voltages.to_string())
        print(currents.to_string())
    if not solution.converged:
        raise PowerFlowError('power flow did not converge')


def run_generate_scenarios():
    network, config = load_inputs()
    n = args.episodes or config.evaluate.episodes
    sampler = MonteCarloSimulator(network, config.env)
    zones = RelayEnv(network, config.env).zones
    deactivatable = [r for r, z in zones.items() if z.upstream_relay is not None]
    scenarios = sampler.simulate(n, args.seed, deactivatable=deactivatable, to_pandas=False)
    write_jsonl([s.to_dict() for s in scenarios], args.out or './scenarios.jsonl')
    print(sampler.get_stat_values(sampler.summarize(scenarios)).to_string())


def run_aggregate_curves():
    table = aggregate_curves(args.curves)
    if args.out:
        save_frame(table, args.out)
    print(table.tail().to_string(index=False))


# * dispatch
handlers = {
    'train': run_train,
    'evaluate': run_evaluate,
    'robustness': run_robustness,
    'powerflow': run_powerflow,
    'generate-scenarios': run_generate_scenarios,
    'aggregate-curves': run_aggregate_curves}
try:
    handlers[args.command]()
except (TrainingFaultError, ScenarioRejected, PowerFlowError, FeederConfigError, ValueError, KeyError) as e:
    logging.error(f'{args.command} aborted: {e}')
    sys.exit(1)
