"""
Module: Data Reader
Description: run configuration loading and JSON / JSON Lines / CSV artifact IO
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace

import pandas as pd

SECTIONS = ('env', 'agent', 'train', 'evaluate')


@dataclass(frozen=True)
class EvaluateConfig:
    episodes: int = 500
    n_jobs: int = 1
    peak_levels: tuple = (5, 10, 15, 20)

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError('episodes must be positive')
        if any(level < 0 for level in self.peak_levels):
            raise ValueError('peak_levels must be non-negative percentages')
        object.__setattr__(self, 'peak_levels', tuple(self.peak_levels))


@dataclass(frozen=True)
class RunConfig:
    env: object
    train: object
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)

    def override(self, **kwargs) -> 'RunConfig':
        """replace fields by name in whichever section defines them; None values are skipped"""
        sections = {'env': self.env, 'train': self.train, 'evaluate': self.evaluate}
        for key, value in kwargs.items():
            if value is None:
                continue
            owner = next((s for s, cfg in sections.items() if key in {f.name for f in fields(cfg)}), None)
            if owner is None:
                raise KeyError(f'unknown config field {key}')
            sections[owner] = replace(sections[owner], **{key: value})
        return RunConfig(**sections)


def config_hash(config) -> str:
    """SHA-256 of the canonical (sorted-key) JSON of a config dataclass or dict"""
    doc = asdict(config) if is_dataclass(config) else config
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def read_json(path: str) -> dict:
    with open(path, 'r') as f:
        return json.load(f)


def write_json(doc: dict, path: str) -> None:
    parent = os.path.dirname(path)
    if parent and not os.path.exists(parent):
        os.makedirs(parent)
    with open(path, 'w') as f:
        json.dump(doc, f, indent=2, sort_keys=True)


def read_jsonl(path: str) -> list:
    with open(path, 'r') as f:
        return [json.loads(line) for line in f if line.strip()]


def write_jsonl(docs, path: str) -> None:
    with open(path, 'w') as f:
        for doc in docs:
            f.write(json.dumps(doc) + '\n')


def save_frame(df: pd.DataFrame, path: str, index: bool = False) -> None:
    parent = os.path.dirname(path)
    if parent and not os.path.exists(parent):
        os.makedirs(parent)
    df.to_csv(path, index=index)
    logging.info(f'saved {df.shape[0]} rows to {path}')


def load_run_config(path: str = None) -> RunConfig:
    """load the JSON run config (sections env, agent, train, evaluate); missing sections take defaults

    Args:
        path (str, optional): config path. Defaults to None, i.e. all defaults.

    Raises:
        ValueError: unknown section or field, or a field out of range

    Returns:
        RunConfig: typed configuration
    """
    from functions.dqn import TrainConfig
    from functions.monte_carlo import EnvConfig

    doc = read_json(path) if path else {}
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ValueError(f'unknown config sections {sorted(unknown)}')

    def build(cls, section: dict):
        names = {f.name for f in fields(cls)}
        extra = set(section) - names
        if extra:
            raise ValueError(f'unknown {cls.__name__} fields {sorted(extra)}')
        return cls(**section)

    env = build(EnvConfig, doc.get('env', {}))
    agent = {**doc.get('agent', {}), **doc.get('train', {})}
    train = build(TrainConfig, agent)
    evaluate = build(EvaluateConfig, doc.get('evaluate', {}))
    return RunConfig(env=env, train=train, evaluate=evaluate)
