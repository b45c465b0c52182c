import os

import numpy as np
import pytest

from functions.feeder import load_feeder

FEEDER_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'content', 'feeders')


def feeder_path(name: str) -> str:
    return os.path.join(FEEDER_DIR, f'{name}.json')


def balanced(magnitude: float = 1.0) -> list:
    """[re, im] pairs of a balanced positive-sequence triple"""
    a = np.exp(-2j * np.pi / 3)
    return [[float((magnitude * a ** k).real), float((magnitude * a ** k).imag)] for k in range(3)]


def diag_z(re: float, im: float, phases: str = 'ABC') -> list:
    return [[[re, im] if (i == j and 'ABC'[i] in phases) else [0.0, 0.0] for j in range(3)] for i in range(3)]


@pytest.fixture(scope='session')
def feeder2():
    return load_feeder(feeder_path('feeder2'))


@pytest.fixture(scope='session')
def feeder5():
    return load_feeder(feeder_path('feeder5'))


@pytest.fixture(scope='session')
def feeder13():
    return load_feeder(feeder_path('feeder13'))


@pytest.fixture
def y_feeder_doc():
    """source b1 -> b2, then two branches b2 -> b3 -> b4 and b2 -> b5, relays on L12, L23 and L25"""
    z = diag_z(0.3, 0.6)
    load = [[100000.0, 30000.0]] * 3
    return {
        'name': 'yfeeder',
        'buses': [{'id': b, 'v_ln': 7200.0, 'phases': 'ABC'} for b in ('b1', 'b2', 'b3', 'b4', 'b5')],
        'lines': [
            {'id': 'L12', 'from': 'b1', 'to': 'b2', 'z': z},
            {'id': 'L25', 'from': 'b2', 'to': 'b5', 'z': z},
            {'id': 'L23', 'from': 'b2', 'to': 'b3', 'z': z},
            {'id': 'L34', 'from': 'b3', 'to': 'b4', 'z': z}],
        'loads': [{'id': f'LD{b}', 'bus': b, 's': load} for b in ('b3', 'b4', 'b5')],
        'generators': [],
        'source': {'bus': 'b1', 'v': balanced(7200.0)},
        'relays': [{'id': 'RROOT', 'line': 'L12'}, {'id': 'RLEFT', 'line': 'L23'}, {'id': 'RRIGHT', 'line': 'L25'}]}
