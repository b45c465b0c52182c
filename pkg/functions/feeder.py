"""
Module: Feeder
Description: radial three-phase feeder data model, feeder document parsing,
protection zones and the post-order training order of relays
"""

import json
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

PHASES = ('A', 'B', 'C')
PHASE_INDEX = {p: i for i, p in enumerate(PHASES)}
REQUIRED_KEYS = ('buses', 'lines', 'loads', 'generators', 'source', 'relays')


class FeederConfigError(ValueError):
    """raised when a feeder document or network violates the data model

    Args:
        element_id (str): id of the offending element (bus, line, load, generator, relay or document key)
        message (str): description of the violation
    """

    def __init__(self, element_id: str, message: str) -> None:
        self.element_id = element_id
        super().__init__(f'{element_id}: {message}')


@dataclass(frozen=True)
class Bus:
    id: str
    v_ln: float
    phases: str

    @property
    def mask(self) -> np.ndarray:
        return np.array([p in self.phases for p in PHASES])


@dataclass(frozen=True, eq=False)
class Line:
    id: str
    from_bus: str
    to_bus: str
    # * series impedance in ohms, already scaled by length
    z_ohm: np.ndarray


@dataclass(frozen=True, eq=False)
class Load:
    id: str
    bus: str
    s_va: np.ndarray


@dataclass(frozen=True, eq=False)
class Generator:
    id: str
    bus: str
    s_va: np.ndarray


@dataclass(frozen=True, eq=False)
class Source:
    bus: str
    v: np.ndarray


@dataclass(frozen=True)
class Relay:
    id: str
    line: str


@dataclass(frozen=True)
class ProtectionZone:
    relay_id: str
    primary: frozenset
    backup: frozenset
    downstream_relays: tuple = ()
    upstream_relay: str = None


@dataclass(frozen=True, eq=False)
class FeederNetwork:
    """an immutable radial feeder

    Buses, lines, loads and generators are kept in document order; derived topology
    (bus order from the root, parents, children) is computed once and cached.
    """
    name: str
    buses: tuple
    lines: tuple
    loads: tuple
    generators: tuple
    source: Source
    relays: tuple

    # * topology helpers
    @cached_property
    def bus_by_id(self) -> dict:
        return {b.id: b for b in self.buses}

    @cached_property
    def line_by_id(self) -> dict:
        return {ln.id: ln for ln in self.lines}

    @cached_property
    def relay_by_id(self) -> dict:
        return {r.id: r for r in self.relays}

    @cached_property
    def incoming_line(self) -> dict:
        """map each non-source bus to the line feeding it"""
        return {ln.to_bus: ln for ln in self.lines}

    @cached_property
    def children(self) -> dict:
        kids = {b.id: [] for b in self.buses}
        for ln in self.lines:
            kids[ln.from_bus].append(ln.to_bus)
        # ? siblings are always visited by ascending bus id
        return {k: tuple(sorted(v)) for k, v in kids.items()}

    @cached_property
    def bus_order(self) -> tuple:
        """buses in breadth-first order from the source, every parent before its children"""
        order = [self.source.bus]
        i = 0
        while i < len(order):
            order.extend(self.children[order[i]])
            i += 1
        return tuple(order)

    @cached_property
    def bus_index(self) -> dict:
        return {b: i for i, b in enumerate(self.bus_order)}

    @cached_property
    def relay_on_line(self) -> dict:
        return {r.line: r.id for r in self.relays}

    @property
    def v_base(self) -> float:
        """line-to-neutral voltage base in volts, taken from the source bus"""
        return self.bus_by_id[self.source.bus].v_ln

    @property
    def non_source_buses(self) -> tuple:
        return tuple(b for b in self.bus_order if b != self.source.bus)

    def relay_line(self, relay_id: str) -> Line:
        if relay_id not in self.relay_by_id:
            raise KeyError(f'unknown relay {relay_id}')
        return self.line_by_id[self.relay_by_id[relay_id].line]

    def relay_phases(self, relay_id: str) -> str:
        """phases carried by the branch a relay monitors"""
        return self.bus_by_id[self.relay_line(relay_id).to_bus].phases

    def subtree(self, bus_id: str) -> frozenset:
        """a bus and every bus downstream of it"""
        out, stack = set(), [bus_id]
        while stack:
            b = stack.pop()
            out.add(b)
            stack.extend(self.children[b])
        return frozenset(out)

    def with_relays(self, relay_ids) -> 'FeederNetwork':
        """return a copy of the network that keeps only the given relays

        Args:
            relay_ids (iterable): relay ids to keep

        Returns:
            FeederNetwork: a network with the relay subset, zones recomputed
        """
        relay_ids = list(relay_ids)
        unknown = [r for r in relay_ids if r not in self.relay_by_id]
        if unknown:
            raise FeederConfigError(unknown[0], 'relay is not part of the feeder')
        kept = tuple(r for r in self.relays if r.id in set(relay_ids))
        return replace(self, relays=kept)


def _as_complex(value, element_id: str) -> complex:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise FeederConfigError(element_id, f'complex numbers must be [re, im], got {value!r}')
    try:
        return complex(float(value[0]), float(value[1]))
    except (TypeError, ValueError):
        raise FeederConfigError(element_id, f'non-numeric complex value {value!r}')


def _phase_vector(values, element_id: str) -> np.ndarray:
    if not isinstance(values, (list, tuple)) or len(values) != 3:
        raise FeederConfigError(element_id, 'per-phase values must be a list of three [re, im] pairs')
    return np.array([_as_complex(v, element_id) for v in values], dtype=complex)


def _impedance_matrix(rows, element_id: str) -> np.ndarray:
    if not isinstance(rows, (list, tuple)) or len(rows) != 3:
        raise FeederConfigError(element_id, 'impedance must be a 3x3 nested array')
    return np.array([_phase_vector(r, element_id) for r in rows], dtype=complex)


def _entry_id(entry, default: str) -> str:
    return str(entry.get('id', default)) if isinstance(entry, dict) else default


def _require(entry: dict, keys: tuple, element_id: str) -> None:
    if not isinstance(entry, dict):
        raise FeederConfigError(element_id, 'entry must be an object')
    missing = [k for k in keys if k not in entry]
    if missing:
        raise FeederConfigError(element_id, f'missing field(s) {", ".join(missing)}')


def _check_phases(vec: np.ndarray, bus: Bus, element_id: str) -> None:
    absent = [p for p, v in zip(PHASES, vec) if v != 0 and p not in bus.phases]
    if absent:
        raise FeederConfigError(
            element_id, f'phase(s) {"".join(absent)} not present at bus {bus.id}')


def parse_feeder(document) -> FeederNetwork:
    """parse and validate a feeder document

    Args:
        document (str | dict): JSON text or an already-decoded document with keys
            buses, lines, loads, generators, source and relays

    Raises:
        FeederConfigError: schema violation, non-tree topology, dangling bus reference,
            phase mismatch or singular line impedance (the error names the element id)

    Returns:
        FeederNetwork: a validated network
    """
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as e:
            raise FeederConfigError('document', f'invalid JSON ({e})')
    if not isinstance(document, dict):
        raise FeederConfigError('document', 'top level must be an object')
    missing = [k for k in REQUIRED_KEYS if k not in document]
    if missing:
        raise FeederConfigError('document', f'missing key(s) {", ".join(missing)}')

    # * buses
    buses = []
    for entry in document['buses']:
        _require(entry, ('id', 'v_ln', 'phases'), _entry_id(entry, 'bus'))
        phases = ''.join(p for p in PHASES if p in str(entry['phases']).upper())
        if not phases or len(phases) != len(str(entry['phases'])):
            raise FeederConfigError(entry['id'], f'invalid phase set {entry["phases"]!r}')
        if float(entry['v_ln']) <= 0:
            raise FeederConfigError(entry['id'], 'nominal voltage must be positive')
        buses.append(Bus(id=str(entry['id']), v_ln=float(entry['v_ln']), phases=phases))
    bus_by_id = {}
    for b in buses:
        if b.id in bus_by_id:
            raise FeederConfigError(b.id, 'duplicate bus id')
        bus_by_id[b.id] = b

    def bus_ref(bus_id, element_id):
        if bus_id not in bus_by_id:
            raise FeederConfigError(element_id, f'references unknown bus {bus_id}')
        return bus_by_id[bus_id]

    # * source
    source_doc = document['source']
    _require(source_doc, ('bus', 'v'), 'source')
    source_bus = bus_ref(str(source_doc['bus']), 'source')
    source = Source(bus=source_bus.id, v=_phase_vector(source_doc['v'], 'source'))
    _check_phases(source.v, source_bus, 'source')

    # * lines
    lines = []
    for entry in document['lines']:
        _require(entry, ('id', 'from', 'to', 'z'), _entry_id(entry, 'line'))
        line_id = str(entry['id'])
        from_bus = bus_ref(str(entry['from']), line_id)
        to_bus = bus_ref(str(entry['to']), line_id)
        length = float(entry.get('length', 1.0))
        if length <= 0:
            raise FeederConfigError(line_id, 'length must be positive')
        z = _impedance_matrix(entry['z'], line_id) * length
        # ? the branch carries exactly the phases of the bus it feeds
        if not set(to_bus.phases) <= set(from_bus.phases):
            raise FeederConfigError(line_id, f'bus {to_bus.id} has phases not present upstream at {from_bus.id}')
        idx = [PHASE_INDEX[p] for p in to_bus.phases]
        outside = np.ones((3, 3), dtype=bool)
        outside[np.ix_(idx, idx)] = False
        if np.any(z[outside] != 0):
            raise FeederConfigError(line_id, 'impedance has entries on phases the line does not carry')
        block = z[np.ix_(idx, idx)]
        if not np.all(np.isfinite(block)) or abs(np.linalg.det(block)) < 1e-18:
            raise FeederConfigError(line_id, 'singular or zero series impedance')
        lines.append(Line(id=line_id, from_bus=from_bus.id, to_bus=to_bus.id, z_ohm=z))
    if len({ln.id for ln in lines}) != len(lines):
        raise FeederConfigError('lines', 'duplicate line id')

    # * topology: tree rooted at the source
    if len(lines) != len(buses) - 1:
        raise FeederConfigError(
            'lines', f'non-tree topology: {len(lines)} lines for {len(buses)} buses')
    parents = {}
    for ln in lines:
        if ln.to_bus in parents or ln.to_bus == source.bus:
            raise FeederConfigError(ln.id, f'non-tree topology: bus {ln.to_bus} is fed twice')
        parents[ln.to_bus] = ln.from_bus
    reached, stack = {source.bus}, [source.bus]
    children = {}
    for ln in lines:
        children.setdefault(ln.from_bus, []).append(ln.to_bus)
    while stack:
        for c in children.get(stack.pop(), []):
            if c not in reached:
                reached.add(c)
                stack.append(c)
    unreached = sorted(set(bus_by_id) - reached)
    if unreached:
        raise FeederConfigError(unreached[0], 'non-tree topology: bus not reachable from the source')

    # * loads and generators
    def injections(key, cls):
        out = []
        for entry in document[key]:
            _require(entry, ('id', 'bus', 's'), _entry_id(entry, key))
            bus = bus_ref(str(entry['bus']), str(entry['id']))
            s = _phase_vector(entry['s'], str(entry['id']))
            _check_phases(s, bus, str(entry['id']))
            out.append(cls(id=str(entry['id']), bus=bus.id, s_va=s))
        return tuple(out)

    loads = injections('loads', Load)
    generators = injections('generators', Generator)

    # * relays
    line_ids = {ln.id for ln in lines}
    relays = []
    for entry in document['relays']:
        _require(entry, ('id', 'line'), _entry_id(entry, 'relay'))
        if str(entry['line']) not in line_ids:
            raise FeederConfigError(str(entry['id']), f'sits on unknown line {entry["line"]}')
        relays.append(Relay(id=str(entry['id']), line=str(entry['line'])))
    if len({r.id for r in relays}) != len(relays):
        raise FeederConfigError('relays', 'duplicate relay id')
    if len({r.line for r in relays}) != len(relays):
        raise FeederConfigError('relays', 'more than one relay on the same line')

    return FeederNetwork(
        name=str(document.get('name', 'feeder')),
        buses=tuple(buses),
        lines=tuple(lines),
        loads=loads,
        generators=generators,
        source=source,
        relays=tuple(relays))


def load_feeder(path: str) -> FeederNetwork:
    with open(path, 'r') as f:
        return parse_feeder(json.load(f))


def training_order(network: FeederNetwork) -> list:
    """relay ids in post-order depth-first traversal from the source bus

    Every relay appears after all relays in its downstream subtree; siblings are
    visited by ascending bus id.
    """
    order = []
    # * iterative post-order: (bus, expanded)
    stack = [(network.source.bus, False)]
    while stack:
        bus, expanded = stack.pop()
        if expanded:
            line = network.incoming_line.get(bus)
            if line is not None and line.id in network.relay_on_line:
                order.append(network.relay_on_line[line.id])
            continue
        stack.append((bus, True))
        for child in reversed(network.children[bus]):
            stack.append((child, False))
    return order


def protection_zones(network: FeederNetwork) -> dict:
    """compute the primary and backup zone of every relay

    A relay's primary zone holds the buses below its branch up to, but excluding,
    the subtrees of the next relays downstream. Its backup zone is the union of the
    primary zones of those immediate downstream relays.

    Returns:
        dict: relay id -> ProtectionZone
    """
    primary, downstream = {}, {}
    for relay in network.relays:
        start = network.line_by_id[relay.line].to_bus
        zone, below, stack = set(), [], [start]
        while stack:
            bus = stack.pop()
            zone.add(bus)
            for child in network.children[bus]:
                child_line = network.incoming_line[child]
                if child_line.id in network.relay_on_line:
                    below.append(network.relay_on_line[child_line.id])
                else:
                    stack.append(child)
        primary[relay.id] = frozenset(zone)
        downstream[relay.id] = tuple(sorted(below))

    upstream = {d: r for r, ds in downstream.items() for d in ds}
    zones = {}
    for relay in network.relays:
        backup = frozenset().union(*[primary[d] for d in downstream[relay.id]])
        zones[relay.id] = ProtectionZone(
            relay_id=relay.id,
            primary=primary[relay.id],
            backup=backup,
            downstream_relays=downstream[relay.id],
            upstream_relay=upstream.get(relay.id))
    return zones
