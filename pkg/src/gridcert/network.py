"""Grid data model and parsers.

A :class:`PowerNetwork` is an immutable description of a lossless grid:
buses (generator, load, or infinite) and transmission lines with coupling
strengths a_kj = V_k * V_j * B_kj.  Two input formats are supported, a
small native table format and the numeric-matrix subset of MATPOWER-style
``.m`` case files.  ``normalize_network`` brings raw parsed data into the
canonical form expected by the state-space builder: zero-susceptance lines
dropped, parallel circuits merged, generators renumbered first, injections
balanced.
"""

from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import dataclass, field, replace

import networkx as nx
import numpy as np

GENERATOR = "generator"
LOAD = "load"
INFINITE = "infinite"

_BUS_KINDS = (GENERATOR, LOAD, INFINITE)


class NetworkError(ValueError):
    """Raised for malformed input data or broken network invariants."""


@dataclass(frozen=True)
class Bus:
    """A single bus.

    ``injection`` is the net active power P_k in per unit: mechanical input
    for generators, minus consumption for loads.  ``gen_output`` and
    ``load`` keep the two components separately when known (MATPOWER data),
    so that generation-scaling scenarios can be built later.  ``inertia``
    and ``damping`` are the dimensionless m_k and d_k; they may be absent
    on freshly parsed MATPOWER data and filled in by
    :func:`with_random_dynamics`.
    """

    id: int
    kind: str
    voltage: float
    inertia: float | None = None
    damping: float | None = None
    injection: float = 0.0
    gen_output: float = 0.0
    load: float = 0.0
    source_id: int | None = None

    def __post_init__(self):
        if self.kind not in _BUS_KINDS:
            raise NetworkError(f"bus {self.id}: unknown kind {self.kind!r}")
        if self.voltage <= 0:
            raise NetworkError(f"bus {self.id}: voltage must be positive")
        if self.kind == GENERATOR:
            if self.inertia is not None and self.inertia <= 0:
                raise NetworkError(f"bus {self.id}: inertia must be positive")
        if self.kind in (GENERATOR, LOAD):
            if self.damping is not None and self.damping <= 0:
                raise NetworkError(f"bus {self.id}: damping must be positive")
        if self.kind == INFINITE and (self.inertia is not None or self.damping is not None):
            raise NetworkError(f"bus {self.id}: infinite bus carries no dynamic parameters")

    @property
    def is_dynamic(self) -> bool:
        return self.kind != INFINITE


@dataclass(frozen=True)
class Line:
    """Transmission line between two buses, stored with from_bus < to_bus."""

    from_bus: int
    to_bus: int
    susceptance: float
    coupling: float = 0.0

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise NetworkError(f"line {self.from_bus}-{self.to_bus}: self-loop")

    @property
    def key(self) -> tuple[int, int]:
        return (self.from_bus, self.to_bus)


@dataclass(frozen=True)
class NormalizationReport:
    removed_zero: tuple[tuple[int, int], ...] = ()
    merged_parallel: tuple[tuple[int, int], ...] = ()
    injection_shift: float = 0.0
    renumbered: bool = False


@dataclass(frozen=True)
class PowerNetwork:
    """Immutable network: buses in storage order, lines in lexicographic order."""

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    normalization: NormalizationReport | None = None

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise NetworkError(f"duplicate bus id(s): {dup}")
        known = set(ids)
        for ln in self.lines:
            for end in (ln.from_bus, ln.to_bus):
                if end not in known:
                    raise NetworkError(f"line {ln.from_bus}-{ln.to_bus}: unknown endpoint {end}")

    # -- basic views ------------------------------------------------------

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return sum(1 for b in self.buses if b.kind == GENERATOR)

    @property
    def n_load(self) -> int:
        return sum(1 for b in self.buses if b.kind == LOAD)

    @property
    def n_dynamic(self) -> int:
        return self.n_gen + self.n_load

    @property
    def n_infinite(self) -> int:
        return self.n_buses - self.n_dynamic

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    def bus(self, bus_id: int) -> Bus:
        return self.buses[self.bus_index(bus_id)]

    def bus_index(self, bus_id: int) -> int:
        try:
            return self._index[bus_id]
        except AttributeError:
            object.__setattr__(self, "_index", {b.id: i for i, b in enumerate(self.buses)})
            return self._index[bus_id]

    @property
    def edge_keys(self) -> tuple[tuple[int, int], ...]:
        return tuple(ln.key for ln in self.lines)

    @property
    def zero_susceptance_lines(self) -> tuple[tuple[int, int], ...]:
        """Lines flagged at parse time because their susceptance is zero."""
        return tuple(ln.key for ln in self.lines if ln.susceptance == 0.0)

    @property
    def injections(self) -> np.ndarray:
        return np.array([b.injection for b in self.buses])

    def is_connected(self) -> bool:
        g = nx.Graph()
        g.add_nodes_from(b.id for b in self.buses)
        g.add_edges_from(ln.key for ln in self.lines if ln.susceptance != 0.0)
        return self.n_buses > 0 and nx.is_connected(g)

    def generators_first(self) -> bool:
        kinds = [b.kind for b in self.buses]
        order = {GENERATOR: 0, LOAD: 1, INFINITE: 2}
        return kinds == sorted(kinds, key=order.get)


def _couple(lines, bus_by_id) -> list[Line]:
    out = []
    for ln in lines:
        vk = bus_by_id[ln.from_bus].voltage
        vj = bus_by_id[ln.to_bus].voltage
        out.append(replace(ln, coupling=vk * vj * ln.susceptance))
    return out


def _make_network(buses, lines, normalization=None) -> PowerNetwork:
    bus_by_id = {b.id: b for b in buses}
    lines = _couple([Line(min(a, b_), max(a, b_), s) for (a, b_, s) in lines], bus_by_id)
    lines.sort(key=lambda ln: ln.key)
    net = PowerNetwork(tuple(buses), tuple(lines), normalization)
    if not net.is_connected():
        raise NetworkError("network graph is not connected")
    return net


# -- native format ---------------------------------------------------------
#
#   # comment lines and blank lines are ignored
#   [buses]
#   # id  kind       V     m     d     P
#   1     generator  1.0   0.1   0.15  0.1
#   2     infinite   1.0   -     -     0
#   [lines]
#   # from  to  B
#   1       2   0.2


def _opt_float(tok: str, what: str, lineno: int) -> float | None:
    if tok == "-":
        return None
    try:
        return float(tok)
    except ValueError:
        raise NetworkError(f"line {lineno}: bad {what} value {tok!r}") from None


def parse_network_native(text: str) -> PowerNetwork:
    """Parse the native table format into a PowerNetwork.

    Error messages carry the 1-based line number of the offending row.
    """
    buses: list[Bus] = []
    line_rows: list[tuple[int, int, float]] = []
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.split("#", 1)[0].strip()
        if not stripped:
            continue
        low = stripped.lower()
        if low == "[buses]":
            section = "buses"
            continue
        if low == "[lines]":
            section = "lines"
            continue
        if section is None:
            raise NetworkError(f"line {lineno}: data before any [buses]/[lines] section")
        toks = stripped.split()
        if section == "buses":
            if len(toks) != 6:
                raise NetworkError(f"line {lineno}: bus row needs 6 columns (id kind V m d P)")
            try:
                bus_id = int(toks[0])
            except ValueError:
                raise NetworkError(f"line {lineno}: bad bus id {toks[0]!r}") from None
            kind = toks[1].lower()
            if kind not in _BUS_KINDS:
                raise NetworkError(f"line {lineno}: unknown bus kind {toks[1]!r}")
            voltage = _opt_float(toks[2], "voltage", lineno)
            m = _opt_float(toks[3], "inertia", lineno)
            d = _opt_float(toks[4], "damping", lineno)
            p = _opt_float(toks[5], "injection", lineno)
            if voltage is None or voltage <= 0:
                raise NetworkError(f"line {lineno}: voltage must be a positive number")
            if kind == GENERATOR and (m is None or m <= 0):
                raise NetworkError(f"line {lineno}: generator needs inertia m > 0")
            if kind in (GENERATOR, LOAD) and (d is None or d <= 0):
                raise NetworkError(f"line {lineno}: bus needs damping d > 0")
            if kind == INFINITE:
                m = d = None
                p = 0.0
            p = 0.0 if p is None else p
            if any(b.id == bus_id for b in buses):
                raise NetworkError(f"line {lineno}: duplicate bus id {bus_id}")
            buses.append(Bus(bus_id, kind, voltage, m if kind == GENERATOR else None,
                             d, p, gen_output=max(p, 0.0) if kind == GENERATOR else 0.0,
                             load=max(-p, 0.0)))
        else:
            if len(toks) != 3:
                raise NetworkError(f"line {lineno}: line row needs 3 columns (from to B)")
            try:
                a, b_ = int(toks[0]), int(toks[1])
            except ValueError:
                raise NetworkError(f"line {lineno}: bad endpoint id") from None
            bsus = _opt_float(toks[2], "susceptance", lineno)
            if bsus is None or bsus <= 0:
                raise NetworkError(f"line {lineno}: susceptance must be positive")
            known = {b.id for b in buses}
            if a not in known or b_ not in known:
                missing = a if a not in known else b_
                raise NetworkError(f"line {lineno}: line references unknown bus {missing}")
            line_rows.append((a, b_, bsus))
    if not buses:
        raise NetworkError("no [buses] section found")
    if not line_rows:
        raise NetworkError("no [lines] section found")
    return _make_network(buses, line_rows)


# -- MATPOWER-style .m cases ------------------------------------------------

_MATRIX_RE = r"mpc\.%s\s*=\s*\[(.*?)\]\s*;"


def _matpower_matrix(text: str, name: str) -> np.ndarray:
    m = re.search(_MATRIX_RE % name, text, re.S)
    if m is None:
        raise NetworkError(f"missing mpc.{name} matrix")
    rows = []
    for lineno, raw in enumerate(m.group(1).splitlines(), start=1):
        stripped = raw.split("%", 1)[0].strip().rstrip(";").strip()
        if not stripped:
            continue
        try:
            rows.append([float(t) for t in stripped.split()])
        except ValueError:
            raise NetworkError(f"mpc.{name} row {lineno}: malformed matrix row") from None
    if not rows:
        raise NetworkError(f"mpc.{name}: empty matrix")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise NetworkError(f"mpc.{name}: ragged matrix rows")
    return np.array(rows)


def parse_matpower_case(text: str) -> PowerNetwork:
    """Parse the numeric-matrix subset of a MATPOWER-style case document.

    Only ``baseMVA``, ``bus``, ``gen`` and ``branch`` are read; every other
    statement is ignored.  A bus is a generator bus iff it appears in the
    gen table.  Branch series reactance x gives the line susceptance
    B_kj = 1/x; branches with x = 0 are retained with zero susceptance and
    flagged for :func:`normalize_network` to remove.  Out-of-service
    branches (status 0) are dropped.  Inertia/damping are not part of the
    format and are left unset.
    """
    m = re.search(r"mpc\.baseMVA\s*=\s*([0-9.eE+-]+)\s*;", text)
    if m is None:
        raise NetworkError("missing mpc.baseMVA")
    base = float(m.group(1))
    if base <= 0:
        raise NetworkError("baseMVA must be positive")
    bus_tab = _matpower_matrix(text, "bus")
    gen_tab = _matpower_matrix(text, "gen")
    branch_tab = _matpower_matrix(text, "branch")
    if bus_tab.shape[1] < 8:
        raise NetworkError("mpc.bus: need at least 8 columns")
    if branch_tab.shape[1] < 11:
        raise NetworkError("mpc.branch: need at least 11 columns (through status)")

    gen_mw: dict[int, float] = defaultdict(float)
    for row in gen_tab:
        gen_mw[int(row[0])] += float(row[1])

    buses = []
    for row in bus_tab:
        bid = int(row[0])
        pd = float(row[2]) / base
        pg = gen_mw.get(bid, 0.0) / base
        kind = GENERATOR if bid in gen_mw else LOAD
        buses.append(Bus(bid, kind, float(row[7]), injection=pg - pd,
                         gen_output=pg, load=pd, source_id=bid))

    lines = []
    for row in branch_tab:
        if int(row[10]) != 1:
            continue
        x = float(row[3])
        bsus = 1.0 / x if x != 0.0 else 0.0
        lines.append((int(row[0]), int(row[1]), bsus))

    # parallel circuits and zero-susceptance flags survive until normalization
    bus_by_id = {b.id: b for b in buses}
    coupled = _couple([Line(min(a, b_), max(a, b_), s) for (a, b_, s) in lines], bus_by_id)
    coupled.sort(key=lambda ln: ln.key)
    return PowerNetwork(tuple(buses), tuple(coupled))


# -- normalization ----------------------------------------------------------


def normalize_network(net: PowerNetwork, zero_sum_tol: float = 1e-9,
                      renumber: bool = True) -> PowerNetwork:
    """Canonicalize a parsed network.

    Zero-susceptance lines are removed, parallel circuits between the same
    bus pair are merged by summing susceptances, buses are reordered and
    (optionally) renumbered generators first, and, for networks without an
    infinite bus, injections are projected onto the zero-sum subspace by a
    uniform shift when the imbalance exceeds ``zero_sum_tol``.  The applied
    operations are reported in ``net.normalization``.  Idempotent.
    """
    removed = tuple(ln.key for ln in net.lines if ln.susceptance == 0.0)
    merged_b: dict[tuple[int, int], float] = defaultdict(float)
    counts: dict[tuple[int, int], int] = defaultdict(int)
    for ln in net.lines:
        if ln.susceptance == 0.0:
            continue
        merged_b[ln.key] += ln.susceptance
        counts[ln.key] += 1
    merged = tuple(sorted(k for k, c in counts.items() if c > 1))

    order = {GENERATOR: 0, LOAD: 1, INFINITE: 2}
    buses = sorted(net.buses, key=lambda b: (order[b.kind], b.id))

    shift = 0.0
    if not any(b.kind == INFINITE for b in buses):
        total = sum(b.injection for b in buses)
        if abs(total) > zero_sum_tol:
            shift = -total / len(buses)
            buses = [replace(b, injection=b.injection + shift) for b in buses]

    if renumber:
        id_map = {b.id: i + 1 for i, b in enumerate(buses)}
        buses = [replace(b, id=id_map[b.id],
                         source_id=b.source_id if b.source_id is not None else b.id)
                 for b in buses]
        line_rows = [(id_map[a], id_map[b_], s) for (a, b_), s in merged_b.items()]
    else:
        line_rows = [(a, b_, s) for (a, b_), s in merged_b.items()]

    report = NormalizationReport(removed_zero=removed, merged_parallel=merged,
                                 injection_shift=shift, renumbered=renumber)
    return _make_network(buses, line_rows, report)


# -- scenario helpers --------------------------------------------------------


def with_random_dynamics(net: PowerNetwork, seed: int,
                         inertia_range: tuple[float, float] = (2.0, 4.0),
                         damping_range: tuple[float, float] = (1.0, 2.0)) -> PowerNetwork:
    """Assign random m_i (generators) and d_i (all dynamic buses).

    Draw order is fixed for determinism: inertias for generator buses in
    storage order, then dampings for all dynamic buses in storage order.
    """
    rng = np.random.default_rng(seed)
    gens = [b for b in net.buses if b.kind == GENERATOR]
    dyn = [b for b in net.buses if b.is_dynamic]
    m = dict(zip((b.id for b in gens), rng.uniform(*inertia_range, len(gens))))
    d = dict(zip((b.id for b in dyn), rng.uniform(*damping_range, len(dyn))))
    buses = []
    for b in net.buses:
        if b.kind == GENERATOR:
            buses.append(replace(b, inertia=float(m[b.id]), damping=float(d[b.id])))
        elif b.kind == LOAD:
            buses.append(replace(b, damping=float(d[b.id])))
        else:
            buses.append(b)
    return PowerNetwork(tuple(buses), net.lines, net.normalization)


def scale_generation(net: PowerNetwork, bus_ids, factor: float,
                     rebalance: bool = False) -> PowerNetwork:
    """Scale the generation component of the given buses by ``factor``.

    New injections are factor * gen_output - load for the selected buses.
    With ``rebalance`` the resulting imbalance is spread uniformly over all
    dynamic buses (the synchronization margin itself is invariant to that
    shift, but equilibrium solving requires balance).
    """
    wanted = set(bus_ids)
    missing = wanted - {b.id for b in net.buses}
    if missing:
        raise NetworkError(f"unknown bus id(s): {sorted(missing)}")
    buses = []
    for b in net.buses:
        if b.id in wanted:
            buses.append(replace(b, injection=factor * b.gen_output - b.load,
                                 gen_output=factor * b.gen_output))
        else:
            buses.append(b)
    if rebalance and not any(b.kind == INFINITE for b in buses):
        total = sum(b.injection for b in buses)
        buses = [replace(b, injection=b.injection - total / len(buses)) for b in buses]
    return PowerNetwork(tuple(buses), net.lines, net.normalization)


def drop_line(net: PowerNetwork, key: tuple[int, int]) -> PowerNetwork:
    """Remove one line (for post-trip studies); raises if it would disconnect."""
    key = (min(key), max(key))
    if key not in {ln.key for ln in net.lines}:
        raise NetworkError(f"no line {key[0]}-{key[1]} in network")
    kept = tuple(ln for ln in net.lines if ln.key != key)
    out = PowerNetwork(net.buses, kept, net.normalization)
    if not out.is_connected():
        raise NetworkError(f"removing line {key[0]}-{key[1]} disconnects the network")
    return out
