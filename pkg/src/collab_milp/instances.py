"""Seeded generators for the synthetic benchmark families and the .milp file format."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .milp import GE, LE, MilpInstance

FORMAT_VERSION = 1

FAMILIES = ("SetCovering", "MaxIndependentSet", "CombinatorialAuction", "CapacitatedFacilityLocation")


class InstanceFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# generators


def gen_set_covering(n_sets: int, n_elements: int, density: float = 0.05,
                     costs_range: tuple[int, int] = (1, 100), seed: int = 0) -> MilpInstance:
    """min sum c_s x_s  s.t. every element covered at least once, x binary.

    Rows are elements, columns are sets. Columns are redrawn until every
    element belongs to some set; at densities too low for that to settle,
    after ``50 * n_sets`` redraws each remaining element joins a random set.
    """
    if n_sets <= 0 or n_elements <= 0:
        raise ValueError("n_sets and n_elements must be positive")
    if not 0 < density <= 1:
        raise ValueError("density must be in (0, 1]")
    lo, hi = costs_range
    if lo <= 0 or hi < lo:
        raise ValueError("costs_range must be positive and ordered")
    rng = np.random.default_rng(seed)
    A = (rng.random((n_elements, n_sets)) < density).astype(float)
    for _ in range(50 * n_sets):
        uncovered = ~A.any(axis=1)
        if not uncovered.any():
            break
        j = int(rng.integers(n_sets))
        A[:, j] = (rng.random(n_elements) < density).astype(float)
    for e in np.flatnonzero(~A.any(axis=1)):
        A[e, int(rng.integers(n_sets))] = 1.0
    costs = rng.integers(lo, hi + 1, size=n_sets).astype(float)
    return MilpInstance(
        costs, A, [GE] * n_elements, np.ones(n_elements),
        integrality=range(n_sets), lb=np.zeros(n_sets), ub=np.ones(n_sets),
        name=f"setcover-{n_sets}x{n_elements}-s{seed}",
    )


def greedy_clique_cover(n_nodes: int, edges: list[tuple[int, int]]) -> list[list[int]]:
    """Cover every edge by a clique grown greedily from the first uncovered edge."""
    adj = [set() for _ in range(n_nodes)]
    for u, v in edges:
        adj[u].add(v)
        adj[v].add(u)
    covered = set()
    cliques = []
    for u, v in sorted(edges):
        if (u, v) in covered:
            continue
        clique = [u, v]
        common = adj[u] & adj[v]
        for w in sorted(common):
            if all(w in adj[k] for k in clique):
                clique.append(w)
        clique.sort()
        for a in range(len(clique)):
            for b in range(a + 1, len(clique)):
                covered.add((clique[a], clique[b]))
        cliques.append(clique)
    return cliques


def gen_mis(n_nodes: int, edge_prob: float = 0.05, seed: int = 0) -> MilpInstance:
    """Maximum independent set on an Erdos-Renyi graph, clique formulation."""
    if n_nodes <= 0:
        raise ValueError("n_nodes must be positive")
    if not 0 <= edge_prob <= 1:
        raise ValueError("edge_prob must be in [0, 1]")
    rng = np.random.default_rng(seed)
    draws = rng.random((n_nodes, n_nodes))
    edges = [(u, v) for u in range(n_nodes) for v in range(u + 1, n_nodes) if draws[u, v] < edge_prob]
    return mis_from_graph(n_nodes, edges, name=f"mis-{n_nodes}-p{edge_prob}-s{seed}")


def mis_from_graph(n_nodes: int, edges, name: str = "mis") -> MilpInstance:
    edges = [(min(u, v), max(u, v)) for u, v in edges]
    cliques = greedy_clique_cover(n_nodes, edges)
    A = np.zeros((len(cliques), n_nodes))
    for r, clique in enumerate(cliques):
        A[r, clique] = 1.0
    return MilpInstance.from_maximize(
        np.ones(n_nodes), A, [LE] * len(cliques), np.ones(len(cliques)),
        integrality=range(n_nodes), lb=np.zeros(n_nodes), ub=np.ones(n_nodes), name=name,
    )


def gen_comb_auction(n_items: int, n_bids: int, seed: int = 0) -> MilpInstance:
    """max sum p_j x_j  s.t. each item sold at most once, x binary.

    Bundle sizes are uniform on {2..5} (capped at n_items); price is bundle
    size times uniform(0.5, 1.5). Items left out of every bundle are swapped
    into a bundle whose items are all covered elsewhere, when one exists.
    """
    if n_items <= 0 or n_bids <= 0:
        raise ValueError("n_items and n_bids must be positive")
    rng = np.random.default_rng(seed)
    bundles = []
    for _ in range(n_bids):
        size = int(rng.integers(2, 6))
        size = min(size, n_items)
        bundles.append(sorted(int(i) for i in rng.choice(n_items, size=size, replace=False)))
    counts = np.zeros(n_items, dtype=int)
    for bnd in bundles:
        counts[bnd] += 1
    for item in range(n_items):
        if counts[item]:
            continue
        for bnd in bundles:
            donors = [k for k in bnd if counts[k] > 1]
            if donors:
                out = donors[0]
                bnd.remove(out)
                bnd.append(item)
                bnd.sort()
                counts[out] -= 1
                counts[item] += 1
                break
    sizes = np.array([len(b) for b in bundles], dtype=float)
    prices = sizes * rng.uniform(0.5, 1.5, size=n_bids)
    items = [i for i in range(n_items) if counts[i] > 0]
    A = np.zeros((len(items), n_bids))
    row_of = {item: r for r, item in enumerate(items)}
    for j, bnd in enumerate(bundles):
        for item in bnd:
            A[row_of[item], j] = 1.0
    return MilpInstance.from_maximize(
        prices, A, [LE] * len(items), np.ones(len(items)),
        integrality=range(n_bids), lb=np.zeros(n_bids), ub=np.ones(n_bids),
        name=f"cauction-{n_items}x{n_bids}-s{seed}",
    )


def gen_cfl(n_clients: int, n_facilities: int, seed: int = 0,
            capacity_ratio: float = 1.5) -> MilpInstance:
    """Capacitated facility location with binary openings y and continuous flows x.

    Variables are ordered y_0..y_{F-1} then x_ij row-major by facility.
    Points are uniform in the unit square; demands U[5, 35], capacities
    U[10, 160] rescaled so total capacity is at least ``capacity_ratio``
    times total demand; fixed costs U[100, 110] sqrt(s_i) + U[0, 90];
    transport cost c_ij = 10 * distance * d_j.
    """
    if n_clients <= 0 or n_facilities <= 0:
        raise ValueError("n_clients and n_facilities must be positive")
    rng = np.random.default_rng(seed)
    cpos = rng.random((n_clients, 2))
    fpos = rng.random((n_facilities, 2))
    demand = rng.uniform(5, 35, size=n_clients)
    cap = rng.uniform(10, 160, size=n_facilities)
    fixed = rng.uniform(100, 110, size=n_facilities) * np.sqrt(cap) + rng.uniform(0, 90, size=n_facilities)
    need = capacity_ratio * demand.sum()
    if cap.sum() < need:
        cap = cap * (need / cap.sum())
    dist = np.sqrt(((fpos[:, None, :] - cpos[None, :, :]) ** 2).sum(axis=2))
    trans = 10.0 * dist * demand[None, :]
    F, C = n_facilities, n_clients
    n = F + F * C
    c = np.concatenate([fixed, trans.ravel()])
    A = np.zeros((F + C, n))
    senses = []
    rhs = []
    for i in range(F):
        A[i, F + i * C: F + (i + 1) * C] = demand
        A[i, i] = -cap[i]
        senses.append(LE)
        rhs.append(0.0)
    for j in range(C):
        for i in range(F):
            A[F + j, F + i * C + j] = 1.0
        senses.append(GE)
        rhs.append(1.0)
    ub = np.concatenate([np.ones(F), np.full(F * C, np.inf)])
    return MilpInstance(
        c, A, senses, rhs, integrality=range(F), lb=np.zeros(n), ub=ub,
        name=f"cfl-{n_clients}x{n_facilities}-s{seed}",
    )


# ---------------------------------------------------------------------------
# generator specs



# Seeds of gen_rigged_cut whose root pool holds exactly two cuts and where any
# root cut set containing cut 0 at least halves the node count (root-only
# cutting, most-fractional branching) and lowers the virtual time.
RIGGED_SEEDS = (24, 211, 395)


def gen_rigged_cut(seed: int = 211) -> MilpInstance:
    """Small bounded knapsack-type integer program used as a learning-signal fixture.

    Only the seeds in RIGGED_SEEDS carry the "cut 0 halves the tree" property.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 9))
    m = int(rng.integers(2, 4))
    A = rng.integers(1, 12, (m, n)).astype(float)
    b = np.floor(A.sum(1) * rng.uniform(0.3, 0.6, m))
    c = -rng.integers(3, 20, n).astype(float)
    return MilpInstance(c, A, (LE,) * m, b, tuple(range(n)), np.zeros(n), np.full(n, 3.0),
                        name=f"rigged-{seed}")

PRESETS = {
    "desk": {
        "SetCovering": {"n_sets": 200, "n_elements": 100, "density": 0.05, "costs_range": [1, 100]},
        "MaxIndependentSet": {"n_nodes": 100, "edge_prob": 0.05},
        "CombinatorialAuction": {"n_items": 100, "n_bids": 200},
        "CapacitatedFacilityLocation": {"n_clients": 25, "n_facilities": 10},
    },
    "full": {
        "SetCovering": {"n_sets": 1000, "n_elements": 500, "density": 0.05, "costs_range": [1, 100]},
        "MaxIndependentSet": {"n_nodes": 500, "edge_prob": 0.01},
        "CombinatorialAuction": {"n_items": 100, "n_bids": 500},
        "CapacitatedFacilityLocation": {"n_clients": 100, "n_facilities": 100},
    },
}

_GENERATORS = {
    "SetCovering": (gen_set_covering, {"n_sets", "n_elements", "density", "costs_range"}),
    "MaxIndependentSet": (gen_mis, {"n_nodes", "edge_prob"}),
    "CombinatorialAuction": (gen_comb_auction, {"n_items", "n_bids"}),
    "CapacitatedFacilityLocation": (gen_cfl, {"n_clients", "n_facilities", "capacity_ratio"}),
}

_REQUIRED = {
    "SetCovering": {"n_sets", "n_elements"},
    "MaxIndependentSet": {"n_nodes"},
    "CombinatorialAuction": {"n_items", "n_bids"},
    "CapacitatedFacilityLocation": {"n_clients", "n_facilities"},
}


@dataclass(frozen=True)
class GeneratorSpec:
    family: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        validate_generator_params(self.family, self.params)

    def generate(self, seed: int | None = None) -> MilpInstance:
        fn, _ = _GENERATORS[self.family]
        kw = dict(self.params)
        if "costs_range" in kw:
            kw["costs_range"] = tuple(kw["costs_range"])
        return fn(**kw, seed=self.seed if seed is None else seed)


def validate_generator_params(family: str, params: dict) -> None:
    if family not in _GENERATORS:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
    allowed = _GENERATORS[family][1]
    extra = set(params) - allowed
    if extra:
        raise ValueError(f"unknown parameters for {family}: {sorted(extra)}")
    missing = _REQUIRED[family] - set(params)
    if missing:
        raise ValueError(f"missing parameters for {family}: {sorted(missing)}")
    for k, v in params.items():
        if k == "costs_range":
            if len(v) != 2 or v[0] <= 0 or v[1] < v[0]:
                raise ValueError("costs_range must be [lo, hi] with 0 < lo <= hi")
        elif k in ("density", "edge_prob"):
            if not 0 < v <= 1:
                raise ValueError(f"{k} must be in (0, 1]")
        elif not v > 0:
            raise ValueError(f"{k} must be positive")


# ---------------------------------------------------------------------------
# file format


def _bound(v: float):
    return None if math.isinf(v) else float(v)


def instance_to_dict(instance: MilpInstance) -> dict:
    rows = []
    for i in range(instance.n_cons):
        rows.append({
            "coeffs": [[j, v] for j, v in instance.row_entries(i)],
            "sense": instance.senses[i],
            "rhs": float(instance.rhs[i]),
        })
    return {
        "format_version": FORMAT_VERSION,
        "name": instance.name,
        "sense": "minimize",
        "objective": [float(v) for v in instance.objective],
        "rows": rows,
        "row_ids": list(instance.row_ids),
        "integrality": list(instance.integrality),
        "bounds": [[_bound(l), _bound(u)] for l, u in zip(instance.lb, instance.ub)],
    }


def instance_from_dict(doc: dict) -> MilpInstance:
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise InstanceFormatError("not an instance document")
    if doc["format_version"] != FORMAT_VERSION:
        raise InstanceFormatError(f"unsupported format_version {doc['format_version']!r}")
    if doc.get("sense", "minimize") != "minimize":
        raise InstanceFormatError("only minimize documents are supported")
    c = np.array(doc["objective"], dtype=float)
    n = c.shape[0]
    A = np.zeros((len(doc["rows"]), n))
    for i, row in enumerate(doc["rows"]):
        for j, v in row["coeffs"]:
            A[i, int(j)] = v
    bounds = doc["bounds"]
    lb = np.array([-np.inf if b[0] is None else b[0] for b in bounds], dtype=float)
    ub = np.array([np.inf if b[1] is None else b[1] for b in bounds], dtype=float)
    return MilpInstance(
        c, A, [r["sense"] for r in doc["rows"]], [r["rhs"] for r in doc["rows"]],
        integrality=doc["integrality"], lb=lb, ub=ub, name=doc.get("name", ""),
        row_ids=doc.get("row_ids"),
    )


def canonical_bytes(instance: MilpInstance) -> bytes:
    return json.dumps(instance_to_dict(instance), sort_keys=True, separators=(",", ":")).encode()


def instance_hash(instance: MilpInstance) -> str:
    return hashlib.sha256(canonical_bytes(instance)).hexdigest()


def write_instance(instance: MilpInstance, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(canonical_bytes(instance) + b"\n")


def read_instance(path) -> MilpInstance:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InstanceFormatError(f"{path}: {exc}") from exc
    return instance_from_dict(doc)


def read_split(directory) -> list[MilpInstance]:
    files = sorted(Path(directory).glob("*.milp"), key=lambda p: (len(p.stem), p.stem))
    return [read_instance(p) for p in files]
