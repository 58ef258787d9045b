"""Dataset records, the JSON-lines file format, splits and synthetic tasks.

File format: UTF-8, one JSON object per line::

    {"id": "g0",
     "nodes": [[f0, f1, ...], ...],          # node feature rows
     "edges": [[i, j], [j, i], ...],         # both directions stored
     "edge_attr": [[d], ...] or null,        # aligned with "edges"
     "targets": {"kind": <target kind>, "value": ...},
     "meta": {"provenance": "synthetic" | "chili-format",
              "labels": {"crystal_system": 3, "space_group": 225}}}

Target kinds are ``graph_label`` (int), ``graph_vector`` (list of floats),
``node_labels`` (one int per node), ``node_vectors`` (one list per node) and
``edge_scalars`` (one float per stored edge). Unknown top-level fields are
ignored with a warning.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

from .errors import ConfigError, DataError
from .graph import Graph, validate_graph

RECORD_FIELDS = ("id", "nodes", "edges", "edge_attr", "targets", "meta")
PROVENANCE = ("synthetic", "chili-format")
N_CRYSTAL_SYSTEMS = 7
N_SPACE_GROUPS = 230
LABEL_LIMITS = {"crystal_system": N_CRYSTAL_SYSTEMS, "space_group": N_SPACE_GROUPS}


@dataclass(frozen=True)
class TaskSpec:
    name: str
    target_kind: str
    head: str
    loss: str
    metric: str

    @property
    def is_classification(self):
        return self.loss == "cross_entropy"


TASKS = {t.name: t for t in [
    # synthetic desk-scale tasks
    TaskSpec("node-class", "node_labels", "node_readout", "cross_entropy", "weighted_f1"),
    TaskSpec("graph-class", "graph_label", "graph_pool", "cross_entropy", "weighted_f1"),
    TaskSpec("edge-reg", "edge_scalars", "edge_dot", "mse", "mse"),
    TaskSpec("graph-reg", "graph_vector", "graph_pool", "mse", "mse"),
    TaskSpec("node-reg", "node_vectors", "node_readout", "mse", "mae"),
    # CHILI property-prediction tasks
    TaskSpec("atom-cls", "node_labels", "node_readout", "cross_entropy", "weighted_f1"),
    TaskSpec("crystal-system", "graph_label", "graph_pool", "cross_entropy", "weighted_f1"),
    TaskSpec("space-group", "graph_label", "graph_pool", "cross_entropy", "weighted_f1"),
    TaskSpec("saxs", "graph_vector", "graph_pool", "mse", "mse"),
    TaskSpec("xrd", "graph_vector", "graph_pool", "mse", "mse"),
    TaskSpec("xpdf", "graph_vector", "graph_pool", "mse", "mse"),
    TaskSpec("abs-pos", "node_vectors", "node_readout", "mse", "mae"),
    TaskSpec("edge-attr", "edge_scalars", "edge_dot", "mse", "mse"),
]}

SYNTH_TASKS = ("node-class", "graph-class", "edge-reg", "graph-reg", "node-reg")


def get_task(name):
    try:
        return TASKS[name]
    except KeyError:
        raise ConfigError(f"unknown task {name!r}; expected one of {sorted(TASKS)}") from None


@dataclass
class DatasetRecord:
    id: str
    graph: Graph
    labels: dict = field(default_factory=dict)
    provenance: str = "synthetic"

    def problems(self):
        out = list(validate_graph(self.graph))
        if self.graph.target_kind is None:
            out.append("record has no targets")
        for name, limit in LABEL_LIMITS.items():
            value = self.labels.get(name)
            if value is not None and not 0 <= int(value) < limit:
                out.append(f"{name} id {value} outside [0, {limit})")
        if self.provenance not in PROVENANCE:
            out.append(f"unknown provenance {self.provenance!r}")
        return out


# -- serialization ---------------------------------------------------------

def record_to_json(rec):
    g = rec.graph
    value = g.target
    if g.target_kind == "graph_label":
        value = int(value)
    elif value is not None:
        value = np.asarray(value).tolist()
    obj = {
        "id": rec.id,
        "nodes": g.x.tolist(),
        "edges": g.edges.tolist(),
        "edge_attr": None if g.edge_attr is None else g.edge_attr.tolist(),
        "targets": {"kind": g.target_kind, "value": value},
        "meta": {"provenance": rec.provenance, "labels": dict(rec.labels)},
    }
    return json.dumps(obj, separators=(",", ":"))


def record_from_json(obj, line=None):
    if not isinstance(obj, dict):
        raise DataError("record must be a JSON object", line=line)
    rid = obj.get("id")
    if rid is None:
        raise DataError("record has no id", line=line)
    rid = str(rid)
    unknown = sorted(set(obj) - set(RECORD_FIELDS))
    if unknown:
        warnings.warn(f"line {line}: record {rid!r} has unknown fields {unknown}; ignored", stacklevel=3)
    try:
        targets = obj.get("targets") or {}
        kind = targets.get("kind")
        value = targets.get("value")
        if kind in ("node_labels", "graph_label"):
            value = np.asarray(value, dtype=np.int64)
            value = int(value) if kind == "graph_label" else value
        elif value is not None:
            value = np.asarray(value, dtype=np.float64)
        nodes = np.asarray(obj["nodes"], dtype=np.float64)
        if nodes.ndim == 1 and nodes.size == 0:
            raise DataError("record has no nodes", line=line, record_id=rid)
        attr = obj.get("edge_attr")
        graph = Graph(
            x=nodes,
            edges=np.asarray(obj.get("edges") or [], dtype=np.int64),
            edge_attr=None if attr is None else np.asarray(attr, dtype=np.float64),
            target=value,
            target_kind=kind,
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"malformed record: {exc}", line=line, record_id=rid) from None
    meta = obj.get("meta") or {}
    labels = {k: int(v) for k, v in (meta.get("labels") or {}).items()}
    return DatasetRecord(rid, graph, labels, meta.get("provenance", "synthetic"))


def save_dataset(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(record_to_json(rec))
            fh.write("\n")


def load_dataset(path, format="jsonl"):
    """Read and validate every record; errors carry the line number or record id."""
    if format != "jsonl":
        raise ConfigError(f"unsupported dataset format {format!r}")
    records, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"invalid JSON: {exc.msg}", line=lineno) from None
            rec = record_from_json(obj, line=lineno)
            problems = rec.problems()
            if problems:
                raise DataError("; ".join(problems), line=lineno, record_id=rec.id)
            if rec.id in seen:
                raise DataError("duplicate record id", line=lineno, record_id=rec.id)
            seen.add(rec.id)
            records.append(rec)
    return records


def convert_chili(sample, task, record_id):
    """Map one CHILI graph (PyTorch-Geometric style dict) to a record.

    Expected keys: ``x`` (N x K node features), ``edge_index`` (2 x E, both
    directions), ``edge_attr`` (E x 1 bond distances), ``pos_abs`` (N x 3)
    and a ``y`` dict with ``crystal_system_number`` (1-7),
    ``space_group_number`` (1-230), ``saxs``, ``xrd``, ``xPDF`` and
    ``atomic_number`` (per node). Only the fields needed by ``task`` are
    read, plus the two crystallographic labels kept as metadata.
    """
    spec = get_task(task)
    y = sample.get("y", {})
    edges = np.asarray(sample["edge_index"], dtype=np.int64).T
    attr = sample.get("edge_attr")
    attr = None if attr is None else np.asarray(attr, dtype=np.float64).reshape(len(edges), -1)
    source = {
        "atom-cls": lambda: np.asarray(y["atomic_number"], dtype=np.int64),
        "crystal-system": lambda: int(y["crystal_system_number"]) - 1,
        "space-group": lambda: int(y["space_group_number"]) - 1,
        "saxs": lambda: np.asarray(y["saxs"], dtype=np.float64).reshape(-1),
        "xrd": lambda: np.asarray(y["xrd"], dtype=np.float64).reshape(-1),
        "xpdf": lambda: np.asarray(y["xPDF"], dtype=np.float64).reshape(-1),
        "abs-pos": lambda: np.asarray(sample["pos_abs"], dtype=np.float64),
        "edge-attr": lambda: attr[:, 0].copy(),
    }
    if task not in source:
        raise ConfigError(f"{task!r} is not a CHILI task")
    labels = {}
    if "crystal_system_number" in y:
        labels["crystal_system"] = int(y["crystal_system_number"]) - 1
    if "space_group_number" in y:
        labels["space_group"] = int(y["space_group_number"]) - 1
    graph = Graph(x=np.asarray(sample["x"], dtype=np.float64), edges=edges, edge_attr=attr,
                  target=source[task](), target_kind=spec.target_kind)
    return DatasetRecord(str(record_id), graph, labels, "chili-format")


# -- feature scaling -------------------------------------------------------

class FeatureScaler:
    """Per-feature min-max map onto [-1, 1], fitted on training records only.

    Columns that are constant on the training split map to -1.
    """

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)

    @classmethod
    def fit(cls, records):
        if not records:
            raise ConfigError("cannot fit a feature scaler on zero records")
        x = np.concatenate([r.graph.x for r in records])
        return cls(x.min(axis=0), x.max(axis=0))

    def transform_array(self, x):
        span = self.hi - self.lo
        safe = np.where(span > 0, span, 1.0)
        scaled = 2.0 * (x - self.lo) / safe - 1.0
        return np.where(span > 0, scaled, -1.0 + (x - self.lo))

    def transform(self, record):
        g = record.graph
        if g.x.shape[1] != self.lo.shape[0]:
            raise DataError(f"expected {self.lo.shape[0]} node features, got {g.x.shape[1]}",
                            record_id=record.id)
        new = Graph(x=self.transform_array(g.x), edges=g.edges, edge_attr=g.edge_attr,
                    target=g.target, target_kind=g.target_kind)
        return DatasetRecord(record.id, new, record.labels, record.provenance)

    def to_arrays(self):
        return {"scaler_lo": self.lo, "scaler_hi": self.hi}

    @classmethod
    def from_arrays(cls, arrays):
        return cls(arrays["scaler_lo"], arrays["scaler_hi"])


# -- splits ------------------------------------------------------------------

@dataclass
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1
    seed: int = 0
    stratify_key: str | None = None

    def __post_init__(self):
        fracs = (self.train, self.val, self.test)
        if any(f < 0 for f in fracs) or not math.isclose(sum(fracs), 1.0, abs_tol=1e-9):
            raise ConfigError(f"split fractions must be non-negative and sum to 1, got {fracs}")


def record_key(record, key):
    """Stratification key of a record: a label name, ``"target"`` or a callable."""
    if callable(key):
        return key(record)
    if key == "target":
        if record.graph.target_kind != "graph_label":
            raise ConfigError("stratifying on 'target' needs graph_label targets")
        return int(record.graph.target)
    try:
        return record.labels[key]
    except KeyError:
        raise ConfigError(f"record {record.id!r} has no label {key!r}") from None


def _round_matrix(quota):
    """Round a non-negative matrix with integer row/column sums entrywise to
    floor or ceil while keeping every row and column sum."""
    base = np.floor(quota + 1e-9).astype(np.int64)
    frac = quota - base
    row_need = np.rint(quota.sum(axis=1)).astype(np.int64) - base.sum(axis=1)
    col_need = np.rint(quota.sum(axis=0)).astype(np.int64) - base.sum(axis=0)
    if row_need.sum() == 0:
        return base
    n_rows, n_cols = quota.shape
    # source -> rows -> columns -> sink, unit capacity on fractional cells
    source, sink = n_rows + n_cols, n_rows + n_cols + 1
    cand = np.argwhere(frac > 1e-9)
    # larger remainders first so ties resolve toward the largest-remainder choice
    order = np.argsort(-frac[cand[:, 0], cand[:, 1]], kind="stable")
    cand = cand[order]
    u = np.concatenate([np.full(n_rows, source), cand[:, 0], n_rows + np.arange(n_cols)])
    v = np.concatenate([np.arange(n_rows), n_rows + cand[:, 1], np.full(n_cols, sink)])
    cap = np.concatenate([row_need, np.ones(len(cand), dtype=np.int64), col_need])
    size = n_rows + n_cols + 2
    graph = csr_matrix((cap.astype(np.int32), (u, v)), shape=(size, size))
    flow = maximum_flow(graph, source, sink).flow.tocoo()
    out = base.copy()
    for a, b, f in zip(flow.row, flow.col, flow.data):
        if f > 0 and a < n_rows and n_rows <= b < n_rows + n_cols:
            out[a, b - n_rows] += f
    return out


def split_sizes(n, spec):
    n_train = int(math.floor(spec.train * n + 1e-9))
    n_val = int(math.floor(spec.val * n + 1e-9))
    return n_train, n_val, n - n_train - n_val


def split_dataset(records, spec):
    """Return (train, val, test) index lists; sizes floor(0.8n), floor(0.1n), rest.

    With a stratification key, every class count in every split is within one
    record of its proportional share.
    """
    n = len(records)
    if n < 10:
        raise ConfigError(f"need at least 10 records to split, got {n}")
    sizes = split_sizes(n, spec)
    rng = np.random.default_rng(spec.seed)
    if spec.stratify_key is None:
        perm = rng.permutation(n)
        cuts = np.cumsum(sizes)[:-1]
        return tuple(sorted(part.tolist()) for part in np.split(perm, cuts))
    keys = [record_key(r, spec.stratify_key) for r in records]
    classes = sorted(set(keys), key=repr)
    members = {c: [] for c in classes}
    for i, k in enumerate(keys):
        members[k].append(i)
    counts = np.array([len(members[c]) for c in classes], dtype=np.float64)
    alloc = _round_matrix(counts[:, None] * np.array(sizes, dtype=np.float64)[None, :] / n)
    parts = ([], [], [])
    for c, row in zip(classes, alloc):
        idx = rng.permutation(members[c])
        start = 0
        for part, take in zip(parts, row):
            part.extend(idx[start:start + take].tolist())
            start += take
    return tuple(sorted(p) for p in parts)


def stratified_subsample(records, n_target, key, seed):
    """Subset of ``n_target`` records keeping per-class counts within one of
    their proportional share."""
    n = len(records)
    if n_target > n:
        raise ConfigError(f"cannot draw {n_target} records from a population of {n}")
    rng = np.random.default_rng(seed)
    keys = [record_key(r, key) for r in records]
    classes = sorted(set(keys), key=repr)
    members = {c: [] for c in classes}
    for i, k in enumerate(keys):
        members[k].append(i)
    counts = np.array([len(members[c]) for c in classes], dtype=np.float64)
    quota = counts * n_target / n
    alloc = _round_matrix(np.stack([quota, counts - quota], axis=1))[:, 0]
    chosen = []
    for c, take in zip(classes, alloc):
        chosen.extend(rng.permutation(members[c])[:take].tolist())
    return [records[i] for i in sorted(chosen)]


# -- synthetic tasks -----------------------------------------------------------

MOTIFS = ("path", "cycle", "star", "grid")
GRAPH_REG_DIM = 16
_MAX_DEGREE_BIN = 8


def _undirected(pairs):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        return pairs
    both = np.concatenate([pairs, pairs[:, ::-1]])
    both = np.unique(both, axis=0)
    return both[both[:, 0] != both[:, 1]]


def _random_graph(n, rng):
    """Random spanning tree plus a few extra edges: connected, varied degrees."""
    order = rng.permutation(n)
    pairs = [(order[i], order[rng.integers(0, i)]) for i in range(1, n)]
    extra = rng.integers(0, n // 3 + 1)
    for _ in range(extra):
        a, b = rng.choice(n, size=2, replace=False)
        pairs.append((a, b))
    return _undirected(pairs)


def _motif(kind, n):
    if kind == "path":
        return _undirected([(i, i + 1) for i in range(n - 1)]), n
    if kind == "cycle":
        return _undirected([(i, (i + 1) % n) for i in range(n)]), n
    if kind == "star":
        return _undirected([(0, i) for i in range(1, n)]), n
    rows = max(2, int(round(math.sqrt(n))))
    cols = max(2, int(round(n / rows)))
    pairs = []
    for r in range(rows):
        for c in range(cols):
            v = r * cols + c
            if c + 1 < cols:
                pairs.append((v, v + 1))
            if r + 1 < rows:
                pairs.append((v, v + cols))
    return _undirected(pairs), rows * cols


def _geometric(n, rng):
    radius = math.sqrt(5.0 / (math.pi * n))
    while True:
        pos = rng.random((n, 2))
        d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
        i, j = np.nonzero(np.triu(d < radius, 1))
        edges = _undirected(np.stack([i, j], axis=1))
        deg = np.bincount(edges[:, 0], minlength=n) if len(edges) else np.zeros(n)
        if np.all(deg > 0):
            return pos, edges


def _node_noise(n, rng, dims=2):
    return rng.uniform(-1.0, 1.0, size=(n, dims))


def degree_histogram_target(edges, n):
    deg = np.bincount(edges[:, 0], minlength=n) if len(edges) else np.zeros(n, dtype=np.int64)
    hist = np.bincount(np.minimum(deg, _MAX_DEGREE_BIN - 1), minlength=_MAX_DEGREE_BIN) / n
    j = np.arange(GRAPH_REG_DIM)[:, None]
    d = np.arange(_MAX_DEGREE_BIN)[None, :]
    return np.tanh((np.cos(math.pi * (j + 0.5) * d / GRAPH_REG_DIM) * hist[None, :]).sum(axis=1))


def synth_generate(task_kind, n_graphs, size_range=(8, 30), seed=0):
    """Desk-scale graphs whose targets follow exactly from their construction.

    node-class   labels = min(degree, 3) on random sparse graphs
    graph-class  label = motif id (path, cycle, star, grid)
    edge-reg     random geometric graphs, target = Euclidean edge length
    graph-reg    target = smooth length-16 function of the degree histogram
    node-reg     target = 2-D node coordinates
    """
    if task_kind not in SYNTH_TASKS:
        raise ConfigError(f"unknown synthetic task {task_kind!r}; expected one of {SYNTH_TASKS}")
    lo, hi = size_range
    if not 1 <= lo <= hi:
        raise ConfigError(f"invalid size range {size_range}")
    rng = np.random.default_rng(seed)
    records = []
    for gi in range(n_graphs):
        n = int(rng.integers(lo, hi + 1))
        labels = {}
        attr = None
        if task_kind == "node-class":
            edges = _random_graph(n, rng)
            deg = np.bincount(edges[:, 0], minlength=n)
            x = np.concatenate([deg[:, None].astype(np.float64), _node_noise(n, rng)], axis=1)
            target, kind = np.minimum(deg, 3), "node_labels"
        elif task_kind == "graph-class":
            label = int(rng.integers(0, len(MOTIFS)))
            edges, n = _motif(MOTIFS[label], max(n, 4))
            edges = rng.permutation(n)[edges]
            x = np.concatenate([np.ones((n, 1)), _node_noise(n, rng)], axis=1)
            target, kind = label, "graph_label"
        elif task_kind == "edge-reg":
            pos, edges = _geometric(n, rng)
            x = pos
            attr = np.linalg.norm(pos[edges[:, 0]] - pos[edges[:, 1]], axis=1)
            target, kind = attr.copy(), "edge_scalars"
            attr = attr[:, None]
        elif task_kind == "graph-reg":
            edges = _random_graph(n, rng)
            x = np.concatenate([np.ones((n, 1)), _node_noise(n, rng)], axis=1)
            target, kind = degree_histogram_target(edges, n), "graph_vector"
        else:
            pos, edges = _geometric(n, rng)
            x = np.concatenate([pos + rng.normal(0.0, 0.05, size=pos.shape), _node_noise(n, rng, 1)], axis=1)
            target, kind = pos, "node_vectors"
        graph = Graph(x=x, edges=edges, edge_attr=attr, target=target, target_kind=kind)
        records.append(DatasetRecord(f"{task_kind}-{seed}-{gi}", graph, labels, "synthetic"))
    return records


__all__ = [
    "DatasetRecord", "SplitSpec", "TaskSpec", "TASKS", "SYNTH_TASKS", "FeatureScaler",
    "get_task", "load_dataset", "save_dataset", "split_dataset", "stratified_subsample",
    "synth_generate", "convert_chili", "record_key", "split_sizes",
]
