"""Graph layers (MLP and KAN variants), hidden blocks, task heads and model assembly."""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import __version__
from .autodiff import (BatchNormParams, Tensor, batchnorm, concat, dropout, gather_rows,
                       matmul, rowwise_dot, segment_mean, segment_sum, silu, spmm)
from .errors import ConfigError, DimensionError
from .graph import neighbor_sum
from .kan import KanLayerParams, SplineGrid, kan_layer_forward, kan_param_count

MLP_KINDS = ("GCN", "GIN", "EdgeCNN")
KAN_KINDS = ("KAGCN", "KAGIN", "KAEdgeCNN")
LAYER_KINDS = MLP_KINDS + KAN_KINDS
HEADS = ("node_readout", "graph_pool", "edge_dot")
KAN_COUNTERPART = dict(zip(KAN_KINDS, MLP_KINDS))

# inclusive search ranges, also enforced on configs coming out of hpsearch
RANGES = {
    "num_layers": (1, 3),
    "hidden_dim": (16, 64),
    "dropout": (0.0, 0.5),
    "grid_size": (3, 5),
    "spline_order": (3, 5),
}


@dataclass
class ModelConfig:
    layer_kind: str
    in_dim: int
    out_dim: int
    head: str
    num_layers: int = 2
    hidden_dim: int = 32
    dropout: float = 0.0
    grid_size: int | None = None
    spline_order: int | None = None
    epsilon: float = 0.0

    @property
    def is_kan(self):
        return self.layer_kind in KAN_KINDS

    def validate(self, strict_ranges=False):
        if self.layer_kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.layer_kind!r}; expected one of {LAYER_KINDS}")
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}; expected one of {HEADS}")
        for name in ("in_dim", "out_dim", "num_layers", "hidden_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.is_kan:
            if self.grid_size is None or self.spline_order is None:
                raise ConfigError(f"{self.layer_kind} needs grid_size and spline_order")
            if self.grid_size < 1 or self.spline_order < 1:
                raise ConfigError("grid_size and spline_order must be positive")
        elif self.grid_size is not None or self.spline_order is not None:
            raise ConfigError(f"{self.layer_kind} takes no grid_size/spline_order")
        if strict_ranges:
            for name, (lo, hi) in RANGES.items():
                value = getattr(self, name)
                if value is None:
                    continue
                if not lo <= value <= hi:
                    raise ConfigError(f"{name}={value} outside the search range [{lo}, {hi}]")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class Linear:
    def __init__(self, weight, bias=None):
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, n_in, n_out, rng, bias=True):
        bound = 1.0 / math.sqrt(n_in)
        w = Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)), requires_grad=True)
        b = Tensor(rng.uniform(-bound, bound, size=n_out), requires_grad=True) if bias else None
        return cls(w, b)

    @property
    def n_in(self):
        return self.weight.shape[0]

    def __call__(self, x):
        out = matmul(x, self.weight)
        return out if self.bias is None else out + self.bias

    def parameters(self):
        params = [("weight", self.weight)]
        if self.bias is not None:
            params.append(("bias", self.bias))
        return params


class MLP:
    """linear -> SiLU -> linear."""

    def __init__(self, first, second):
        self.first = first
        self.second = second

    @classmethod
    def init(cls, n_in, width, n_out, rng):
        return cls(Linear.init(n_in, width, rng), Linear.init(width, n_out, rng))

    @property
    def n_in(self):
        return self.first.n_in

    def __call__(self, x):
        return self.second(silu(self.first(x)))

    def parameters(self):
        return ([("0." + n, t) for n, t in self.first.parameters()]
                + [("1." + n, t) for n, t in self.second.parameters()])


def _check_rows(g, H):
    if H.ndim != 2 or H.shape[0] != g.num_nodes:
        raise DimensionError(f"H has shape {H.shape} for a {g.num_nodes}-node graph")


def _check_in(name, expected, actual):
    if expected is not None and expected != actual:
        raise DimensionError(f"{name} expects input dim {expected}, got {actual}")


def gcn_aggregate(g, H):
    _check_rows(g, H)
    return spmm(g.gcn_operator(), H)


def gin_aggregate(g, H, epsilon=0.0):
    _check_rows(g, H)
    return neighbor_sum(g, H) + H * (1.0 + epsilon)


def edge_inputs(g, H):
    """concat(h_i, h_j - h_i) for every stored edge (i, j)."""
    _check_rows(g, H)
    hi = gather_rows(H, g.src)
    hj = gather_rows(H, g.dst)
    return concat([hi, hj - hi], axis=1)


def gcn_layer(g, H, W):
    if W.shape[0] != H.shape[1]:
        raise DimensionError(f"GCN weight {W.shape} does not accept {H.shape[1]} features")
    return matmul(gcn_aggregate(g, H), W)


def gin_layer(g, H, mlp, epsilon=0.0):
    _check_in("GIN mlp", getattr(mlp, "n_in", None), H.shape[1])
    return mlp(gin_aggregate(g, H, epsilon))


def edgecnn_layer(g, H, mlp):
    _check_in("EdgeCNN mlp", getattr(mlp, "n_in", None), 2 * H.shape[1])
    return segment_sum(mlp(edge_inputs(g, H)), g.src, g.num_nodes)


def kagcn_layer(g, H, phi):
    _check_in("KAGCN", phi.n_in, H.shape[1])
    return kan_layer_forward(gcn_aggregate(g, H), phi)


def kagin_layer(g, H, phi, epsilon=0.0):
    _check_in("KAGIN", phi.n_in, H.shape[1])
    return kan_layer_forward(gin_aggregate(g, H, epsilon), phi)


def kaedgecnn_layer(g, H, phi):
    _check_in("KAEdgeCNN", phi.n_in, 2 * H.shape[1])
    return segment_sum(kan_layer_forward(edge_inputs(g, H), phi), g.src, g.num_nodes)


def apply_layer(kind, g, H, conv, epsilon=0.0):
    if kind == "GCN":
        return gcn_layer(g, H, conv)
    if kind == "GIN":
        return gin_layer(g, H, conv, epsilon)
    if kind == "EdgeCNN":
        return edgecnn_layer(g, H, conv)
    if kind == "KAGCN":
        return kagcn_layer(g, H, conv)
    if kind == "KAGIN":
        return kagin_layer(g, H, conv, epsilon)
    if kind == "KAEdgeCNN":
        return kaedgecnn_layer(g, H, conv)
    raise ConfigError(f"unknown layer kind {kind!r}")


def hidden_block(kind, g, H, conv, norm=None, p=0.0, training=False, rng=None, epsilon=0.0):
    """One hidden block: convolution followed by the kind's staging.

    GCN-like: conv -> SiLU -> Dropout
    GIN-like: conv -> BatchNorm -> Dropout
    EdgeCNN-like: conv -> BatchNorm -> SiLU -> Dropout
    """
    if kind not in LAYER_KINDS:
        raise ConfigError(f"unknown layer kind {kind!r}")
    out = apply_layer(kind, g, H, conv, epsilon)
    base = KAN_COUNTERPART.get(kind, kind)
    if base in ("GIN", "EdgeCNN"):
        if norm is None:
            raise ConfigError(f"{kind} block needs batchnorm parameters")
        out = batchnorm(out, norm, training)
    if base in ("GCN", "EdgeCNN"):
        out = silu(out)
    return dropout(out, p, training, rng)


def apply_head(head_kind, H, g, head_params):
    if head_kind == "edge_dot":
        return rowwise_dot(gather_rows(H, g.src), gather_rows(H, g.dst))
    if head_kind == "graph_pool":
        H = segment_mean(H, g.node_graph, g.num_graphs)
    elif head_kind != "node_readout":
        raise ConfigError(f"unknown head {head_kind!r}")
    if isinstance(head_params, KanLayerParams):
        return kan_layer_forward(H, head_params)
    return head_params(H)


HEAD_TARGETS = {
    "node_readout": ("node_labels", "node_vectors"),
    "graph_pool": ("graph_label", "graph_vector"),
    "edge_dot": ("edge_scalars",),
}


def check_head_target(head, target_kind):
    if target_kind not in HEAD_TARGETS[head]:
        raise ConfigError(f"head {head!r} cannot predict {target_kind!r} targets")


class ModelParams:
    """All trainable tensors and batchnorm state of one model."""

    def __init__(self, config, convs, norms, head):
        self.config = config
        self.convs = convs
        self.norms = norms
        self.head = head

    def named_parameters(self):
        out = []
        for i, conv in enumerate(self.convs):
            if isinstance(conv, Tensor):
                out.append((f"conv{i}.weight", conv))
            else:
                out.extend((f"conv{i}.{n}", t) for n, t in conv.parameters())
        for i, norm in enumerate(self.norms):
            if norm is not None:
                out.append((f"norm{i}.scale", norm.scale))
                out.append((f"norm{i}.shift", norm.shift))
        if self.head is not None:
            out.extend((f"head.{n}", t) for n, t in self.head.parameters())
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def named_buffers(self):
        out = []
        for i, norm in enumerate(self.norms):
            if norm is not None:
                out.append((f"norm{i}.running_mean", norm.running_mean))
                out.append((f"norm{i}.running_var", norm.running_var))
        return out

    def num_parameters(self):
        return int(sum(t.size for t in self.parameters()))

    def state_dict(self):
        state = {n: t.data.copy() for n, t in self.named_parameters()}
        state.update({n: b.copy() for n, b in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        expected = {n for n, _ in self.named_parameters()} | {n for n, _ in self.named_buffers()}
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise ConfigError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in self.named_parameters():
            if state[name].shape != t.shape:
                raise DimensionError(f"{name}: checkpoint shape {state[name].shape} != model {t.shape}")
            t.data = np.array(state[name], dtype=np.float64)
        for i, norm in enumerate(self.norms):
            if norm is not None:
                norm.running_mean = np.array(state[f"norm{i}.running_mean"], dtype=np.float64)
                norm.running_var = np.array(state[f"norm{i}.running_var"], dtype=np.float64)

    def forward(self, g, training=False, rng=None):
        cfg = self.config
        H = Tensor(g.x)
        if H.shape[1] != cfg.in_dim:
            raise DimensionError(f"model expects {cfg.in_dim} node features, got {H.shape[1]}")
        for conv, norm in zip(self.convs, self.norms):
            H = hidden_block(cfg.layer_kind, g, H, conv, norm, cfg.dropout, training, rng, cfg.epsilon)
        return apply_head(cfg.head, H, g, self.head)

    __call__ = forward


def conv_input_dim(kind, d_in):
    return 2 * d_in if KAN_COUNTERPART.get(kind, kind) == "EdgeCNN" else d_in


def analytic_parameter_count(config):
    """Closed-form trainable parameter total for ``config``."""
    cfg = config
    d = cfg.hidden_dim
    total = 0
    for layer in range(cfg.num_layers):
        d_in = conv_input_dim(cfg.layer_kind, cfg.in_dim if layer == 0 else d)
        if cfg.is_kan:
            total += kan_param_count(d_in, d, cfg.grid_size, cfg.spline_order)
        elif cfg.layer_kind == "GCN":
            total += d_in * d
        else:
            total += d_in * d + d + d * d + d
        if KAN_COUNTERPART.get(cfg.layer_kind, cfg.layer_kind) != "GCN":
            total += 2 * d
    if cfg.head != "edge_dot":
        if cfg.is_kan:
            total += kan_param_count(d, cfg.out_dim, cfg.grid_size, cfg.spline_order)
        else:
            total += d * cfg.out_dim + cfg.out_dim
    return total


def build_model(config, rng):
    cfg = config.validate()
    convs, norms = [], []
    d = cfg.hidden_dim
    base = KAN_COUNTERPART.get(cfg.layer_kind, cfg.layer_kind)
    for layer in range(cfg.num_layers):
        d_in = conv_input_dim(cfg.layer_kind, cfg.in_dim if layer == 0 else d)
        if cfg.is_kan:
            convs.append(KanLayerParams.init(d_in, d, cfg.grid_size, cfg.spline_order, rng))
        elif cfg.layer_kind == "GCN":
            bound = math.sqrt(6.0 / (d_in + d))
            convs.append(Tensor(rng.uniform(-bound, bound, size=(d_in, d)), requires_grad=True))
        else:
            convs.append(MLP.init(d_in, d, d, rng))
        norms.append(BatchNormParams(d) if base != "GCN" else None)
    head = None
    if cfg.head != "edge_dot":
        if cfg.is_kan:
            head = KanLayerParams.init(d, cfg.out_dim, cfg.grid_size, cfg.spline_order, rng)
        else:
            head = Linear.init(d, cfg.out_dim, rng)
    return ModelParams(cfg, convs, norms, head)


CHECKPOINT_FORMAT = 1


def save_checkpoint(path, model, extras=None, meta=None):
    """Write config, parameters, batchnorm state and ``extras`` arrays to an .npz file."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": __version__,
        "config": model.config.to_dict(),
        "meta": meta or {},
    }
    arrays = {f"param/{n}": a for n, a in model.state_dict().items()}
    for name, value in (extras or {}).items():
        arrays[f"extra/{name}"] = np.asarray(value)
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Return ``(model, extras, meta)`` from a checkpoint written by :func:`save_checkpoint`."""
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"unsupported checkpoint format {header.get('format')!r}")
        state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
        extras = {k[len("extra/"):]: z[k] for k in z.files if k.startswith("extra/")}
    config = ModelConfig.from_dict(header["config"])
    model = build_model(config, np.random.default_rng(0))
    model.load_state_dict(state)
    return model, extras, header.get("meta", {})


__all__ = [
    "ModelConfig", "ModelParams", "Linear", "MLP", "SplineGrid", "LAYER_KINDS", "KAN_KINDS",
    "MLP_KINDS", "HEADS", "gcn_layer", "gin_layer", "edgecnn_layer", "kagcn_layer",
    "kagin_layer", "kaedgecnn_layer", "hidden_block", "apply_head", "build_model",
    "analytic_parameter_count", "save_checkpoint", "load_checkpoint", "check_head_target",
]
