"""
Message passing with MLP and KAN layers
=======================================

Build a small graph by hand and push features through the three
convolutions and their KAN counterparts.
"""
import numpy as np

from kagnn.autodiff import Tensor
from kagnn.graph import Graph
from kagnn.models import ModelConfig, analytic_parameter_count, build_model

# a 5-cycle with a chord; edges are stored in both directions
pairs = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (0, 2)]
edges = np.array(pairs + [(j, i) for i, j in pairs])
x = np.random.default_rng(1).uniform(-1, 1, size=(5, 3))
g = Graph(x=x, edges=edges)

for kind in ("GCN", "KAGCN", "GIN", "KAGIN", "EdgeCNN", "KAEdgeCNN"):
    kan = kind.startswith("KA")
    cfg = ModelConfig(kind, in_dim=3, out_dim=2, head="graph_pool", num_layers=2, hidden_dim=16,
                      grid_size=4 if kan else None, spline_order=3 if kan else None)
    model = build_model(cfg, np.random.default_rng(0))
    out = model(g).data
    print(f"{kind:10s} params {analytic_parameter_count(cfg):5d}  graph output {np.round(out, 4)}")
