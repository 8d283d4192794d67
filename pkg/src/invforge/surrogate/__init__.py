"""Analytic drag oracle and the learned mesh surrogate."""

from .gnn import (FULL_SCALE_GNN_TRAIN, GNNConfig, GNNSample, GNNTrainConfig, MeshGNN, MeshGraph, build_graph, gnn_objective,
                  gnn_predict, gnn_value_and_grad, load_gnn, relative_error, save_gnn, train_gnn)
from .oracle import DEFAULT_A_REF, FlowSpec, face_pressure, newtonian_pressure, oracle_drag, oracle_drag_gradient

__all__ = [
    "DEFAULT_A_REF", "FULL_SCALE_GNN_TRAIN", "FlowSpec", "GNNConfig", "GNNSample", "GNNTrainConfig", "MeshGNN", "MeshGraph", "build_graph",
    "face_pressure", "gnn_objective", "gnn_predict", "gnn_value_and_grad", "load_gnn", "newtonian_pressure",
    "oracle_drag", "oracle_drag_gradient", "relative_error", "save_gnn", "train_gnn",
]
