"""Message-passing drag surrogate over the mesh edge graph.

Node features are position, vertex normal and the pressure field; edge
features are the scaled displacement and its length. The readout is an
area-weighted sum of per-vertex scores, i.e. a surface integral, so the
prediction is stable across tessellations of the same shape.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

from ..diffcore import (MLP, AdamW, Module, load_checkpoint, make_rng, no_param_grads, param_grads_enabled,
                        save_checkpoint)
from ..errors import ConfigError, DataError, GraphError, NumericalError
from ..geometry import Mesh

log = logging.getLogger(__name__)

EDGE_SCALE = 30.0  # typical edge lengths are a few hundredths of the unit cube


@dataclass
class MeshGraph:
    src: np.ndarray
    dst: np.ndarray
    mean_in: sparse.csr_matrix  # (V, E): average over edges arriving at each vertex
    at_src: sparse.csr_matrix  # (V, E) incidence, used to scatter edge grads
    at_dst: sparse.csr_matrix


def build_graph(mesh: Mesh) -> MeshGraph:
    e = mesh.edges()
    if len(e) == 0:
        raise GraphError("mesh has no edges")
    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[mesh.faces.reshape(-1)] = True
    if not used.all():
        raise GraphError(f"{int((~used).sum())} isolated vertices have no incident face")
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    n_v, n_e = mesh.n_vertices, len(src)
    cols = np.arange(n_e)
    deg = np.bincount(dst, minlength=n_v).astype(float)
    mean_in = sparse.csr_matrix((1.0 / deg[dst], (dst, cols)), shape=(n_v, n_e))
    at_src = sparse.csr_matrix((np.ones(n_e), (src, cols)), shape=(n_v, n_e))
    at_dst = sparse.csr_matrix((np.ones(n_e), (dst, cols)), shape=(n_v, n_e))
    return MeshGraph(src, dst, mean_in, at_src, at_dst)


@dataclass
class GNNConfig:
    hidden: int = 32
    blocks: int = 3
    act: str = "silu"


FULL_SCALE_GNN = dict(hidden=128, blocks=8)


class MeshGNN(Module):
    def __init__(self, cfg: GNNConfig, rng: np.random.Generator) -> None:
        super().__init__()
        if cfg.blocks < 0 or cfg.hidden < 1:
            raise ConfigError("GNN needs non-negative depth and positive width")
        self.cfg = cfg
        h = cfg.hidden
        self.node_enc = self.add_child("node_enc", MLP([7, h, h], rng, act=cfg.act))
        self.edge_enc = self.add_child("edge_enc", MLP([4, h, h], rng, act=cfg.act))
        self.edge_mlps = [self.add_child(f"edge{i}", MLP([3 * h, h, h], rng, act=cfg.act, final_gain=0.5))
                          for i in range(cfg.blocks)]
        self.node_mlps = [self.add_child(f"node{i}", MLP([2 * h, h, h], rng, act=cfg.act, final_gain=0.5))
                          for i in range(cfg.blocks)]
        self.readout = self.add_child("readout", MLP([h, h, 1], rng, act=cfg.act, final_gain=0.1))
        self.add_param("bias", np.zeros(1))
        self.field_shift = 0.0
        self.field_scale = 1.0

    def forward(self, verts: np.ndarray, faces: np.ndarray, phi: np.ndarray, graph: MeshGraph):
        tri = verts[faces]
        e1, e2 = tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
        w = np.cross(e1, e2)
        wn = np.linalg.norm(w, axis=1)
        n_v = len(verts)
        big_n = np.zeros((n_v, 3))
        area = np.zeros(n_v)
        for k in range(3):
            np.add.at(big_n, faces[:, k], w)
            np.add.at(area, faces[:, k], wn / 6.0)
        nlen = np.linalg.norm(big_n, axis=1, keepdims=True)
        if (nlen == 0).any():
            raise GraphError("vertex normal undefined (zero accumulated area)")
        normal = big_n / nlen
        phin = (np.asarray(phi, dtype=float).reshape(-1) - self.field_shift) / self.field_scale
        x0 = np.concatenate([verts, normal, phin[:, None]], axis=1)
        d = verts[graph.dst] - verts[graph.src]
        dl = np.linalg.norm(d, axis=1, keepdims=True)
        e0 = EDGE_SCALE * np.concatenate([d, dl], axis=1)
        h, c_ne = self.node_enc.forward(x0)
        e, c_ee = self.edge_enc.forward(e0)
        c_blocks = []
        for em, nm in zip(self.edge_mlps, self.node_mlps):
            m, c_e = _edge_update(em, e, h, graph)
            e = e + m
            agg = graph.mean_in @ e
            u, c_n = nm.forward(np.concatenate([h, agg], axis=1))
            h = h + u
            c_blocks.append((c_e, c_n))
        s, c_ro = self.readout.forward(h)
        value = float(area @ s[:, 0] + self.p("bias")[0])
        cache = (faces, e1, e2, w, wn, big_n, nlen, normal, d, dl, area, s, c_ne, c_ee, c_blocks, c_ro, graph)
        return value, cache

    def backward(self, cache, dvalue: float = 1.0) -> np.ndarray:
        """Accumulate parameter grads and return d value / d vertices."""
        faces, e1, e2, w, wn, big_n, nlen, normal, d, dl, area, s, c_ne, c_ee, c_blocks, c_ro, graph = cache
        hdim = self.cfg.hidden
        self.g("bias")[0] += dvalue
        d_area = dvalue * s[:, 0]
        dh = self.readout.backward(c_ro, dvalue * area[:, None])
        de = np.zeros((len(graph.src), hdim))
        for em, nm, (c_e, c_n) in zip(reversed(self.edge_mlps), reversed(self.node_mlps), reversed(c_blocks)):
            dcat = nm.backward(c_n, dh)
            dh = dh + dcat[:, :hdim]
            de = de + graph.mean_in.T @ dcat[:, hdim:]
            de_m, dh_m = _edge_update_backward(em, c_e, de, graph)
            de = de + de_m
            dh = dh + dh_m
        dx0 = self.node_enc.backward(c_ne, dh)
        de0 = self.edge_enc.backward(c_ee, de) * EDGE_SCALE
        dv = dx0[:, :3].copy()
        dd = de0[:, :3] + de0[:, 3:4] * d / dl
        dv += graph.at_dst @ dd - graph.at_src @ dd
        dn = dx0[:, 3:6]
        dbig = (dn - normal * (normal * dn).sum(axis=1, keepdims=True)) / nlen
        dw = dbig[faces].sum(axis=1) + (d_area[faces].sum(axis=1) / 6.0)[:, None] * w / wn[:, None]
        d1 = np.cross(e2, dw)
        d2 = np.cross(dw, e1)
        np.add.at(dv, faces[:, 0], -(d1 + d2))
        np.add.at(dv, faces[:, 1], d1)
        np.add.at(dv, faces[:, 2], d2)
        return dv


def _edge_update(em: MLP, e: np.ndarray, h: np.ndarray, graph: MeshGraph):
    """``em([e, h_src, h_dst])`` with the first layer split so node terms are projected per vertex, not per edge."""
    w = em.layers[0].p("weight")
    k = e.shape[1]
    pre = e @ w[:k] + (h @ w[k:2 * k])[graph.src] + (h @ w[2 * k:])[graph.dst] + em.layers[0].p("bias")
    x, caches = pre, []
    for layer in em.layers[1:]:
        x, c = layer.forward(x)
        caches.append(c)
    return x, (e, h, caches)


def _edge_update_backward(em: MLP, cache, dy: np.ndarray, graph: MeshGraph):
    """Accumulate the edge MLP's parameter grads; returns (d edge features, d node features)."""
    e, h, caches = cache
    for layer, c in zip(reversed(em.layers[1:]), reversed(caches)):
        dy = layer.backward(c, dy)
    first = em.layers[0]
    w, gw = first.p("weight"), first.g("weight")
    k = e.shape[1]
    d_src, d_dst = graph.at_src @ dy, graph.at_dst @ dy
    if param_grads_enabled():
        gw[:k] += e.T @ dy
        gw[k:2 * k] += h.T @ d_src
        gw[2 * k:] += h.T @ d_dst
        first.g("bias")[...] += dy.sum(axis=0)
    return dy @ w[:k].T, d_src @ w[k:2 * k].T + d_dst @ w[2 * k:].T


def gnn_predict(mesh: Mesh, phi: np.ndarray, net: MeshGNN, graph: MeshGraph | None = None) -> float:
    return net.forward(mesh.vertices, mesh.faces, phi, graph or build_graph(mesh))[0]


def gnn_value_and_grad(mesh: Mesh, phi: np.ndarray, net: MeshGNN, graph: MeshGraph | None = None):
    """Prediction and its gradient w.r.t. vertex positions (parameter grads untouched)."""
    value, cache = net.forward(mesh.vertices, mesh.faces, phi, graph or build_graph(mesh))
    with no_param_grads():
        dv = net.backward(cache)
    return value, dv


def gnn_objective(mesh: Mesh, phi: np.ndarray, net: MeshGNN):
    """Vertex-position objective for refinement; the field stays fixed while geometry moves."""
    graph = build_graph(mesh)

    def fn(verts):
        return gnn_value_and_grad(mesh.with_vertices(verts), phi, net, graph)
    return fn


@dataclass
class GNNSample:
    mesh: Mesh
    phi: np.ndarray
    drag: float


@dataclass
class GNNTrainConfig:
    steps: int = 600
    batch: int = 8
    lr: float = 3e-3  # the large-scale preset uses 1e-5
    min_lr: float = 1e-5
    weight_decay: float = 0.01


FULL_SCALE_GNN_TRAIN = dict(lr=1e-5, batch=8)


def train_gnn(samples: list[GNNSample], cfg: GNNConfig, tcfg: GNNTrainConfig, seed: int) -> tuple[MeshGNN, list[float]]:
    """MSE regression of drag; returns the net and per-step batch losses."""
    if not samples:
        raise DataError("GNN training needs at least one sample")
    labels = np.array([s.drag for s in samples])
    if not np.all(np.isfinite(labels)):
        raise DataError("non-finite drag label")
    net = MeshGNN(cfg, make_rng(seed, "gnn", "init"))
    fields = np.concatenate([s.phi for s in samples])
    net.field_shift, net.field_scale = float(fields.mean()), float(max(fields.std(), 1e-8))
    net.p("bias")[0] = labels.mean()
    graphs = [build_graph(s.mesh) for s in samples]
    rng = make_rng(seed, "gnn", "batches")
    opt = AdamW(net, lr=tcfg.lr, weight_decay=tcfg.weight_decay, total_steps=max(tcfg.steps, 1),
                min_lr=tcfg.min_lr)
    history = []
    for step in range(tcfg.steps):
        idx = rng.choice(len(samples), min(tcfg.batch, len(samples)), replace=False)
        net.zero_grad()
        loss = 0.0
        for i in idx:
            s = samples[i]
            pred, cache = net.forward(s.mesh.vertices, s.mesh.faces, s.phi, graphs[i])
            r = pred - s.drag
            loss += r * r / len(idx)
            net.backward(cache, 2.0 * r / len(idx))
        if not np.isfinite(loss):
            raise NumericalError(f"GNN loss became non-finite at step {step}")
        opt.step()
        history.append(loss)
        if step % 100 == 0:
            log.info("gnn step %d mse %.3g", step, loss)
    return net, history


def relative_error(net: MeshGNN, samples: list[GNNSample]) -> float:
    """Mean |pred - label| / |label| over samples."""
    errs = [abs(gnn_predict(s.mesh, s.phi, net) - s.drag) / abs(s.drag) for s in samples]
    return float(np.mean(errs))


def save_gnn(path: Path, net: MeshGNN) -> None:
    save_checkpoint(path, net.state_dict(), {"kind": "gnn", "config": asdict(net.cfg),
                                             "field_shift": net.field_shift, "field_scale": net.field_scale})


def load_gnn(path: Path) -> MeshGNN:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "gnn":
        raise DataError(f"{path} is not a GNN checkpoint")
    net = MeshGNN(GNNConfig(**meta["config"]), make_rng(0))
    net.load_state_dict(tensors)
    net.field_shift, net.field_scale = meta["field_shift"], meta["field_scale"]
    return net
