"""Design evaluation: shape descriptors, novelty, coverage, drag statistics and search baselines."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .diffcore import OptimizerState, adamw_step, make_rng
from .errors import ConfigError, DataError
from .geometry import Mesh, is_watertight, mesh_volume, sample_surface
from .surrogate import FlowSpec, MeshGNN, gnn_predict, newtonian_pressure, oracle_drag

log = logging.getLogger(__name__)

D2_BINS = 64
D2_PAIRS = 1024
D2_RANGE = float(np.sqrt(3.0))  # diagonal of the unit design cube
TABLE_COLUMNS = ("method", "pred_drag", "sim_drag", "novelty", "coverage")


def d2_descriptor(mesh: Mesh, seed: int = 0, bins: int = D2_BINS, pairs: int = D2_PAIRS) -> np.ndarray:
    """Unit-norm histogram of distances between random surface point pairs."""
    pts = sample_surface(mesh, 2 * pairs, make_rng(seed, "d2"), allow_open=True).positions
    d = np.linalg.norm(pts[0::2] - pts[1::2], axis=1)
    hist, _ = np.histogram(np.minimum(d, D2_RANGE), bins=bins, range=(0.0, D2_RANGE))
    hist = hist.astype(np.float64)
    return hist / np.linalg.norm(hist)


def _distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise DataError("descriptor sets must be non-empty")
    return np.sqrt(np.maximum(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1), 0.0))


def novelty(generated: np.ndarray, training: np.ndarray) -> float:
    """Mean distance from each generated descriptor to its nearest training descriptor."""
    return float(_distances(generated, training).min(axis=1).mean())


def coverage(generated: np.ndarray, training: np.ndarray, tau: float, k: int = 1) -> float:
    """Fraction of training descriptors whose k-th nearest generated descriptor lies within ``tau``."""
    if not tau > 0:
        raise ConfigError("coverage threshold must be positive")
    d = _distances(training, generated)
    if not 1 <= k <= d.shape[1]:
        raise ConfigError(f"k={k} outside [1, {d.shape[1]}]")
    kth = np.sort(d, axis=1)[:, k - 1]
    return float(np.mean(kth <= tau))


def default_tau(training: np.ndarray) -> float:
    """Median nearest-neighbour distance within the training set."""
    d = _distances(training, training)
    if len(d) < 2:
        raise DataError("self-calibrated threshold needs at least two training descriptors")
    np.fill_diagonal(d, np.inf)
    return float(np.median(d.min(axis=1)))


# -- baselines ---------------------------------------------------------------------

@dataclass
class CEMConfig:
    population: int = 64
    elite_fraction: float = 0.125
    smoothing: float = 0.3  # weight kept on the previous distribution
    iterations: int = 50
    min_std: float = 1e-6

    def __post_init__(self) -> None:
        if not 0 < self.elite_fraction <= 1:
            raise ConfigError("elite fraction must lie in (0, 1]")
        if not 0 <= self.smoothing <= 1:
            raise ConfigError("smoothing coefficient must lie in [0, 1]")
        if self.n_elite < 2:
            raise ConfigError(f"population {self.population} yields fewer than 2 elites")

    @property
    def n_elite(self) -> int:
        return int(round(self.elite_fraction * self.population))


@dataclass
class SearchResult:
    best: np.ndarray
    value: float
    history: list[float] = field(default_factory=list)
    mean: np.ndarray | None = None


def cem_search(objective: Callable[[np.ndarray], np.ndarray], init: np.ndarray, cfg: CEMConfig,
               seed: int) -> SearchResult:
    """Cross-entropy method over a diagonal Gaussian fitted to ``init``.

    ``objective`` maps a batch of latents to one value each (lower is better).
    """
    init = np.asarray(init, dtype=np.float64)
    if len(init) < 1:
        raise DataError("CEM needs at least one initial latent")
    values = np.asarray(objective(init), dtype=np.float64)
    i = int(np.argmin(values))
    best, best_val = init[i].copy(), float(values[i])
    mean = init.mean(axis=0)
    std = np.maximum(init.std(axis=0), cfg.min_std)
    rng = make_rng(seed, "cem")
    history = [best_val]
    a = cfg.smoothing
    for _ in range(cfg.iterations):
        pop = mean + std * rng.normal(size=(cfg.population,) + mean.shape)
        vals = np.asarray(objective(pop), dtype=np.float64)
        vals = np.where(np.isfinite(vals), vals, np.inf)
        elite = pop[np.argsort(vals, kind="stable")[:cfg.n_elite]]
        mean = a * mean + (1 - a) * elite.mean(axis=0)
        std = np.maximum(a * std + (1 - a) * elite.std(axis=0), cfg.min_std)
        j = int(np.argmin(vals))
        if vals[j] < best_val:
            best, best_val = pop[j].copy(), float(vals[j])
        history.append(best_val)
    return SearchResult(best, best_val, history, mean)


def latent_backprop(objective: Callable[[np.ndarray], tuple[float, np.ndarray]], z_init: np.ndarray, steps: int,
                    lr: float, min_lr: float | None = None) -> SearchResult:
    """Adam descent on a single latent; stops at the last finite point on a NaN."""
    if steps < 0 or lr < 0:
        raise ConfigError("steps and learning rate must be non-negative")
    z = np.array(z_init, dtype=np.float64)
    state = OptimizerState(lr=lr, weight_decay=0.0, t_sched=max(steps, 1),
                           min_lr=0.01 * lr if min_lr is None else min_lr)
    value, grad = objective(z)
    history = [float(value)]
    for step in range(steps):
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            log.warning("non-finite objective or gradient at step %d; keeping the last valid latent", step)
            break
        last = z.copy()
        adamw_step(state, {"z": z}, {"z": np.asarray(grad, dtype=np.float64)})
        value, grad = objective(z)
        if not np.isfinite(value):
            z = last
            break
        history.append(float(value))
    return SearchResult(z, history[-1], history)


# -- evaluation ----------------------------------------------------------------------

@dataclass
class Design:
    mesh: Mesh
    phi: np.ndarray | None = None  # surface field fed to the surrogate; oracle pressure if None


def bootstrap_ci(x: np.ndarray, seed: int, n_boot: int = 1000, level: float = 0.95) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    rng = make_rng(seed, "bootstrap")
    means = x[rng.integers(0, len(x), size=(n_boot, len(x)))].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


def _summary(x, seed):
    lo, hi = bootstrap_ci(x, seed)
    return {"mean": float(np.mean(x)), "ci_low": lo, "ci_high": hi}


@dataclass
class EvalReport:
    method: str
    designs: list[dict]
    aggregate: dict

    def row(self) -> dict:
        a = self.aggregate
        return {"method": self.method, "pred_drag": a["pred_drag"]["mean"], "sim_drag": a["sim_drag"]["mean"],
                "novelty": a["novelty"]["mean"], "coverage": a["coverage"]}

    def to_json(self, path: Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def design_record(mesh: Mesh, phi, net: MeshGNN | None, flow: FlowSpec) -> dict:
    """Per-design oracle evaluation, the content of one ``eval/NNNN.json``."""
    watertight = bool(is_watertight(mesh))
    rec = {"watertight": watertight, "cd_oracle": float(oracle_drag(mesh, flow)),
           "volume": float(mesh_volume(mesh)) if watertight else None, "cd_pred": None}
    if net is not None:
        rec["cd_pred"] = float(gnn_predict(mesh, newtonian_pressure(mesh, flow) if phi is None else phi, net))
    return rec


def evaluate(designs: list[Design], training: list[Mesh], net: MeshGNN | None, flow: FlowSpec | None = None,
             tau: float | None = None, method: str = "invforge", seed: int = 0, k: int = 1,
             training_descriptors: np.ndarray | None = None) -> EvalReport:
    """Score a design set; non-watertight designs are reported but excluded from aggregates."""
    flow = flow or FlowSpec()
    if not designs:
        raise DataError("no designs to evaluate")
    train_d = (np.stack([d2_descriptor(m) for m in training]) if training_descriptors is None
               else training_descriptors)
    tau = default_tau(train_d) if tau is None else tau
    per, valid_desc = [], []
    for i, d in enumerate(designs):
        rec = design_record(d.mesh, d.phi, net, flow)
        rec["index"] = i
        if rec["watertight"]:
            desc = d2_descriptor(d.mesh)
            rec["novelty"] = float(_distances(desc[None], train_d).min())
            valid_desc.append(desc)
        else:
            rec["novelty"] = None
        per.append(rec)
    valid = [r for r in per if r["watertight"]]
    if not valid:
        raise DataError(f"all {len(per)} designs are non-watertight; nothing to evaluate")
    if len(valid) < len(per):
        log.warning("%d of %d designs are non-watertight and excluded", len(per) - len(valid), len(per))
    pred = [r["cd_pred"] for r in valid]
    agg = {
        "sim_drag": _summary([r["cd_oracle"] for r in valid], seed),
        "pred_drag": _summary(pred, seed) if net is not None else {"mean": None, "ci_low": None, "ci_high": None},
        "novelty": _summary([r["novelty"] for r in valid], seed),
        "coverage": coverage(np.stack(valid_desc), train_d, tau, k=min(k, len(valid_desc))),
        "tau": tau, "k": k, "n_designs": len(per), "n_valid": len(valid), "n_excluded": len(per) - len(valid),
        "bootstrap_seed": seed,
    }
    return EvalReport(method, per, agg)


def write_table_csv(path: Path, reports: list[EvalReport]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerow({k: ("" if v is None else v) for k, v in r.row().items()})
