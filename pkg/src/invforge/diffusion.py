"""Latent DDPM with objective-gradient guidance and the latent drag predictor."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .diffcore import (MLP, Activation, AdamW, Conv2d, LayerNorm, Linear, Module, TransformerBlock,
                       load_checkpoint, make_rng, no_param_grads, save_checkpoint, timestep_embedding)
from .errors import ConfigError, DataError, DimensionError, NumericalError

log = logging.getLogger(__name__)


# -- schedule -------------------------------------------------------------------

@dataclass
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self) -> None:
        self.betas = np.asarray(self.betas, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.cumprod(self.alphas)

    @property
    def T(self) -> int:
        return len(self.betas)

    def check(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T) or not np.issubdtype(t.dtype, np.integer):
            raise ConfigError(f"timestep must be an integer in [1, {self.T}]")
        return t

    def abar(self, t) -> np.ndarray:
        """Cumulative product at integer t in [0, T]; abar(0) = 1."""
        t = np.asarray(t)
        return np.where(t == 0, 1.0, self.alpha_bar[np.maximum(t, 1) - 1])


def make_schedule(T: int = 1000, beta_1: float = 1e-4, beta_T: float = 0.02) -> NoiseSchedule:
    """Linear beta ramp from beta_1 to beta_T."""
    if T < 1:
        raise ConfigError("schedule needs at least one step")
    if not 0 < beta_1 <= beta_T < 1:
        raise ConfigError(f"need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_T}")
    return NoiseSchedule(np.linspace(beta_1, beta_T, T))


def _bcast(v, like):
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(v.shape + (1,) * (np.ndim(like) - v.ndim))


def q_sample(z0: np.ndarray, t, xi: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) xi; ``t`` is a scalar or one step per batch row."""
    ab = _bcast(sched.abar(sched.check(t)), z0)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * xi


def predict_z0(z_t: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Clean-latent estimate (z_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)."""
    ab = _bcast(sched.abar(sched.check(t)), z_t)
    if np.any(ab <= 0):
        raise NumericalError("cumulative alpha is zero; the clean-latent estimate is undefined")
    return (z_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


# -- noise prediction network ------------------------------------------------------

@dataclass
class EpsNetConfig:
    n_tokens: int = 48
    d_z: int = 8
    width: int = 64
    depth: int = 2
    heads: int = 4
    act: str = "silu"


FULL_SCALE_EPSNET = dict(width=1024, depth=10, heads=16)


class EpsNet(Module):
    """Transformer over latent tokens with additive sinusoidal time conditioning.

    Latents are standardized with ``data_shift``/``data_scale`` before
    entering the network; the diffusion process runs in that space.
    """

    def __init__(self, cfg: EpsNetConfig, rng: np.random.Generator) -> None:
        super().__init__()
        if cfg.width % cfg.heads:
            raise ConfigError(f"{cfg.heads} heads do not divide width {cfg.width}")
        self.cfg = cfg
        w = cfg.width
        self.inp = self.add_child("inp", Linear(cfg.d_z, w, rng))
        self.add_param("pos", rng.normal(0.0, 0.1, size=(cfg.n_tokens, w)))
        self.time = self.add_child("time", MLP([w, w, w], rng, act=cfg.act))
        self.blocks = [self.add_child(f"block{i}", TransformerBlock(w, cfg.heads, rng, act=cfg.act))
                       for i in range(cfg.depth)]
        self.ln = self.add_child("ln", LayerNorm(w))
        self.out = self.add_child("out", Linear(w, cfg.d_z, rng, gain=0.1))
        self.data_shift = np.zeros((cfg.n_tokens, cfg.d_z))
        self.data_scale = 1.0

    def forward(self, z, t):
        """Predicted noise for standardized latents ``z`` (B, n_tokens, d_z) at steps ``t`` (B,)."""
        if z.ndim != 3 or z.shape[1:] != (self.cfg.n_tokens, self.cfg.d_z):
            raise DimensionError(f"eps-net expects (B, {self.cfg.n_tokens}, {self.cfg.d_z}), got {z.shape}")
        t = np.broadcast_to(np.asarray(t), (len(z),))
        h, ci = self.inp.forward(z)
        temb, ct = self.time.forward(timestep_embedding(t, self.cfg.width))
        h = h + self.p("pos") + temb[:, None, :]
        cb = []
        for blk in self.blocks:
            h, c = blk.forward(h)
            cb.append(c)
        h, cl = self.ln.forward(h)
        y, co = self.out.forward(h)
        return y, (ci, ct, cb, cl, co)

    def backward(self, cache, dy):
        ci, ct, cb, cl, co = cache
        dh = self.ln.backward(cl, self.out.backward(co, dy))
        for blk, c in zip(reversed(self.blocks), reversed(cb)):
            dh = blk.backward(c, dh)
        self.g("pos")[...] += dh.sum(axis=0)
        self.time.backward(ct, dh.sum(axis=1))
        return self.inp.backward(ci, dh)

    def standardize(self, z):
        return (z - self.data_shift) / self.data_scale

    def unstandardize(self, z):
        return self.data_shift + self.data_scale * z


def fit_standardizer(net: EpsNet, latents: np.ndarray) -> None:
    net.data_shift = latents.mean(axis=0)
    std = float((latents - net.data_shift).std())
    net.data_scale = std if std > 1e-6 else 1.0


@dataclass
class DiffusionTrainConfig:
    steps: int = 3000
    batch: int = 32
    lr: float = 1e-3
    min_lr: float = 1e-5
    weight_decay: float = 0.01
    T: int = 1000
    beta_1: float = 1e-4
    beta_T: float = 0.02


def diffusion_loss(net: EpsNet, z0_std: np.ndarray, t: np.ndarray, xi: np.ndarray, sched: NoiseSchedule,
                   grad: bool = False) -> float:
    z_t = q_sample(z0_std, t, xi, sched)
    eps, cache = net.forward(z_t, t)
    loss = float(np.mean((eps - xi) ** 2))
    if grad:
        net.backward(cache, 2.0 * (eps - xi) / eps.size)
    return loss


def train_diffusion(latents: np.ndarray, net: EpsNet, sched: NoiseSchedule, cfg: DiffusionTrainConfig,
                    seed: int) -> list[float]:
    """Epsilon-prediction MSE with uniform timesteps; fits the standardizer first."""
    latents = np.asarray(latents, dtype=np.float64)
    if cfg.steps == 0:
        return []
    fit_standardizer(net, latents)
    data = net.standardize(latents)
    rng = make_rng(seed, "diffusion", "train")
    opt = AdamW(net, lr=cfg.lr, weight_decay=cfg.weight_decay, total_steps=cfg.steps, min_lr=cfg.min_lr)
    history = []
    for step in range(cfg.steps):
        idx = rng.integers(0, len(data), size=cfg.batch)
        t = rng.integers(1, sched.T + 1, size=cfg.batch)
        xi = rng.normal(size=(cfg.batch,) + data.shape[1:])
        net.zero_grad()
        loss = diffusion_loss(net, data[idx], t, xi, sched, grad=True)
        if not np.isfinite(loss):
            raise NumericalError(f"diffusion loss became non-finite at step {step}")
        opt.step()
        history.append(loss)
        if step % 500 == 0:
            log.info("diffusion step %d loss %.4f", step, loss)
    return history


# -- guidance --------------------------------------------------------------------

class QuadraticObjective:
    """J(z) = ||z - target||^2 per sample; a closed-form predictor for tests and toys."""

    def __init__(self, target) -> None:
        self.target = np.asarray(target, dtype=np.float64)

    def value_and_grad(self, z):
        d = z - self.target
        return (d ** 2).reshape(len(z), -1).sum(axis=1), 2.0 * d


@dataclass
class GuidanceConfig:
    scale: float = 1.0
    objective: object = None  # anything with value_and_grad(raw latents) -> (values, grads)
    clip: float = 1.0
    through_eps: bool = True  # differentiate the clean-latent estimate through the eps-net too

    def __post_init__(self) -> None:
        if not np.isfinite(self.scale) or self.scale < 0:
            raise ConfigError("guidance scale must be finite and non-negative")
        if not self.clip > 0:
            raise ConfigError("guidance clipping norm must be positive")


def clip_rows(g: np.ndarray, max_norm: float) -> np.ndarray:
    norms = np.sqrt((g ** 2).reshape(len(g), -1).sum(axis=1))
    factor = np.minimum(1.0, max_norm / np.maximum(norms, 1e-300))
    return g * _bcast(factor, g)


def guided_epsilon(z_t: np.ndarray, t: int, net: EpsNet, guidance: GuidanceConfig | None, sched: NoiseSchedule):
    """Noise prediction plus gamma times the clipped gradient of J at the clean-latent estimate.

    ``z_t`` is in the standardized space. Returns (eps', J(z0_hat) or None).
    """
    eps, cache = net.forward(z_t, t)
    if guidance is None or guidance.objective is None:
        return eps, None
    ab = float(sched.abar(t))
    z0 = (z_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
    values, g_raw = guidance.objective.value_and_grad(net.unstandardize(z0))
    if guidance.scale == 0:
        return eps, values
    dz0 = np.asarray(g_raw) * net.data_scale
    grad = dz0 / np.sqrt(ab)
    if guidance.through_eps and ab < 1.0:
        with no_param_grads():
            grad = grad - net.backward(cache, dz0 * np.sqrt(1.0 - ab) / np.sqrt(ab))
    if not np.all(np.isfinite(grad)):
        log.warning("non-finite guidance gradient at t=%d; guidance skipped for this step", t)
        return eps, values
    return eps + guidance.scale * clip_rows(grad, guidance.clip), values


def sample(net: EpsNet, sched: NoiseSchedule, guidance: GuidanceConfig | None, rng: np.random.Generator, n: int,
           trace: list | None = None) -> np.ndarray:
    """Ancestral DDPM from pure noise; returns ``n`` latents in raw (unstandardized) units.

    If ``trace`` is a list, (t, gamma, mean J) rows are appended at every step.
    """
    shape = (n, net.cfg.n_tokens, net.cfg.d_z)
    z = rng.normal(size=shape)
    gamma = 0.0 if guidance is None else guidance.scale
    for t in range(sched.T, 0, -1):
        eps, values = guided_epsilon(z, t, net, guidance, sched)
        if trace is not None and values is not None:
            trace.append((t, gamma, float(np.mean(values))))
        beta, alpha = sched.betas[t - 1], sched.alphas[t - 1]
        ab = sched.abar(t)
        mean = (z - beta / np.sqrt(1.0 - ab) * eps) / np.sqrt(alpha)
        if t > 1:
            var = beta * (1.0 - sched.abar(t - 1)) / (1.0 - ab)
            z = mean + np.sqrt(var) * rng.normal(size=shape)
        else:
            z = mean
    return net.unstandardize(z)


def write_guidance_trace(path: Path, trace: list) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "gamma", "objective"])
        for t, g, j in trace:
            w.writerow([t, repr(float(g)), repr(float(j))])


def save_samples(path: Path, latents: np.ndarray, meta: dict | None = None) -> None:
    save_checkpoint(path, {f"samples.latent.{i:04d}": z for i, z in enumerate(latents)}, meta or {})


def load_samples(path: Path) -> np.ndarray:
    tensors, _ = load_checkpoint(path)
    keys = sorted(k for k in tensors if k.startswith("samples.latent."))
    return np.stack([tensors[k] for k in keys])


# -- latent objective predictor ------------------------------------------------------

@dataclass
class LatentObjectiveConfig:
    r: int = 4
    d_z: int = 8
    channels: int = 16
    act: str = "silu"


class LatentObjective(Module):
    """Convolutional regressor on the r x 3r latent image, mean-pooled to a scalar."""

    def __init__(self, cfg: LatentObjectiveConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.conv1 = self.add_child("conv1", Conv2d(cfg.d_z, c, rng))
        self.act1 = Activation(cfg.act)
        self.conv2 = self.add_child("conv2", Conv2d(c, c, rng))
        self.act2 = Activation(cfg.act)
        self.head = self.add_child("head", MLP([c, c, 1], rng, act=cfg.act))
        self.input_shift = np.zeros((3 * cfg.r * cfg.r, cfg.d_z))
        self.input_scale = 1.0
        self.label_shift = 0.0
        self.label_scale = 1.0

    def _image(self, z):
        r, d = self.cfg.r, self.cfg.d_z
        return z.reshape(len(z), 3, r, r, d).transpose(0, 2, 1, 3, 4).reshape(len(z), r, 3 * r, d)

    def _tokens(self, img):
        r, d = self.cfg.r, self.cfg.d_z
        return img.reshape(len(img), r, 3, r, d).transpose(0, 2, 1, 3, 4).reshape(len(img), 3 * r * r, d)

    def forward(self, z):
        if z.ndim != 3 or z.shape[1:] != self.input_shift.shape:
            raise DimensionError(f"latent predictor expects (B, {self.input_shift.shape}), got {z.shape}")
        x = self._image((z - self.input_shift) / self.input_scale)
        h, c1 = self.conv1.forward(x)
        h, a1 = self.act1.forward(h)
        h, c2 = self.conv2.forward(h)
        h, a2 = self.act2.forward(h)
        pooled = h.mean(axis=(1, 2))
        y, ch = self.head.forward(pooled)
        return self.label_shift + self.label_scale * y[:, 0], (c1, a1, c2, a2, ch, h.shape)

    def backward(self, cache, dy):
        c1, a1, c2, a2, ch, shape = cache
        dp = self.head.backward(ch, (self.label_scale * dy)[:, None])
        dh = np.broadcast_to(dp[:, None, None, :] / (shape[1] * shape[2]), shape)
        dh = self.conv1.backward(c1, self.act1.backward(a1, self.conv2.backward(c2, self.act2.backward(a2, dh))))
        return self._tokens(dh) / self.input_scale

    def value_and_grad(self, z):
        """Predicted objective per latent and its gradient; parameter grads untouched."""
        z = np.asarray(z, dtype=np.float64)
        values, cache = self.forward(z)
        with no_param_grads():
            dz = self.backward(cache, np.ones(len(z)))
        return values, dz


@dataclass
class LatentObjectiveTrainConfig:
    steps: int = 2000
    batch: int = 16
    lr: float = 3e-3
    min_lr: float = 1e-5
    weight_decay: float = 0.01


def train_latent_objective(latents: np.ndarray, labels: np.ndarray, cfg: LatentObjectiveConfig,
                           tcfg: LatentObjectiveTrainConfig, seed: int) -> tuple[LatentObjective, list[float]]:
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if not np.all(np.isfinite(labels)):
        raise DataError("non-finite objective label")
    net = LatentObjective(cfg, make_rng(seed, "latent-obj", "init"))
    net.input_shift = latents.mean(axis=0)
    std = float((latents - net.input_shift).std())
    net.input_scale = std if std > 1e-6 else 1.0
    net.label_shift = float(labels.mean())
    lstd = float(labels.std())
    net.label_scale = lstd if lstd > 1e-6 else 1.0
    rng = make_rng(seed, "latent-obj", "batches")
    opt = AdamW(net, lr=tcfg.lr, weight_decay=tcfg.weight_decay, total_steps=max(tcfg.steps, 1), min_lr=tcfg.min_lr)
    history = []
    for step in range(tcfg.steps):
        idx = rng.integers(0, len(latents), size=min(tcfg.batch, len(latents)))
        net.zero_grad()
        pred, cache = net.forward(latents[idx])
        r = pred - labels[idx]
        loss = float(np.mean(r ** 2))
        if not np.isfinite(loss):
            raise NumericalError(f"latent objective loss became non-finite at step {step}")
        net.backward(cache, 2.0 * r / len(idx))
        opt.step()
        history.append(loss)
    return net, history


def latent_relative_error(net: LatentObjective, latents: np.ndarray, labels: np.ndarray) -> float:
    pred, _ = net.forward(np.asarray(latents, dtype=np.float64))
    return float(np.mean(np.abs(pred - labels) / np.abs(labels)))


# -- persistence -------------------------------------------------------------------

def save_epsnet(path: Path, net: EpsNet, sched: NoiseSchedule) -> None:
    tensors = net.state_dict()
    tensors["data_shift"] = net.data_shift
    save_checkpoint(path, tensors, {"kind": "epsnet", "config": asdict(net.cfg), "data_scale": net.data_scale,
                                    "T": sched.T, "beta_1": float(sched.betas[0]), "beta_T": float(sched.betas[-1])})


def load_epsnet(path: Path) -> tuple[EpsNet, NoiseSchedule]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "epsnet":
        raise DataError(f"{path} is not an eps-net checkpoint")
    net = EpsNet(EpsNetConfig(**meta["config"]), make_rng(0))
    net.load_state_dict(tensors)
    net.data_shift = tensors["data_shift"]
    net.data_scale = meta["data_scale"]
    return net, make_schedule(meta["T"], meta["beta_1"], meta["beta_T"])


def save_latent_objective(path: Path, net: LatentObjective) -> None:
    tensors = net.state_dict()
    tensors["input_shift"] = net.input_shift
    save_checkpoint(path, tensors, {"kind": "latent-objective", "config": asdict(net.cfg),
                                    "input_scale": net.input_scale, "label_shift": net.label_shift,
                                    "label_scale": net.label_scale})


def load_latent_objective(path: Path) -> LatentObjective:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "latent-objective":
        raise DataError(f"{path} is not a latent-objective checkpoint")
    net = LatentObjective(LatentObjectiveConfig(**meta["config"]), make_rng(0))
    net.load_state_dict(tensors)
    net.input_shift = tensors["input_shift"]
    net.input_scale = meta["input_scale"]
    net.label_shift, net.label_scale = meta["label_shift"], meta["label_scale"]
    return net
