"""Physics-geometry VAE: dual token encoder, latent fusion and latent-to-triplane decoder."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import ShapeRecord, Supervision, make_supervision, surface_samples
from .diffcore import (MLP, Activation, AdamW, Conv2d, CrossAttentionBlock, LayerNorm, Linear, Module, ResBlock,
                       TransformerBlock, Upsample2x, load_checkpoint, make_rng, save_checkpoint)
from .errors import ConfigError, DataError, DimensionError, NumericalError
from .fields import MappingHeads, Triplane, occupancy_grid, triplane_backward, triplane_forward
from .geometry import PointSamples, inside_grid

log = logging.getLogger(__name__)

LOGVAR_CLAMP = 10.0


@dataclass
class VAEConfig:
    r: int = 4  # token grid; 3*r*r tokens
    d_e: int = 64
    d_z: int = 8
    depth: int = 2
    heads: int = 4
    bands: int = 6
    n_geom: int = 512
    n_phys: int = 512
    field_channels: int = 1
    channels: tuple[int, ...] = (32, 32, 24, 16)  # one ResBlock each, 2x upsampling between
    d_t: int = 16
    head_hidden: int = 32
    head_layers: int = 3
    act: str = "silu"
    linear: bool = False  # identity activations, no norms, uniform attention: a linear decoder for tests
    logvar_init: float = -4.0

    def __post_init__(self) -> None:
        self.channels = tuple(int(c) for c in self.channels)
        if self.d_e % self.heads:
            raise ConfigError(f"{self.heads} heads do not divide token width {self.d_e}")
        if self.channels[0] % self.heads:
            raise ConfigError(f"{self.heads} heads do not divide decoder width {self.channels[0]}")
        if self.r < 1 or not self.channels:
            raise ConfigError("token grid and decoder channels must be nonempty")

    @property
    def n_tokens(self) -> int:
        return 3 * self.r * self.r

    @property
    def resolution(self) -> int:
        return self.r * 2 ** (len(self.channels) - 1)

    @property
    def c_geom(self) -> int:
        return 3 + 6 * self.bands + 3

    @property
    def c_phys(self) -> int:
        return 3 + 6 * self.bands + self.field_channels


FULL_SCALE_VAE = dict(r=64, d_e=768, d_z=32, depth=8, heads=12, n_geom=50_000, n_phys=50_000, field_channels=4,
                 channels=(256, 128, 64), d_t=64, head_layers=5, head_hidden=128)


@dataclass
class VAETrainConfig:
    steps: int = 1000
    batch: int = 8
    lr: float = 1e-3
    min_lr: float = 1e-5
    weight_decay: float = 0.01
    n_query: int = 1024
    n_supervision: int = 4096
    n_surface: int = 2048
    near_fraction: float = 0.5
    w_bce: float = 1e-3
    w_mse: float = 1e-5
    w_kl: float = 1e-6
    checkpoint_every: int = 0
    log_every: int = 100


def fourier_embed(p: np.ndarray, bands: int) -> np.ndarray:
    """[p, sin(2^k pi p), cos(2^k pi p) for k < bands]; width 3 + 6*bands."""
    p = np.asarray(p, dtype=np.float64)
    parts = [p]
    for k in range(bands):
        arg = (2.0 ** k) * np.pi * p
        parts += [np.sin(arg), np.cos(arg)]
    return np.concatenate(parts, axis=-1)


def geometry_features(s: PointSamples, bands: int) -> np.ndarray:
    return np.concatenate([fourier_embed(s.positions, bands), s.normals], axis=-1)


def physics_features(s: PointSamples, bands: int, shift=0.0, scale=1.0) -> np.ndarray:
    if s.values is None:
        raise DataError("physics branch needs sampled field values")
    return np.concatenate([fourier_embed(s.positions, bands), (s.values - shift) / scale], axis=-1)


class TokenBranch(Module):
    """Learnable tokens read a point set by cross-attention, then self-attend."""

    def __init__(self, c_in: int, cfg: VAEConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.c_in = c_in
        self.embed = self.add_child("embed", Linear(c_in, cfg.d_e, rng))
        self.add_param("tokens", rng.normal(0.0, 1.0, size=(cfg.n_tokens, cfg.d_e)))
        self.cross = self.add_child("cross", CrossAttentionBlock(cfg.d_e, cfg.d_e, cfg.heads, rng, act=cfg.act))
        self.blocks = [self.add_child(f"block{i}", TransformerBlock(cfg.d_e, cfg.heads, rng, act=cfg.act))
                       for i in range(cfg.depth)]
        self.ln = self.add_child("ln", LayerNorm(cfg.d_e))
        self.out = self.add_child("out", Linear(cfg.d_e, cfg.d_z, rng))

    def forward(self, feats):
        if feats.ndim != 3 or feats.shape[-1] != self.c_in:
            raise DimensionError(f"branch expects (B, N, {self.c_in}) point features, got {feats.shape}")
        h, ce = self.embed.forward(feats)
        tok = np.broadcast_to(self.p("tokens"), (len(feats),) + self.p("tokens").shape).copy()
        x, cc = self.cross.forward(tok, h)
        cb = []
        for blk in self.blocks:
            x, c = blk.forward(x)
            cb.append(c)
        x, cl = self.ln.forward(x)
        y, co = self.out.forward(x)
        return y, (ce, cc, cb, cl, co)

    def backward(self, cache, dy):
        ce, cc, cb, cl, co = cache
        dx = self.ln.backward(cl, self.out.backward(co, dy))
        for blk, c in zip(reversed(self.blocks), reversed(cb)):
            dx = blk.backward(c, dx)
        dtok, dh = self.cross.backward(cc, dx)
        self.g("tokens")[...] += dtok.sum(axis=0)
        return self.embed.backward(ce, dh)


class TriplaneDecoder(Module):
    """Tokens -> r x 3r latent image -> attention + upsampling ResBlocks -> three R x R planes."""

    def __init__(self, cfg: VAEConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.cfg = cfg
        act = "identity" if cfg.linear else cfg.act
        ch = cfg.channels
        self.proj = self.add_child("proj", Linear(cfg.d_z, ch[0], rng))
        self.attn = self.add_child("attn", TransformerBlock(ch[0], cfg.heads, rng, act=act, norm=not cfg.linear))
        if cfg.linear:
            # zero query/key maps give uniform attention, which is linear in the values
            for name in ("q", "k"):
                for _, p, _ in getattr(self.attn.attn, name).named_parameters():
                    p[...] = 0.0
        self.res = []
        prev = ch[0]
        for i, c in enumerate(ch):
            self.res.append(self.add_child(f"res{i}", ResBlock(prev, c, rng, act=act)))
            prev = c
        self.up = Upsample2x()
        self.out_act = Activation(act)
        self.out = self.add_child("out", Conv2d(ch[-1], cfg.d_t, rng))

    def forward(self, z):
        cfg = self.cfg
        if z.ndim == 2:
            z = z[None]
        b = len(z)
        if z.shape[1:] != (cfg.n_tokens, cfg.d_z):
            raise DimensionError(f"latent must be ({cfg.n_tokens}, {cfg.d_z}) tokens, got {z.shape[1:]}")
        r = cfg.r
        img = z.reshape(b, 3, r, r, cfg.d_z).transpose(0, 2, 1, 3, 4).reshape(b, r, 3 * r, cfg.d_z)
        x, cp = self.proj.forward(img)
        c0 = x.shape[-1]
        t, ca = self.attn.forward(x.reshape(b, r * 3 * r, c0))
        x = t.reshape(b, r, 3 * r, c0)
        cr = []
        for i, blk in enumerate(self.res):
            x, c = blk.forward(x)
            cr.append(c)
            if i < len(self.res) - 1:
                x, _ = self.up.forward(x)
        x, cact = self.out_act.forward(x)
        x, co = self.out.forward(x)
        big = cfg.resolution
        planes = x.reshape(b, big, 3, big, cfg.d_t).transpose(0, 2, 1, 3, 4)
        return planes, (b, cp, ca, cr, cact, co)

    def backward(self, cache, dplanes):
        cfg = self.cfg
        b, cp, ca, cr, cact, co = cache
        big, r = cfg.resolution, cfg.r
        dx = dplanes.transpose(0, 2, 1, 3, 4).reshape(b, big, 3 * big, cfg.d_t)
        dx = self.out_act.backward(cact, self.out.backward(co, dx))
        for i in reversed(range(len(self.res))):
            if i < len(self.res) - 1:
                dx = self.up.backward(None, dx)
            dx = self.res[i].backward(cr[i], dx)
        c0 = dx.shape[-1]
        dx = self.attn.backward(ca, dx.reshape(b, r * 3 * r, c0)).reshape(b, r, 3 * r, c0)
        dimg = self.proj.backward(cp, dx)
        return dimg.reshape(b, r, 3, r, cfg.d_z).transpose(0, 2, 1, 3, 4).reshape(b, cfg.n_tokens, cfg.d_z)


class PGVAE(Module):
    def __init__(self, cfg: VAEConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.cfg = cfg
        self.geom = self.add_child("geom", TokenBranch(cfg.c_geom, cfg, rng))
        self.phys = self.add_child("phys", TokenBranch(cfg.c_phys, cfg, rng))
        self.fuse = self.add_child("fuse", MLP([2 * cfg.d_z, cfg.d_e, 2 * cfg.d_z], rng, act=cfg.act, final_gain=0.5))
        self.fuse.layers[-1].p("bias")[cfg.d_z:] = cfg.logvar_init
        self.decoder = self.add_child("decoder", TriplaneDecoder(cfg, rng))
        self.heads = self.add_child("heads", MappingHeads(cfg.d_t, rng, hidden=cfg.head_hidden, layers=cfg.head_layers,
                                                          field_channels=cfg.field_channels, act=cfg.act))

    # -- encoder ------------------------------------------------------------
    def encode_features(self, fg: np.ndarray, fp: np.ndarray):
        """Posterior (mu, logvar), each (B, n_tokens, d_z), from embedded point features."""
        zg, cg = self.geom.forward(fg)
        zp, cp = self.phys.forward(fp)
        out, cf = self.fuse.forward(np.concatenate([zg, zp], axis=-1))
        d = self.cfg.d_z
        raw_lv = out[..., d:]
        lv = np.clip(raw_lv, -LOGVAR_CLAMP, LOGVAR_CLAMP)
        return (out[..., :d], lv), (cg, cp, cf, np.abs(raw_lv) < LOGVAR_CLAMP)

    def encode_backward(self, cache, dmu, dlv):
        cg, cp, cf, free = cache
        dcat = self.fuse.backward(cf, np.concatenate([dmu, dlv * free], axis=-1))
        d = self.cfg.d_z
        return self.geom.backward(cg, dcat[..., :d]), self.phys.backward(cp, dcat[..., d:])

    # -- decoder ------------------------------------------------------------
    def decode_planes(self, z: np.ndarray) -> np.ndarray:
        return self.decoder.forward(z)[0]

    @property
    def field_shift(self):
        return self.heads.field_shift

    @property
    def field_scale(self):
        return self.heads.field_scale


def encode(geom: PointSamples, phys: PointSamples, cfg: VAEConfig, model: PGVAE, rng: np.random.Generator | None,
           xi: np.ndarray | None = None):
    """Latent z by reparameterization, with the posterior mean and log-variance.

    With ``rng=None`` and no ``xi`` the noise is zero, so z equals mu.
    """
    fg = geometry_features(geom, cfg.bands)[None]
    fp = physics_features(phys, cfg.bands, model.field_shift, model.field_scale)[None]
    (mu, lv), _ = model.encode_features(fg, fp)
    if xi is None:
        xi = np.zeros_like(mu) if rng is None else rng.normal(size=mu.shape)
    z = mu + np.exp(0.5 * lv) * np.reshape(xi, mu.shape)
    return z[0], mu[0], lv[0]


def decode_to_triplane(z: np.ndarray, model: PGVAE) -> Triplane:
    return Triplane(model.decode_planes(np.asarray(z, dtype=np.float64))[0])


# -- loss -------------------------------------------------------------------

def bce_with_logits(logit: np.ndarray, target: np.ndarray) -> float:
    """Mean binary cross-entropy of sigmoid(logit) against soft targets."""
    return float(np.mean(np.logaddexp(0.0, logit) - target * logit))


def kl_standard_normal(mu: np.ndarray, lv: np.ndarray) -> float:
    return float(0.5 * np.mean(mu ** 2 + np.exp(lv) - 1.0 - lv))


@dataclass
class LossWeights:
    bce: float = 1e-3
    mse: float = 1e-5
    kl: float = 1e-6


@dataclass
class VAEBatch:
    geom: np.ndarray  # (B, N_g, c_geom)
    phys: np.ndarray  # (B, N_p, c_phys)
    points: np.ndarray  # (B, Q, 3)
    occupancy: np.ndarray  # (B, Q) in [0, 1]
    field: np.ndarray  # (B, Q, C), normalized units


def latent_loss(model: PGVAE, mu, lv, xi, points, occupancy, fld, w: LossWeights, grad: bool = True):
    """Loss given posterior parameters; returns (terms, dmu, dlv) and fills decoder/head grads."""
    if occupancy.min() < 0 or occupancy.max() > 1:
        raise DataError("occupancy targets must lie in [0, 1]")
    sigma = np.exp(0.5 * lv)
    z = mu + sigma * xi
    planes, cd = model.decoder.forward(z)
    feat, ct = triplane_forward(planes, points)
    (lg, f), ch = model.heads.forward(feat)
    bce = bce_with_logits(lg, occupancy)
    mse = float(np.mean((f - fld) ** 2))
    kl = kl_standard_normal(mu, lv)
    total = w.bce * bce + w.mse * mse + w.kl * kl
    terms = {"total": total, "bce": bce, "mse": mse, "kl": kl}
    if not grad:
        return terms, None, None
    dlg = w.bce * (expit(lg) - occupancy) / lg.size
    df = w.mse * 2.0 * (f - fld) / f.size
    dfeat = model.heads.backward(ch, dlg, df)
    dplanes, _ = triplane_backward(planes, ct, dfeat)
    dz = model.decoder.backward(cd, dplanes)
    n = mu.size
    dmu = dz + w.kl * mu / n
    dlv = dz * xi * 0.5 * sigma + w.kl * 0.5 * (np.exp(lv) - 1.0) / n
    return terms, dmu, dlv


def vae_loss(batch: VAEBatch, model: PGVAE, w: LossWeights | None = None, xi: np.ndarray | None = None,
             rng: np.random.Generator | None = None, grad: bool = False) -> dict[str, float]:
    """Weighted BCE + MSE + KL on one batch; with ``grad`` the model grads are accumulated."""
    w = w or LossWeights()
    (mu, lv), ce = model.encode_features(batch.geom, batch.phys)
    if xi is None:
        xi = np.zeros_like(mu) if rng is None else rng.normal(size=mu.shape)
    terms, dmu, dlv = latent_loss(model, mu, lv, xi, batch.points, batch.occupancy, batch.field, w, grad)
    if grad:
        model.encode_backward(ce, dmu, dlv)
    return terms


# -- training -----------------------------------------------------------------

@dataclass
class ShapePool:
    """Precomputed surface samples and supervision points for one training shape."""

    record: ShapeRecord
    surface: PointSamples
    supervision: Supervision


def build_pools(records: list[ShapeRecord], tcfg: VAETrainConfig, h: float, rng: np.random.Generator) -> list[ShapePool]:
    return [ShapePool(r, surface_samples(r, tcfg.n_surface, rng),
                      make_supervision(r, tcfg.n_supervision, h, rng, tcfg.near_fraction)) for r in records]


def make_batch(pools: list[ShapePool], idx, model: PGVAE, tcfg: VAETrainConfig, rng: np.random.Generator) -> VAEBatch:
    cfg = model.cfg
    geom, phys, pts, occ, fld = [], [], [], [], []
    for i in idx:
        pool = pools[i]
        n_s = len(pool.surface)
        geom.append(geometry_features(pool.surface.subset(rng.choice(n_s, cfg.n_geom, replace=n_s < cfg.n_geom)),
                                      cfg.bands))
        phys.append(physics_features(pool.surface.subset(rng.choice(n_s, cfg.n_phys, replace=n_s < cfg.n_phys)),
                                     cfg.bands, model.field_shift, model.field_scale))
        sup = pool.supervision
        n_q = len(sup.points)
        q = rng.choice(n_q, tcfg.n_query, replace=n_q < tcfg.n_query)
        pts.append(sup.points[q])
        occ.append(sup.occupancy[q])
        fld.append((sup.field[q] - model.field_shift) / model.field_scale)
    return VAEBatch(np.stack(geom), np.stack(phys), np.stack(pts), np.stack(occ), np.stack(fld))


def fit_field_normalizer(model: PGVAE, records: list[ShapeRecord]) -> None:
    values = np.concatenate([r.field for r in records])
    model.heads.field_shift[...] = values.mean()
    model.heads.field_scale[...] = max(values.std(), 1e-8)


def train_vae(records: list[ShapeRecord], cfg: VAEConfig, tcfg: VAETrainConfig, seed: int,
              checkpoint_path: Path | None = None) -> tuple[PGVAE, list[dict]]:
    """AdamW + cosine training; returns the model and the per-step loss curve."""
    model = PGVAE(cfg, make_rng(seed, "vae", "init"))
    if tcfg.steps == 0:
        return model, []
    rng = make_rng(seed, "vae", "data")
    fit_field_normalizer(model, records)
    pools = build_pools(records, tcfg, band_halfwidth(cfg), rng)
    opt = AdamW(model, lr=tcfg.lr, weight_decay=tcfg.weight_decay, total_steps=tcfg.steps, min_lr=tcfg.min_lr)
    w = LossWeights(tcfg.w_bce, tcfg.w_mse, tcfg.w_kl)
    history = []
    for step in range(tcfg.steps):
        idx = rng.choice(len(pools), tcfg.batch, replace=len(pools) < tcfg.batch)
        batch = make_batch(pools, idx, model, tcfg, rng)
        model.zero_grad()
        terms = vae_loss(batch, model, w, rng=rng, grad=True)
        if not np.isfinite(terms["total"]):
            raise NumericalError(f"VAE loss became non-finite at step {step}; last checkpoint retained")
        terms["lr"] = opt.step()
        history.append(terms)
        if tcfg.log_every and step % tcfg.log_every == 0:
            log.info("vae step %d loss %.4g bce %.4f mse %.4f kl %.3g", step, terms["total"], terms["bce"],
                     terms["mse"], terms["kl"])
        if checkpoint_path and tcfg.checkpoint_every and (step + 1) % tcfg.checkpoint_every == 0:
            save_vae(checkpoint_path, model, {"step": step + 1})
    return model, history


def band_halfwidth(cfg: VAEConfig) -> float:
    return 2.0 / cfg.resolution


# -- evaluation -------------------------------------------------------------------

def encode_record(model: PGVAE, record: ShapeRecord, seed: int = 0,
                  sample_rng: np.random.Generator | None = None) -> np.ndarray:
    """Posterior mean for a shape from a fixed-seed surface sample; a posterior draw if ``sample_rng`` is given."""
    rng = make_rng(seed, "encode", record.index)
    cfg = model.cfg
    s = surface_samples(record, max(cfg.n_geom, cfg.n_phys), rng)
    z, mu, _ = encode(s.subset(slice(0, cfg.n_geom)), s.subset(slice(0, cfg.n_phys)), cfg, model, sample_rng)
    return mu if sample_rng is None else z


def occupancy_iou(model: PGVAE, record: ShapeRecord, grid: int = 32, seed: int = 0) -> float:
    tp = decode_to_triplane(encode_record(model, record, seed), model)
    pred = occupancy_grid(tp, model.heads, grid) > 0.5
    truth = inside_grid(record.mesh, grid)
    union = (pred | truth).sum()
    return float((pred & truth).sum() / union) if union else 1.0


def field_error(model: PGVAE, record: ShapeRecord, n: int = 2048, seed: int = 0) -> tuple[float, float]:
    """(MSE, variance) of the decoded field at surface samples, physical units."""
    tp = decode_to_triplane(encode_record(model, record, seed), model)
    s = surface_samples(record, n, make_rng(seed, "field-eval", record.index))
    feat = triplane_forward(tp.planes[None], s.positions[None])[0][0]
    (_, f), _ = model.heads.forward(feat)
    pred = model.field_shift + model.field_scale * f
    return float(np.mean((pred - s.values) ** 2)), float(np.var(s.values))


# -- persistence ------------------------------------------------------------------

def save_vae(path: Path, model: PGVAE, extra: dict | None = None) -> None:
    cfg = asdict(model.cfg)
    cfg["channels"] = list(cfg["channels"])
    tensors = model.state_dict()
    tensors["heads.field_shift"] = model.field_shift.copy()
    tensors["heads.field_scale"] = model.field_scale.copy()
    save_checkpoint(path, tensors, {"kind": "pgvae", "config": cfg, **(extra or {})})


def load_vae(path: Path) -> PGVAE:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "pgvae":
        raise DataError(f"{path} is not a VAE checkpoint")
    model = PGVAE(VAEConfig(**meta["config"]), make_rng(0))
    model.load_state_dict(tensors)
    model.heads.field_shift[...] = tensors["heads.field_shift"]
    model.heads.field_scale[...] = tensors["heads.field_scale"]
    return model
