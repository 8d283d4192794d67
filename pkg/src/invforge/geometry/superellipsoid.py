"""Superellipsoid shape family used as the synthetic design dataset."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import beta

from ..errors import ConfigError
from .mesh import Mesh, orient_outward


@dataclass
class SuperellipsoidSpec:
    a: float
    b: float
    c: float
    e1: float = 1.0  # latitude (z) exponent
    e2: float = 1.0  # longitude (xy) exponent
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        if min(self.a, self.b, self.c) <= 0:
            raise ConfigError("superellipsoid semi-axes must be positive")
        if not (0.3 <= self.e1 <= 2.0 and 0.3 <= self.e2 <= 2.0):
            raise ConfigError("superellipsoid exponents must lie in [0.3, 2.0]")
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "c": self.c, "e1": self.e1, "e2": self.e2,
                "rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SuperellipsoidSpec":
        return cls(**d)


def _spow(x, e):
    return np.sign(x) * np.abs(x) ** e


def make_superellipsoid(spec: SuperellipsoidSpec, resolution: int = 64) -> Mesh:
    """Closed lat-long tessellation: ``resolution`` rings of ``resolution`` vertices plus two poles."""
    if resolution < 8:
        raise ConfigError("resolution must be at least 8")
    n = resolution
    eta = -np.pi / 2 + np.pi * np.arange(1, n + 1) / (n + 1)
    omega = -np.pi + 2 * np.pi * np.arange(n) / n
    ce, se = np.cos(eta)[:, None], np.sin(eta)[:, None]
    cw, sw = np.cos(omega)[None], np.sin(omega)[None]
    x = spec.a * _spow(ce, spec.e1) * _spow(cw, spec.e2)
    y = spec.b * _spow(ce, spec.e1) * _spow(sw, spec.e2)
    z = spec.c * _spow(se, spec.e1) * np.ones_like(cw)
    ring = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    south, north = n * n, n * n + 1
    verts = np.vstack([ring, [0.0, 0.0, -spec.c], [0.0, 0.0, spec.c]])

    idx = np.arange(n * n).reshape(n, n)
    nxt = np.roll(idx, -1, axis=1)
    a, b = idx[:-1], nxt[:-1]
    c, d = nxt[1:], idx[1:]
    quads = np.concatenate([
        np.stack([a, b, c], -1).reshape(-1, 3),
        np.stack([a, c, d], -1).reshape(-1, 3),
    ])
    bottom = np.stack([np.full(n, south), nxt[0], idx[0]], -1)
    top = np.stack([np.full(n, north), idx[-1], nxt[-1]], -1)
    faces = np.concatenate([quads, bottom, top])

    verts = verts @ spec.rotation.T + spec.translation
    return orient_outward(Mesh(verts, faces))


def inside_function(spec: SuperellipsoidSpec, points: np.ndarray) -> np.ndarray:
    """Standard inside-outside function: < 1 inside, 1 on the surface, > 1 outside."""
    p = (np.asarray(points, float) - spec.translation) @ spec.rotation
    xy = np.abs(p[:, 0] / spec.a) ** (2 / spec.e2) + np.abs(p[:, 1] / spec.b) ** (2 / spec.e2)
    return xy ** (spec.e2 / spec.e1) + np.abs(p[:, 2] / spec.c) ** (2 / spec.e1)


def analytic_volume(spec: SuperellipsoidSpec) -> float:
    e1, e2 = spec.e1, spec.e2
    return float(2 * spec.a * spec.b * spec.c * e1 * e2 * beta(e1 / 2 + 1, e1) * beta(e2 / 2, e2 / 2))
