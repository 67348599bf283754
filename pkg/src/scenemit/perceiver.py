"""Scene and object featurizers plus the trainable attribute encoder and projectors.

The featurizers are frozen, deterministic statistics of the point cloud. The
trainable part (attribute encoder, scene/object projectors and the projector
into the language model width) lives in :class:`Perceiver`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .scene import ObjectAttributes, ScenePointCloud, SegmentedObject, compute_attributes, segment_objects

__all__ = [
    "SCENE_FEATURE_DIM",
    "OBJECT_FEATURE_DIM",
    "PerceiverConfig",
    "Perceiver",
    "SceneFeatures",
    "encode_attributes",
    "encode_position",
    "featurize_scene",
    "object_featurizer",
    "perceive_scene",
    "project_object",
    "project_scene",
    "project_to_lm",
    "scene_featurizer",
]

SCENE_FEATURE_DIM = 256
OBJECT_FEATURE_DIM = 256

# Scene block layout: 18 frequencies x 3 axes x (sin, cos) x (mean, max) = 216,
# 8-bin histograms for r, g, b = 24, AABB center/size = 6,
# log point count + color mean/std + coordinate std = 10.
_SCENE_FREQS = 2.0 ** np.linspace(-3.0, 3.0, 18)
# Object block layout: 14 x 3 x 2 x 2 = 168, 4x4x4 occupancy = 64, marginal histograms 3 x 8 = 24.
_OBJECT_FREQS = np.pi * 2.0 ** np.arange(14, dtype=np.float64) / 8.0


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PerceiverConfig:
    d_pos_per_axis: int = 16
    d_q: int = 8
    d_c: int = 8
    d_feat: int = 256
    d_model: int = 128
    n_freq: int = 8
    mlp_hidden: int = 256
    d_scene: int = SCENE_FEATURE_DIM
    d_object: int = OBJECT_FEATURE_DIM
    seed: int = 0

    def __post_init__(self):
        if self.d_pos_per_axis != 2 * self.n_freq:
            raise ConfigError("d_pos_per_axis must equal 2 * n_freq")
        for name in ("d_q", "d_c", "d_feat", "d_model", "n_freq", "mlp_hidden"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def d_pos(self) -> int:
        return 3 * 2 * self.n_freq

    @property
    def d_attr(self) -> int:
        return self.d_pos + self.d_q + self.d_c

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Frozen featurizers


def _canonical(points: np.ndarray) -> np.ndarray:
    # Lexicographic row order so that pooled sums do not depend on input order.
    order = np.lexsort(points.T[::-1])
    return points[order]


def _fourier_pool(xyz: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    phase = xyz[:, :, None] * freqs[None, None, :]  # (N, 3, F)
    feats = np.concatenate([np.sin(phase), np.cos(phase)], axis=2).reshape(len(xyz), -1)
    return np.concatenate([feats.mean(axis=0), feats.max(axis=0)])


def _histogram(values: np.ndarray, bins: int = 8) -> np.ndarray:
    idx = np.clip((values * bins).astype(np.int64), 0, bins - 1)
    return np.bincount(idx, minlength=bins).astype(np.float64) / len(values)


def scene_featurizer(scene: ScenePointCloud) -> np.ndarray:
    """Fixed 256-d descriptor of the whole scene (labels are ignored)."""
    pts = _canonical(scene.points)
    xyz, rgb = pts[:, :3], pts[:, 3:]
    lo, hi = xyz.min(axis=0), xyz.max(axis=0)
    parts = [
        _fourier_pool(xyz, _SCENE_FREQS),
        *(_histogram(rgb[:, c]) for c in range(3)),
        (lo + hi) / 2,
        hi - lo,
        [np.log1p(len(pts))],
        rgb.mean(axis=0),
        rgb.std(axis=0),
        xyz.std(axis=0),
    ]
    out = np.concatenate([np.ravel(p) for p in parts])
    assert out.shape == (SCENE_FEATURE_DIM,)
    return out


def object_featurizer(obj: SegmentedObject) -> np.ndarray:
    """Fixed 256-d shape descriptor over coordinates normalized to the object's own AABB."""
    xyz = obj.points[:, :3]
    lo, hi = xyz.min(axis=0), xyz.max(axis=0)
    ext = hi - lo
    safe = np.where(ext > 0, ext, 1.0)
    unit = np.where(ext > 0, (xyz - lo) / safe, 0.5)
    unit = _canonical(unit)
    cells = np.clip((unit * 4).astype(np.int64), 0, 3)
    flat = cells[:, 0] * 16 + cells[:, 1] * 4 + cells[:, 2]
    occupancy = np.bincount(flat, minlength=64).astype(np.float64) / len(unit)
    parts = [
        _fourier_pool(unit, _OBJECT_FREQS),
        occupancy,
        *(_histogram(unit[:, a]) for a in range(3)),
    ]
    out = np.concatenate(parts)
    assert out.shape == (OBJECT_FEATURE_DIM,)
    return out


def encode_position(center, n_freq: int = 8, base: float = 10000.0) -> np.ndarray:
    """Sinusoidal encoding of a 3D coordinate: per axis, interleaved ``sin, cos`` pairs."""
    c = np.asarray(center, dtype=np.float64)
    if c.shape != (3,) or not np.all(np.isfinite(c)):
        raise ValueError("center must be three finite numbers")
    omega = base ** (-np.arange(n_freq) / n_freq)
    phase = c[:, None] * omega[None, :]
    return np.stack([np.sin(phase), np.cos(phase)], axis=2).reshape(-1)


# ---------------------------------------------------------------------------
# Trainable modules


class AttributeEncoder(nn.Module):
    def __init__(self, cfg: PerceiverConfig):
        super().__init__()
        self.n_freq = cfg.n_freq
        self.size_proj = nn.Linear(3, cfg.d_q)
        self.color_proj = nn.Linear(3, cfg.d_c)

    def forward(self, pos_enc: torch.Tensor, size: torch.Tensor, color: torch.Tensor) -> torch.Tensor:
        return torch.cat([pos_enc, self.size_proj(size), self.color_proj(color)], dim=-1)


class SceneProjector(nn.Module):
    def __init__(self, cfg: PerceiverConfig):
        super().__init__()
        self.linear = nn.Linear(cfg.d_scene, cfg.d_feat)
        self.norm = nn.LayerNorm(cfg.d_feat)

    def forward(self, fs: torch.Tensor) -> torch.Tensor:
        return self.norm(self.linear(fs))


class ObjectProjector(nn.Module):
    def __init__(self, cfg: PerceiverConfig):
        super().__init__()
        d_in = cfg.d_object + cfg.d_attr
        self.norm = nn.LayerNorm(d_in)
        self.mlp = nn.Sequential(
            nn.Linear(d_in, cfg.mlp_hidden),
            nn.GELU(),
            nn.Linear(cfg.mlp_hidden, cfg.mlp_hidden),
            nn.GELU(),
            nn.Linear(cfg.mlp_hidden, cfg.d_feat),
        )

    def forward(self, fo: torch.Tensor, fa: torch.Tensor) -> torch.Tensor:
        return self.mlp(self.norm(torch.cat([fo, fa], dim=-1)))


class Perceiver(nn.Module):
    """All trainable perceiver weights: attribute encoder, Ps, Po and the LM projector."""

    def __init__(self, cfg: PerceiverConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or PerceiverConfig()
        gen = torch.random.fork_rng(devices=[])
        with gen:
            torch.manual_seed(cfg.seed)
            self.attr_encoder = AttributeEncoder(cfg)
            self.scene_proj = SceneProjector(cfg)
            self.object_proj = ObjectProjector(cfg)
            self.lm_proj = nn.Linear(cfg.d_feat, cfg.d_model)

    def forward(self, feats: "SceneFeatures") -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(Fs, Fo)`` with shapes ``(d_model,)`` and ``(n_objects, d_model)``."""
        p = next(self.parameters())
        as_t = lambda a: torch.as_tensor(a, dtype=p.dtype, device=p.device)  # noqa: E731
        fs_prime = self.scene_proj(as_t(feats.scene))
        Fs = self.lm_proj(fs_prime)
        if feats.n_objects == 0:
            return Fs, Fs.new_zeros((0, self.cfg.d_model))
        fa = self.attr_encoder(as_t(feats.positions), as_t(feats.sizes), as_t(feats.colors))
        fo_prime = self.object_proj(as_t(feats.objects), fa)
        return Fs, self.lm_proj(fo_prime)


@dataclass(frozen=True)
class SceneFeatures:
    """Frozen per-scene inputs to the perceiver, computed once and cached."""

    scene_id: str
    scene: np.ndarray
    objects: np.ndarray  # (n, d_object)
    positions: np.ndarray  # (n, d_pos) sinusoidal encodings of object centers
    sizes: np.ndarray  # (n, 3)
    colors: np.ndarray  # (n, 3)
    object_ids: tuple[int, ...]

    @property
    def n_objects(self) -> int:
        return len(self.object_ids)


def featurize_scene(scene: ScenePointCloud, cfg: PerceiverConfig | None = None) -> SceneFeatures:
    cfg = cfg or PerceiverConfig()
    objs = segment_objects(scene)
    attrs = [compute_attributes(o) for o in objs]
    n = len(objs)
    return SceneFeatures(
        scene_id=scene.scene_id,
        scene=scene_featurizer(scene),
        objects=np.stack([object_featurizer(o) for o in objs]) if n else np.zeros((0, cfg.d_object)),
        positions=np.stack([encode_position(a.center, cfg.n_freq) for a in attrs]) if n else np.zeros((0, cfg.d_pos)),
        sizes=np.array([a.size for a in attrs]).reshape(n, 3),
        colors=np.array([a.mean_color for a in attrs]).reshape(n, 3),
        object_ids=tuple(o.object_id for o in objs),
    )


# ---------------------------------------------------------------------------
# Functional surface over a Perceiver's weights


def _tensor(x, like: nn.Module) -> torch.Tensor:
    p = next(like.parameters())
    return torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x, dtype=p.dtype)


def _check_dim(x: torch.Tensor, expected: int, what: str):
    if x.shape[-1] != expected:
        raise ConfigError(f"{what}: expected dim {expected}, got {x.shape[-1]}")


def encode_attributes(attrs: ObjectAttributes, params: Perceiver) -> torch.Tensor:
    """``fa = [fp, fq, fc]``: position encoding of the center, then size and color maps."""
    cfg = params.cfg
    enc = params.attr_encoder
    if enc.size_proj.in_features != 3 or enc.color_proj.in_features != 3:
        raise ConfigError("attribute encoder must map 3-vectors")
    fp = _tensor(encode_position(attrs.center, cfg.n_freq), params)
    _check_dim(fp, cfg.d_pos, "position encoding")
    return enc(fp, _tensor(attrs.size, params), _tensor(attrs.mean_color, params))


def project_scene(fs, params: Perceiver) -> torch.Tensor:
    fs = _tensor(fs, params)
    _check_dim(fs, params.scene_proj.linear.in_features, "scene feature")
    return params.scene_proj(fs)


def project_object(fo, fa, params: Perceiver) -> torch.Tensor:
    fo, fa = _tensor(fo, params), _tensor(fa, params)
    _check_dim(fo, params.cfg.d_object, "object feature")
    _check_dim(fa, params.cfg.d_attr, "attribute feature")
    return params.object_proj(fo, fa)


def project_to_lm(f, params: Perceiver) -> torch.Tensor:
    f = _tensor(f, params)
    _check_dim(f, params.lm_proj.in_features, "projected feature")
    return params.lm_proj(f)


def perceive_scene(
    scene: ScenePointCloud, config: PerceiverConfig, params: Perceiver
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    Fs, Fo = params(featurize_scene(scene, config))
    return Fs, list(Fo)
