"""Procedural 4-band scenes with ground-truth cloud masks.

Scenes are u16 reflectance counts (1/10000 scale): a terrain background
(flat, gradient, or speckle) with soft-edged elliptical cloud blobs that
are bright in all four bands. The mask marks pixels whose blob alpha is
>= 0.5. Everything is a pure function of (seed, index), so corpora are
reproducible scene by scene and safely generated in parallel.

Cloud brightness is constrained to sit strictly above the background range
in every band, which guarantees the segmentation task is learnable (a
plain per-band threshold already separates the classes away from blob
edges).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GenerationError
from .raster import RasterScene, write_msr

N_BANDS = 4


@dataclass
class SynthConfig:
    seed: int = 0
    width: int = 512
    height: int = 512
    blob_count: tuple[int, int] = (2, 8)
    blob_radius: tuple[float, float] = (30.0, 120.0)
    cloud_brightness: tuple[int, int] = (6500, 9500)
    background_level: tuple[int, int] = (500, 3500)
    terrain: str = "speckle"  # flat | gradient | speckle
    cloud_fraction: tuple[float, float] = (0.0, 0.75)
    edge_softness: float = 0.35
    max_attempts: int = 25

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"scene dims must be >= 1, got {self.width}x{self.height}")
        if self.terrain not in ("flat", "gradient", "speckle"):
            raise ConfigError(f"unknown terrain model {self.terrain!r}")
        if self.blob_count[0] < 0 or self.blob_count[0] > self.blob_count[1]:
            raise ConfigError(f"bad blob count range {self.blob_count}")
        if self.blob_radius[0] < 1 or self.blob_radius[0] > self.blob_radius[1]:
            raise ConfigError(f"bad blob radius range {self.blob_radius}")
        if self.cloud_brightness[0] <= self.background_level[1]:
            raise ConfigError(
                "cloud brightness range must sit strictly above the background range "
                f"(got cloud {self.cloud_brightness}, background {self.background_level})"
            )
        lo, hi = self.cloud_fraction
        if not (0.0 <= lo <= hi < 1.0):
            raise ConfigError(f"cloud fraction range must be within [0, 1), got {self.cloud_fraction}")
        if not 0.0 < self.edge_softness <= 1.0:
            raise ConfigError(f"edge softness must be in (0, 1], got {self.edge_softness}")
        if self.max_attempts < 1:
            raise ConfigError(f"max_attempts must be >= 1, got {self.max_attempts}")

    @classmethod
    def for_size(cls, width: int, height: int, seed: int = 0, **overrides) -> "SynthConfig":
        """Defaults with blob radii scaled to the scene size."""
        r = max(4.0, 0.09 * min(width, height))
        params = dict(
            seed=seed, width=width, height=height,
            blob_radius=(r, 3.0 * r),
        )
        params.update(overrides)
        return cls(**params)


def _background(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    lo, hi = cfg.background_level
    h, w = cfg.height, cfg.width
    if cfg.terrain == "flat":
        levels = rng.uniform(lo, hi, size=N_BANDS)
        return np.broadcast_to(levels[:, None, None], (N_BANDS, h, w)).astype(np.float64)
    if cfg.terrain == "gradient":
        l0 = rng.uniform(lo, hi, size=N_BANDS)
        l1 = rng.uniform(lo, hi, size=N_BANDS)
        theta = rng.uniform(0, 2 * np.pi)
        yy = np.arange(h, dtype=np.float64)[:, None]
        xx = np.arange(w, dtype=np.float64)[None, :]
        proj = np.cos(theta) * xx + np.sin(theta) * yy
        span = proj.max() - proj.min()
        t = (proj - proj.min()) / (span if span > 0 else 1.0)
        return l0[:, None, None] + (l1 - l0)[:, None, None] * t[None]
    # speckle
    base = rng.uniform(lo + (hi - lo) / 4, hi - (hi - lo) / 4, size=N_BANDS)
    noise = rng.normal(0.0, (hi - lo) / 10.0, size=(N_BANDS, h, w))
    return np.clip(base[:, None, None] + noise, lo, hi)


def _cloud_alpha(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Max-composited soft elliptical blobs; values in [0, 1]."""
    h, w = cfg.height, cfg.width
    alpha = np.zeros((h, w), dtype=np.float64)
    n_blobs = int(rng.integers(cfg.blob_count[0], cfg.blob_count[1] + 1))
    yy = np.arange(h, dtype=np.float64)[:, None]
    xx = np.arange(w, dtype=np.float64)[None, :]
    for _ in range(n_blobs):
        cx = rng.uniform(0, w)
        cy = rng.uniform(0, h)
        rx = rng.uniform(*cfg.blob_radius)
        ry = rng.uniform(*cfg.blob_radius)
        theta = rng.uniform(0, 2 * np.pi)
        dx = xx - cx
        dy = yy - cy
        u = (np.cos(theta) * dx + np.sin(theta) * dy) / rx
        v = (-np.sin(theta) * dx + np.cos(theta) * dy) / ry
        r = np.sqrt(u * u + v * v)
        blob = np.clip((1.0 - r) / cfg.edge_softness, 0.0, 1.0)
        np.maximum(alpha, blob, out=alpha)
    return alpha


def generate_scene(cfg: SynthConfig, index: int) -> tuple[RasterScene, RasterScene]:
    """One (4-band u16 scene, binary u8 mask) pair for (cfg.seed, index)."""
    if index < 0:
        raise ConfigError(f"scene index must be >= 0, got {index}")
    rng = np.random.default_rng((cfg.seed, index))
    background = _background(cfg, rng)
    lo, hi = cfg.cloud_fraction
    for _ in range(cfg.max_attempts):
        alpha = _cloud_alpha(cfg, rng)
        mask = alpha >= 0.5
        fraction = float(mask.mean(dtype=np.float64))
        if lo <= fraction <= hi:
            break
    else:
        raise GenerationError(
            f"could not hit cloud fraction [{lo}, {hi}] for scene {index} "
            f"after {cfg.max_attempts} attempts (last fraction {fraction:.4f})"
        )
    c_lo, c_hi = cfg.cloud_brightness
    color = rng.uniform(c_lo + (c_hi - c_lo) / 4, c_hi - (c_hi - c_lo) / 4, size=N_BANDS)
    texture = rng.normal(0.0, (c_hi - c_lo) / 12.0, size=(cfg.height, cfg.width))
    cloud = np.clip(color[:, None, None] + texture[None], c_lo, c_hi)
    values = background * (1.0 - alpha[None]) + cloud * alpha[None]
    scene = RasterScene(
        width=cfg.width, height=cfg.height, bands=N_BANDS,
        data=np.clip(np.rint(values), 0, 65535).astype(np.uint16),
        tag=f"synth:{cfg.seed}:{index}",
    )
    mask_scene = RasterScene(
        width=cfg.width, height=cfg.height, bands=1,
        data=np.where(mask, 255, 0).astype(np.uint8)[None],
        tag=f"synth-mask:{cfg.seed}:{index}",
    )
    return scene, mask_scene


def generate_corpus(
    cfg: SynthConfig,
    n_scenes: int,
    out_dir,
    threads: int = 1,
) -> list[tuple[str, str, float]]:
    """Write `n_scenes` scene/mask MSR pairs plus manifest.txt to `out_dir`.

    Returns the manifest entries (relative scene path, relative mask path,
    cloud fraction). Output is bytewise independent of `threads`.
    """
    if n_scenes < 0:
        raise ConfigError(f"n_scenes must be >= 0, got {n_scenes}")
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")
    os.makedirs(out_dir, exist_ok=True)

    def build(index: int) -> tuple[str, str, float]:
        scene, mask = generate_scene(cfg, index)
        scene_name = f"scene_{index:04d}.msr"
        mask_name = f"mask_{index:04d}.msr"
        write_msr(scene, os.path.join(out_dir, scene_name))
        write_msr(mask, os.path.join(out_dir, mask_name))
        fraction = float(np.count_nonzero(mask.data) / mask.data.size)
        return scene_name, mask_name, fraction

    if threads == 1:
        entries = [build(i) for i in range(n_scenes)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            entries = list(pool.map(build, range(n_scenes)))

    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        for scene_name, mask_name, fraction in entries:
            fh.write(f"{scene_name},{mask_name},{fraction!r}\n")
    return entries
