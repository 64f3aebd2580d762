"""Patch dataset handling: 8-way augmentation, split bookkeeping, corpus IO.

Augmentation index convention (fixed so tests are deterministic): variants
0-3 are counter-clockwise rotations by 0/90/180/270 degrees; variants 4-7
are the same rotations followed by a horizontal flip. Masks always receive
the identical transform. Augmented patch ids are `source_id * 8 + variant`,
so all eight variants of a source inherit its split by construction.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .raster import normalize_reflectance, read_msr

N_AUGMENTS = 8


def augment_arrays(arr: np.ndarray, variant: int) -> np.ndarray:
    """Apply augmentation `variant` (0-7) to the last two (row, col) axes."""
    if not 0 <= variant < N_AUGMENTS:
        raise ConfigError(f"augmentation variant must be in [0, 8), got {variant}")
    out = np.rot90(arr, k=variant % 4, axes=(-2, -1))
    if variant >= 4:
        out = np.flip(out, axis=-1)
    return np.ascontiguousarray(out)


def augment_patch(pixels: np.ndarray, mask: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """All 8 (patch, mask) variants; pair 0 is the untouched original."""
    if pixels.shape[-2] != pixels.shape[-1]:
        raise ShapeError(f"augmentation needs square patches, got {pixels.shape}")
    if pixels.shape[-2:] != mask.shape[-2:]:
        raise ShapeError(
            f"mask size {mask.shape[-2:]} != patch size {pixels.shape[-2:]}"
        )
    return [(augment_arrays(pixels, k), augment_arrays(mask, k)) for k in range(N_AUGMENTS)]


@dataclass
class DatasetSplit:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    ratios: tuple[float, float, float]
    seed: int

    def source_ids(self, name: str) -> np.ndarray:
        try:
            return {"train": self.train, "val": self.validation,
                    "validation": self.validation, "test": self.test}[name]
        except KeyError:
            raise ConfigError(f"unknown split {name!r}") from None

    def augmented_ids(self, name: str) -> np.ndarray:
        src = self.source_ids(name)
        return (src[:, None] * N_AUGMENTS + np.arange(N_AUGMENTS)[None, :]).reshape(-1)


def split_dataset(
    n_sources: int,
    ratios: tuple[float, float, float] = (0.90, 0.05, 0.05),
    seed: int = 0,
) -> DatasetSplit:
    """Seeded shuffle of source ids, then a contiguous 3-way cut."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    if n_sources < 0:
        raise ConfigError(f"n_sources must be >= 0, got {n_sources}")
    perm = np.random.default_rng(seed).permutation(n_sources)
    n_train = int(round(ratios[0] * n_sources))
    n_val = int(round(ratios[1] * n_sources))
    n_train = min(n_train, n_sources)
    n_val = min(n_val, n_sources - n_train)
    return DatasetSplit(
        train=perm[:n_train],
        validation=perm[n_train : n_train + n_val],
        test=perm[n_train + n_val :],
        ratios=ratios,
        seed=seed,
    )


@dataclass
class PatchSet:
    """In-memory source patches; augmented variants materialize on demand."""

    x: np.ndarray  # (n, 4, size, size) float32 reflectance
    y: np.ndarray  # (n, 1, size, size) float32 in {0, 1}

    @property
    def n_sources(self) -> int:
        return self.x.shape[0]

    @property
    def size(self) -> int:
        return self.x.shape[2]

    def augmented(self, aug_id: int) -> tuple[np.ndarray, np.ndarray]:
        source, variant = divmod(int(aug_id), N_AUGMENTS)
        return augment_arrays(self.x[source], variant), augment_arrays(self.y[source], variant)

    def batch(self, aug_ids) -> tuple[np.ndarray, np.ndarray]:
        pairs = [self.augmented(i) for i in aug_ids]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def read_manifest(data_dir) -> list[tuple[str, str, float]]:
    """Parse manifest.txt lines `scene_path,mask_path,cloud_fraction`."""
    path = os.path.join(data_dir, "manifest.txt")
    if not os.path.isfile(path):
        raise ConfigError(f"no manifest.txt in {data_dir}")
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ConfigError(f"{path}:{lineno}: expected 3 comma-separated fields")
            scene_rel, mask_rel, frac = parts
            entries.append((
                os.path.join(data_dir, scene_rel),
                os.path.join(data_dir, mask_rel),
                float(frac),
            ))
    return entries


def load_patch_corpus(data_dir) -> PatchSet:
    """Load every manifest entry as a (scene, mask) source-patch pair.

    All patches must be square, uniformly sized, and 4-band; masks must be
    binary single-band u8.
    """
    entries = read_manifest(data_dir)
    if not entries:
        raise ConfigError(f"manifest in {data_dir} lists no patches")
    xs, ys = [], []
    size = None
    for scene_path, mask_path, _ in entries:
        scene = read_msr(scene_path)
        mask = read_msr(mask_path)
        mask.validate_mask()
        if scene.bands != 4:
            raise ConfigError(f"{scene_path}: expected 4 bands, got {scene.bands}")
        if scene.width != scene.height:
            raise ConfigError(f"{scene_path}: patches must be square")
        if (mask.width, mask.height) != (scene.width, scene.height):
            raise ConfigError(f"{mask_path}: mask size differs from scene")
        if size is None:
            size = scene.width
        elif scene.width != size:
            raise ConfigError(
                f"{scene_path}: size {scene.width} differs from corpus size {size}"
            )
        xs.append(normalize_reflectance(scene.data))
        ys.append((mask.data > 127).astype(np.float32))
    return PatchSet(x=np.stack(xs), y=np.stack(ys))
