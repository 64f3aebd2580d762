"""Whole-scene segmentation by sliding-window inference with max-merge.

Windows of `window` pixels advance by `window - overlap`; when the last
regular offset leaves a remainder, one extra window is clamped flush to
the scene border (enlarging the local overlap) so every pixel is covered
by at least one window and every inference runs on real pixels.
Overlapping probabilities merge by pointwise maximum, which makes the
result independent of window processing order, and the final mask takes
pixels with probability >= threshold as cloud.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .errors import ConfigError, RangeError
from .network import Network, forward
from .raster import RasterScene, extract_patch

DEFAULT_WINDOW = 512
DEFAULT_OVERLAP = 50
DEFAULT_THRESHOLD = 0.5


@dataclass
class WindowPlan:
    window: int
    overlap: int
    x_offsets: list[int]
    y_offsets: list[int]
    offsets: list[tuple[int, int]]  # row-major: y outer, x inner

    @property
    def stride(self) -> int:
        return self.window - self.overlap


def _axis_offsets(dim: int, window: int, stride: int) -> list[int]:
    offsets = list(range(0, dim - window + 1, stride))
    if offsets[-1] != dim - window:
        offsets.append(dim - window)
    return offsets


def plan_windows(
    scene_w: int,
    scene_h: int,
    window: int = DEFAULT_WINDOW,
    overlap: int = DEFAULT_OVERLAP,
) -> WindowPlan:
    """Row-major grid of window origins covering the whole scene."""
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    if not 0 <= overlap < window:
        raise ConfigError(f"overlap must be in [0, window), got {overlap} for window {window}")
    if window > scene_w or window > scene_h:
        raise ConfigError(
            f"window {window} exceeds scene dims {scene_w}x{scene_h}"
        )
    stride = window - overlap
    xs = _axis_offsets(scene_w, window, stride)
    ys = _axis_offsets(scene_h, window, stride)
    return WindowPlan(
        window=window,
        overlap=overlap,
        x_offsets=xs,
        y_offsets=ys,
        offsets=[(x, y) for y in ys for x in xs],
    )


@dataclass
class ProbabilityCanvas:
    """Scene-sized max-merge accumulator with per-pixel coverage counts."""

    width: int
    height: int
    probs: np.ndarray = field(init=False)
    coverage: np.ndarray = field(init=False)

    def __post_init__(self):
        self.probs = np.zeros((self.height, self.width), dtype=np.float32)
        self.coverage = np.zeros((self.height, self.width), dtype=np.uint32)


def merge_window(canvas: ProbabilityCanvas, probs: np.ndarray, offset: tuple[int, int]) -> None:
    """Max-merge one window of probabilities at (x, y) into the canvas."""
    x, y = offset
    wh, ww = probs.shape
    if x < 0 or y < 0 or x + ww > canvas.width or y + wh > canvas.height:
        raise RangeError(
            f"window {ww}x{wh} at ({x}, {y}) outside canvas "
            f"{canvas.width}x{canvas.height}"
        )
    region = canvas.probs[y : y + wh, x : x + ww]
    np.maximum(region, probs, out=region)
    canvas.coverage[y : y + wh, x : x + ww] += 1


def segment_scene(
    scene: RasterScene,
    net: Network,
    window: int = DEFAULT_WINDOW,
    overlap: int = DEFAULT_OVERLAP,
    threshold: float = DEFAULT_THRESHOLD,
    threads: int = 1,
    return_canvas: bool = False,
):
    """Segment a 4-band scene into a binary {0, 255} cloud mask.

    Runs the network over every planned window (optionally with a worker
    pool; max-merge makes any completion order equivalent), then thresholds
    the merged probability canvas (>= threshold is cloud). Returns the mask
    scene, or (mask, canvas) when `return_canvas` is set.
    """
    if scene.bands != 4:
        raise ConfigError(f"segmentation needs a 4-band scene, got {scene.bands}")
    if net.mode != "inference":
        raise ConfigError("segmentation requires the network in inference mode")
    stride16 = net.config.plan().total_downstride
    if window % stride16 != 0:
        raise ConfigError(
            f"window {window} must be a multiple of the encoder stride {stride16}"
        )
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")
    plan = plan_windows(scene.width, scene.height, window, overlap)
    canvas = ProbabilityCanvas(width=scene.width, height=scene.height)

    def infer(offset: tuple[int, int]) -> np.ndarray:
        x, y = offset
        try:
            patch = extract_patch(scene, x, y, window)
            with no_grad():
                out = forward(net, Tensor(patch.pixels[None]))
            return out.data[0, 0]
        except Exception as e:
            raise RuntimeError(f"window at offset ({x}, {y}) failed: {e}") from e

    if threads == 1:
        for offset in plan.offsets:
            merge_window(canvas, infer(offset), offset)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for offset, probs in zip(plan.offsets, pool.map(infer, plan.offsets)):
                merge_window(canvas, probs, offset)

    mask_data = np.where(canvas.probs >= threshold, 255, 0).astype(np.uint8)[None]
    mask = RasterScene(
        width=scene.width, height=scene.height, bands=1,
        data=mask_data, tag="cloud-mask",
    )
    if return_canvas:
        return mask, canvas
    return mask
