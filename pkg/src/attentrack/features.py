"""Shared per-frame feature maps and ROI pooling.

The frame is encoded once per frame by a pluggable backend into a
``FrameFeatureMap`` (a grid of C-dimensional cells at some pixel stride);
every target then pools its own fixed-size ``(H, W, C)`` tensor out of the
shared map.  Backends: precomputed binary files, orientation-binned image
gradients, or the simulator's synthetic renderer (see ``sim``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .core import TargetState

__all__ = [
    "FeatureGeometry",
    "FrameFeatureMap",
    "FeatureBackend",
    "PrecomputedBackend",
    "GradientHistogramBackend",
    "compute_frame_features",
    "roi_bins",
    "roi_pool",
    "roi_pool_many",
    "replace_region",
    "read_feature_map",
    "write_feature_map",
    "FEAT_MAGIC",
]

FEAT_MAGIC = 0x54414546  # b"FEAT" little-endian


@dataclass(frozen=True)
class FeatureGeometry:
    """Pooled tensor size: width x height cells, C channels."""

    width: int = 9
    height: int = 21
    channels: int = 64

    def __post_init__(self):
        if self.width < 7 or self.height < 3:
            raise ValueError(f"pooled size {self.width}x{self.height} cannot fit a 3x7 kernel")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")

    @property
    def cells(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class FrameFeatureMap:
    """Immutable per-frame feature grid; ``stride`` is pixels per cell."""

    data: np.ndarray  # (rows, cols, C) float64
    stride: float = 1.0

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError("feature map must be (rows, cols, channels)")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def channels(self) -> int:
        return self.data.shape[2]


class FeatureBackend:
    """Base class. Subclasses implement `_compute(frame) -> FrameFeatureMap`.

    ``calls`` counts feature-map computations so the once-per-frame sharing
    contract can be asserted.
    """

    channels: int

    def __init__(self):
        self.calls = 0

    def features(self, frame) -> FrameFeatureMap:
        self.calls += 1
        fmap = self._compute(frame)
        if fmap.channels != self.channels:
            raise ValueError(
                f"backend produced {fmap.channels} channels, declared {self.channels}"
            )
        return fmap

    def _compute(self, frame) -> FrameFeatureMap:
        raise NotImplementedError


def compute_frame_features(frame, backend: FeatureBackend) -> FrameFeatureMap:
    return backend.features(frame)


class PrecomputedBackend(FeatureBackend):
    """Loads one binary feature file per frame index from a directory."""

    def __init__(self, directory, channels: int, stride: float = 1.0):
        super().__init__()
        self.directory = Path(directory)
        self.channels = channels
        self.stride = stride

    def path_for(self, frame_index: int) -> Path:
        return self.directory / f"{frame_index:06d}.feat"

    def _compute(self, frame_index: int) -> FrameFeatureMap:
        path = self.path_for(int(frame_index))
        if not path.exists():
            raise FileNotFoundError(f"missing precomputed feature file {path}")
        return FrameFeatureMap(read_feature_map(path), stride=self.stride)


class GradientHistogramBackend(FeatureBackend):
    """Orientation-binned image gradient magnitudes, pooled into stride cells."""

    def __init__(self, channels: int, stride: int = 4):
        super().__init__()
        self.channels = channels
        self.stride = int(stride)

    def _compute(self, image: np.ndarray) -> FrameFeatureMap:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 3:
            img = img.mean(axis=2)
        rows, cols = img.shape
        gy, gx = np.gradient(img)
        mag = np.hypot(gx, gy)
        ori = np.mod(np.arctan2(gy, gx), np.pi)
        nbins = self.channels
        binned = np.minimum((ori / np.pi * nbins).astype(np.int64), nbins - 1)

        s = self.stride
        crows = -(-rows // s)
        ccols = -(-cols // s)
        # zero-pad partial border cells
        pm = np.zeros((crows * s, ccols * s))
        pb = np.zeros((crows * s, ccols * s), dtype=np.int64)
        pm[:rows, :cols] = mag
        pb[:rows, :cols] = binned
        out = np.zeros((crows, ccols, nbins))
        cell_r = (np.arange(crows * s) // s)[:, None]
        cell_c = (np.arange(ccols * s) // s)[None, :]
        np.add.at(out, (np.broadcast_to(cell_r, pm.shape).ravel(),
                        np.broadcast_to(cell_c, pm.shape).ravel(),
                        pb.ravel()), pm.ravel())
        return FrameFeatureMap(out, stride=float(s))


# ---------------------------------------------------------------------------
# ROI pooling
# ---------------------------------------------------------------------------

def roi_bins(boxes: np.ndarray, map_rows: int, map_cols: int, stride: float,
             geom: FeatureGeometry) -> np.ndarray:
    """Integer bin ranges per box: (K, 2*(H+W)) [rstart, rend, cstart, cend].

    Each box is split into H x W fractional strips in feature-cell
    coordinates; strip i covers cells [floor(edge_i), ceil(edge_{i+1})),
    clamped to the map. Bins that fall fully outside come out empty.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    k = boxes.shape[0]
    h, w = geom.height, geom.width
    top = (boxes[:, 1] - boxes[:, 3] / 2.0) / stride
    bot = (boxes[:, 1] + boxes[:, 3] / 2.0) / stride
    left = (boxes[:, 0] - boxes[:, 2] / 2.0) / stride
    right = (boxes[:, 0] + boxes[:, 2] / 2.0) / stride

    fr = np.linspace(0.0, 1.0, h + 1)
    fc = np.linspace(0.0, 1.0, w + 1)
    redges = top[:, None] + (bot - top)[:, None] * fr[None, :]
    cedges = left[:, None] + (right - left)[:, None] * fc[None, :]

    rstart = np.clip(np.floor(redges[:, :-1]), 0, map_rows).astype(np.int64)
    rend = np.clip(np.ceil(redges[:, 1:]), 0, map_rows).astype(np.int64)
    cstart = np.clip(np.floor(cedges[:, :-1]), 0, map_cols).astype(np.int64)
    cend = np.clip(np.ceil(cedges[:, 1:]), 0, map_cols).astype(np.int64)

    out = np.empty((k, 2 * (h + w)), dtype=np.int64)
    out[:, :h] = rstart
    out[:, h:2 * h] = rend
    out[:, 2 * h:2 * h + w] = cstart
    out[:, 2 * h + w:] = cend
    return out


def roi_pool_many(fmap: FrameFeatureMap, boxes: np.ndarray,
                  geom: FeatureGeometry) -> np.ndarray:
    """Pool a batch of [x, y, w, h] boxes into (K, H, W, C) tensors."""
    if fmap.channels != geom.channels:
        raise ValueError(f"map has {fmap.channels} channels, geometry wants {geom.channels}")
    rows, cols = fmap.data.shape[:2]
    bins = roi_bins(boxes, rows, cols, fmap.stride, geom)
    return kernels.roi_pool_batch(fmap.data, bins, geom.height, geom.width)


def roi_pool(fmap: FrameFeatureMap, box: TargetState, geom: FeatureGeometry) -> np.ndarray:
    """Pool one box into an (H, W, C) tensor; errors if the box misses the frame."""
    rows, cols = fmap.data.shape[:2]
    left = (box.x - box.w / 2.0) / fmap.stride
    right = (box.x + box.w / 2.0) / fmap.stride
    top = (box.y - box.h / 2.0) / fmap.stride
    bot = (box.y + box.h / 2.0) / fmap.stride
    if right <= 0 or left >= cols or bot <= 0 or top >= rows:
        raise ValueError(f"box {box} lies entirely outside the {rows}x{cols} map")
    return roi_pool_many(fmap, box.as_array()[None, :], geom)[0]


def replace_region(feat: np.ndarray, donor: np.ndarray,
                   region: tuple[int, int, int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Overwrite a rectangular cell range with donor features.

    ``region`` is (row0, row1, col0, col1), half-open. Returns the edited
    tensor and a (H, W) mask that is 1 where the original features survive
    and 0 inside the replaced (occluded) region.
    """
    if feat.shape != donor.shape:
        raise ValueError(f"donor shape {donor.shape} != feature shape {feat.shape}")
    h, w = feat.shape[:2]
    r0, r1, c0, c1 = region
    if not (0 <= r0 <= r1 <= h and 0 <= c0 <= c1 <= w):
        raise ValueError(f"region {region} out of bounds for {h}x{w} map")
    out = feat.copy()
    out[r0:r1, c0:c1, :] = donor[r0:r1, c0:c1, :]
    mask = np.ones((h, w))
    mask[r0:r1, c0:c1] = 0.0
    return out, mask


# ---------------------------------------------------------------------------
# binary feature-map files
# ---------------------------------------------------------------------------

def write_feature_map(path, data: np.ndarray) -> None:
    """Header: magic, width, height, channels as LE int32; payload: LE float32."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError("feature map must be 3-d (rows, cols, channels)")
    rows, cols, ch = data.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<4i", FEAT_MAGIC, cols, rows, ch))
        f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_feature_map(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16:
            raise ValueError(f"{path}: truncated feature header")
        magic, cols, rows, ch = struct.unpack("<4i", header)
        if magic != FEAT_MAGIC:
            raise ValueError(f"{path}: bad magic 0x{magic:08x}")
        payload = np.frombuffer(f.read(), dtype="<f4")
    if payload.size != rows * cols * ch:
        raise ValueError(f"{path}: payload has {payload.size} floats, expected {rows * cols * ch}")
    return payload.reshape(rows, cols, ch).astype(np.float64)
