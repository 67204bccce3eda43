"""UHR image loading, pixel cropping, and the three patch-division algorithms.

Division is a pure function of the image dimensions, so patch lists can be
computed (and tested) without pixel data. Loaded pixel buffers are marked
read-only, which makes concurrent cropping of one image safe.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .errors import BoundsError, DataError

logger = logging.getLogger(__name__)

# UHR inputs routinely exceed PIL's decompression-bomb default.
Image.MAX_IMAGE_PIXELS = None


class DivisionMethod(str, Enum):
    VIT = "vit"
    COMPLETE_COVER = "complete_cover"
    CASCADE_GRID = "cascade_grid"
    WHOLE_IMAGE = "whole_image"
    ROI = "roi"  # ground-truth region supplied as a cue, not a division product


@dataclass(frozen=True, order=True, slots=True)
class Box:
    """Pixel rectangle, origin top-left, half-open on the right/bottom edge."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise DataError(f"empty or inverted box {self.as_tuple()}")
        if self.x1 < 0 or self.y1 < 0:
            raise DataError(f"negative box coordinates {self.as_tuple()}")

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1

    @property
    def area(self) -> int:
        return self.width * self.height

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x1, self.y1, self.x2, self.y2)

    def contains(self, other: "Box") -> bool:
        return (
            self.x1 <= other.x1
            and self.y1 <= other.y1
            and self.x2 >= other.x2
            and self.y2 >= other.y2
        )

    def fits(self, width: int, height: int) -> bool:
        return self.x2 <= width and self.y2 <= height

    def validate_against(self, width: int, height: int) -> None:
        if not self.fits(width, height):
            raise BoundsError(f"box {self.as_tuple()} outside {width}x{height} image")


@dataclass(frozen=True)
class ImageRef:
    """An image identified by id and dimensions; pixels are optional.

    ``load_image`` produces refs with pixels attached; ``ImageRef.from_size``
    is enough for anything that only needs geometry.
    """

    id: str
    width: int
    height: int
    source: str | None = None
    pixels: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise DataError(f"image {self.id!r} has empty dimensions")

    @classmethod
    def from_size(cls, image_id: str, width: int, height: int) -> "ImageRef":
        return cls(id=image_id, width=width, height=height)

    @property
    def box(self) -> Box:
        return Box(0, 0, self.width, self.height)

    def has_pixels(self) -> bool:
        return self.pixels is not None


def load_image(path: str | Path, image_id: str | None = None) -> ImageRef:
    """Load a raster file (PNG, JPEG, ...) into an ImageRef with RGB pixels."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.uint8)
    except FileNotFoundError:
        raise DataError(f"image file not found: {path}")
    except Exception as exc:
        raise DataError(f"cannot decode image {path}: {exc}")
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    height, width = arr.shape[:2]
    return ImageRef(
        id=image_id or path.stem,
        width=width,
        height=height,
        source=str(path),
        pixels=arr,
    )


def image_from_array(image_id: str, arr: np.ndarray) -> ImageRef:
    """Wrap an (H, W, 3) uint8 array as a loaded ImageRef."""
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    arr.flags.writeable = False
    h, w = arr.shape[:2]
    return ImageRef(id=image_id, width=w, height=h, source=None, pixels=arr)


@dataclass(frozen=True, slots=True)
class PatchSpec:
    """A rectangular region of one image at some scale level."""

    image_id: str
    box: Box
    scale_level: int
    method: DivisionMethod
    degenerate: bool = False

    @property
    def patch_id(self) -> str:
        b = self.box
        return f"{self.image_id}/{self.method.value}/{b.x1}-{b.y1}-{b.x2}-{b.y2}"


def whole_image_patch(image: ImageRef) -> PatchSpec:
    """The scale-0 pseudo-patch covering the full image."""
    return PatchSpec(image.id, image.box, 0, DivisionMethod.WHOLE_IMAGE)


def _anchors(dim: int, side: int) -> list[int]:
    """Tile anchors along one axis: stride = side, final anchor shifted inward
    so the last tile aligns with the image edge (may overlap its neighbor)."""
    if side >= dim:
        return [0]
    xs = list(range(0, dim - side + 1, side))
    if xs[-1] != dim - side:
        xs.append(dim - side)
    return xs


def divide_vit(image: ImageRef, tile_size: int) -> list[PatchSpec]:
    """Fixed-size non-overlapping tiles; edge tiles shift inward to stay exact.

    An image smaller than ``tile_size`` in either dimension degrades to a
    single whole-image tile flagged ``degenerate``.
    """
    if tile_size < 1:
        raise DataError("tile_size must be >= 1")
    if image.width < tile_size or image.height < tile_size:
        box = Box(0, 0, image.width, image.height)
        return [PatchSpec(image.id, box, 1, DivisionMethod.VIT, degenerate=True)]
    patches = []
    for y in _anchors(image.height, tile_size):
        for x in _anchors(image.width, tile_size):
            box = Box(x, y, x + tile_size, y + tile_size)
            patches.append(PatchSpec(image.id, box, 1, DivisionMethod.VIT))
    return patches


def _grid_bounds(dim: int, k: int) -> list[tuple[int, int]]:
    # First k-1 slices get floor(dim/k); the remainder goes to the last one.
    step = dim // k
    bounds = [(i * step, (i + 1) * step) for i in range(k - 1)]
    bounds.append(((k - 1) * step, dim))
    return bounds


def divide_cascade_grid(image: ImageRef, n: int) -> list[PatchSpec]:
    """Split into 1x1, 2x2, ..., nxn grids; scale_level = grid order k.

    Total count is n(n+1)(2n+1)/6. Requires min(width, height) >= n so every
    cell is non-empty.
    """
    if n < 1:
        raise DataError("grid depth n must be >= 1")
    if min(image.width, image.height) < n:
        raise DataError(
            f"image {image.width}x{image.height} too small for a {n}x{n} grid"
        )
    patches = []
    for k in range(1, n + 1):
        cols = _grid_bounds(image.width, k)
        rows = _grid_bounds(image.height, k)
        for y1, y2 in rows:
            for x1, x2 in cols:
                box = Box(x1, y1, x2, y2)
                patches.append(PatchSpec(image.id, box, k, DivisionMethod.CASCADE_GRID))
    return patches


def cascade_grid_count(n: int) -> int:
    return n * (n + 1) * (2 * n + 1) // 6


def divide_complete_cover(image: ImageRef, scale_param: int) -> list[PatchSpec]:
    """Multi-scale pyramid cover: square sides double from
    ceil(min_dim / scale_param) up to (but excluding) min_dim, each level
    tiling the full image edge-aligned, plus one whole-image patch.

    Emitted coarse-first: the whole image is scale 0, then levels by
    decreasing side.
    """
    if scale_param < 2:
        raise DataError("scale_param must be >= 2")
    min_dim = min(image.width, image.height)
    base = -(-min_dim // scale_param)  # ceil
    sides = []
    side = base
    while side < min_dim:
        sides.append(side)
        side *= 2
    patches = [PatchSpec(image.id, image.box, 0, DivisionMethod.COMPLETE_COVER)]
    for level, s in enumerate(reversed(sides), start=1):
        for y in _anchors(image.height, s):
            for x in _anchors(image.width, s):
                box = Box(x, y, x + s, y + s)
                patches.append(
                    PatchSpec(image.id, box, level, DivisionMethod.COMPLETE_COVER)
                )
    return patches


def divide(image: ImageRef, method: DivisionMethod, **params) -> list[PatchSpec]:
    """Dispatch to a division algorithm by method name."""
    if method == DivisionMethod.VIT:
        return divide_vit(image, params.get("tile_size", 448))
    if method == DivisionMethod.CASCADE_GRID:
        return divide_cascade_grid(image, params.get("n", 10))
    if method == DivisionMethod.COMPLETE_COVER:
        return divide_complete_cover(image, params.get("scale_param", 20))
    if method == DivisionMethod.WHOLE_IMAGE:
        return [whole_image_patch(image)]
    raise DataError(f"unknown division method {method!r}")


def crop(image: ImageRef, box: Box) -> np.ndarray:
    """Return the exact pixel region of ``box`` as a fresh (h, w, 3) array."""
    if not image.has_pixels():
        raise DataError(f"image {image.id!r} was not loaded with pixel data")
    box.validate_against(image.width, image.height)
    assert image.pixels is not None
    return np.array(image.pixels[box.y1 : box.y2, box.x1 : box.x2], copy=True)


def write_patch_list(path: str | Path, patches: Iterable[PatchSpec]) -> int:
    """Serialize patches as tab-delimited lines:
    patch_id, method, scale_level, x1, y1, x2, y2."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for p in patches:
            b = p.box
            fh.write(
                f"{p.patch_id}\t{p.method.value}\t{p.scale_level}"
                f"\t{b.x1}\t{b.y1}\t{b.x2}\t{b.y2}\n"
            )
            count += 1
    return count


def read_patch_list(path: str | Path) -> list[PatchSpec]:
    patches = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 7:
                raise DataError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            patch_id, method, scale, x1, y1, x2, y2 = parts
            image_id = patch_id.split("/")[0]
            patches.append(
                PatchSpec(
                    image_id=image_id,
                    box=Box(int(x1), int(y1), int(x2), int(y2)),
                    scale_level=int(scale),
                    method=DivisionMethod(method),
                )
            )
    return patches
