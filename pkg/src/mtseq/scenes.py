"""Deterministic synthetic scenes on an 8x8 grid.

A scene holds 1-4 colored shapes with cell-aligned, non-overlapping
bounding boxes. No two objects share the same (shape, color) pair, the
largest object is unique by area, and at least one shape occurs exactly
once, so that referring expressions, classification targets, and
"what color is the <shape>?" questions are all well-posed. Generation
is a pure function of the seed.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

import numpy as np

GRID = 8
SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "yellow")
CLASS_NAMES = tuple(f"{c} {s}" for s in SHAPES for c in COLORS)

# Per-cell feature code: [occupied, shape one-hot x3, color one-hot x4].
PATCH_CODE_DIM = 1 + len(SHAPES) + len(COLORS)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    # Normalized, cell-aligned box with x0 < x1, y0 < y1.
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def name(self) -> str:
        return f"{self.color} {self.shape}"

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def cells(self) -> list[tuple[int, int]]:
        cx0 = round(self.x0 * GRID)
        cy0 = round(self.y0 * GRID)
        cx1 = round(self.x1 * GRID)
        cy1 = round(self.y1 * GRID)
        return [(r, c) for r in range(cy0, cy1) for c in range(cx0, cx1)]


@dataclass(frozen=True)
class Scene:
    seed: int
    objects: tuple[SceneObject, ...]

    def scan_order(self) -> tuple[SceneObject, ...]:
        """Objects ordered top-left first (row-major by box origin)."""
        return tuple(sorted(self.objects, key=lambda o: (o.y0, o.x0)))

    def find(self, color: str, shape: str) -> list[SceneObject]:
        return [o for o in self.objects if o.color == color and o.shape == shape]


def _place_objects(rng: random.Random) -> list[SceneObject] | None:
    n = rng.randint(1, 4)
    combos = rng.sample([(s, c) for s in SHAPES for c in COLORS], n)
    occupied = np.zeros((GRID, GRID), dtype=bool)
    objects = []
    for shape, color in combos:
        for _ in range(20):
            w = rng.randint(1, 4)
            h = rng.randint(1, 4)
            cx = rng.randint(0, GRID - w)
            cy = rng.randint(0, GRID - h)
            if not occupied[cy:cy + h, cx:cx + w].any():
                occupied[cy:cy + h, cx:cx + w] = True
                objects.append(SceneObject(
                    shape=shape, color=color,
                    x0=cx / GRID, y0=cy / GRID,
                    x1=(cx + w) / GRID, y1=(cy + h) / GRID,
                ))
                break
        else:
            return None
    areas = [o.area for o in objects]
    if areas.count(max(areas)) != 1:
        return None
    shapes = [o.shape for o in objects]
    if not any(shapes.count(s) == 1 for s in shapes):
        return None
    return objects


def gen_scene(seed: int) -> Scene:
    """Generate the scene for a seed; deterministic, always succeeds."""
    rng = random.Random(seed * 2654435761 % (2 ** 31))
    while True:
        objects = _place_objects(rng)
        if objects is not None:
            return Scene(seed=seed, objects=tuple(objects))


def patch_codes(scene: Scene) -> np.ndarray:
    """(GRID*GRID, PATCH_CODE_DIM) orthogonal cell codes; empty cells are zero."""
    codes = np.zeros((GRID * GRID, PATCH_CODE_DIM))
    for obj in scene.objects:
        vec = np.zeros(PATCH_CODE_DIM)
        vec[0] = 1.0
        vec[1 + SHAPES.index(obj.shape)] = 1.0
        vec[1 + len(SHAPES) + COLORS.index(obj.color)] = 1.0
        for r, c in obj.cells():
            codes[r * GRID + c] = vec
    return codes


def render_patches(scene: Scene, d_model: int) -> np.ndarray:
    """(GRID*GRID, d_model) patch vectors: cell codes zero-padded to width."""
    if d_model < PATCH_CODE_DIM:
        raise ValueError(f"d_model must be >= {PATCH_CODE_DIM}")
    codes = patch_codes(scene)
    out = np.zeros((GRID * GRID, d_model))
    out[:, :PATCH_CODE_DIM] = codes
    return out
