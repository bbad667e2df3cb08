"""Why pixel-space MSE can prefer a blurry forecast over an almost-right one.

An 8x8 binary checkerboard scene changes in exactly one 2x2 block of its
central 4x4 patch. Copying the earlier image forward misplaces only those
four pixels. A coarse model that can only output one value per 2x2 block
reproduces the change perfectly when asked to predict the difference
image, yet scores far worse when asked to predict the full image, because
the fine checkerboard texture is unrepresentable at block resolution.
All quantities are exact rationals with denominator 64.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations

import numpy as np

BOARD = 8
BLOCK = 2
_CENTER = (2, 6)  # central 4x4 patch, row/col bounds
_TARGET_LCI_MSE = Fraction(4, BOARD * BOARD)


@dataclass(frozen=True)
class CheckerboardScene:
    """Consecutive binary frames differing inside one central 2x2 block.

    before/after: [8, 8] int arrays with values in {0, 1}.
    changed_block: (row, col) of the flipped block's top-left corner.
    """

    before: np.ndarray
    after: np.ndarray
    changed_block: tuple[int, int]

    def __post_init__(self) -> None:
        for name in ("before", "after"):
            arr = np.array(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
            if arr.shape != (BOARD, BOARD):
                raise ValueError(f"{name} must be {BOARD}x{BOARD}")
            if not np.isin(arr, (0, 1)).all():
                raise ValueError(f"{name} must be binary")

    @property
    def difference(self) -> np.ndarray:
        return self.after - self.before


def _base_board() -> np.ndarray:
    yy, xx = np.mgrid[0:BOARD, 0:BOARD]
    return ((yy + xx) % 2).astype(np.int64)


def _central_blocks() -> list[tuple[int, int]]:
    lo, hi = _CENTER
    return [(r, c) for r in range(lo, hi, BLOCK) for c in range(lo, hi, BLOCK)]


def exact_mse(a: np.ndarray, b) -> Fraction:
    """MSE as an exact rational; inputs may hold ints or Fractions."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    total = Fraction(0)
    for va, vb in zip(a.ravel().tolist(), b.ravel().tolist()):
        d = Fraction(va) - Fraction(vb)
        total += d * d
    return total / a.size


def coarse_best_prediction(image: np.ndarray, resolution: int = BLOCK) -> np.ndarray:
    """The best image a block-constant model can produce: each block's mean.

    Returns an object array of exact Fractions.
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("expected a 2D image")
    h, w = image.shape
    if h % resolution or w % resolution:
        raise ValueError(f"extents {image.shape} not divisible by block size {resolution}")
    out = np.empty((h, w), dtype=object)
    for r in range(0, h, resolution):
        for c in range(0, w, resolution):
            block = image[r : r + resolution, c : c + resolution]
            mean = Fraction(int(np.sum(block)), resolution * resolution)
            out[r : r + resolution, c : c + resolution] = mean
    return out


def _candidate_scenes() -> list[CheckerboardScene]:
    """Enumerate central-patch layouts consistent with a single 2x2 change.

    Two families: the central blocks solidified into a coarse two-up/two-down
    pattern with one bright block going dark, and the untouched fine
    checkerboard with one central block going dark.
    """
    base = _base_board()
    blocks = _central_blocks()
    scenes: list[CheckerboardScene] = []
    for dark_pair in combinations(range(len(blocks)), 2):
        before = base.copy()
        for i, (r, c) in enumerate(blocks):
            value = 0 if i in dark_pair else 1
            before[r : r + BLOCK, c : c + BLOCK] = value
        for i, (r, c) in enumerate(blocks):
            if i in dark_pair:
                continue
            after = before.copy()
            after[r : r + BLOCK, c : c + BLOCK] = 0
            scenes.append(CheckerboardScene(before, after, (r, c)))
    for r, c in blocks:
        after = base.copy()
        after[r : r + BLOCK, c : c + BLOCK] = 0
        scenes.append(CheckerboardScene(base.copy(), after, (r, c)))
    return scenes


def build_scene() -> CheckerboardScene:
    """Pick the canonical scene: copy-forward error must be exactly 4/64.

    Candidates are screened for a single uniformly changed block and the
    required copy-forward error; the first in deterministic enumeration
    order wins.
    """
    for scene in _candidate_scenes():
        diff = scene.difference
        changed = np.argwhere(diff != 0)
        if changed.size == 0:
            continue
        values = diff[diff != 0]
        r0, c0 = changed.min(axis=0)
        r1, c1 = changed.max(axis=0)
        is_single_block = (
            len(values) == BLOCK * BLOCK
            and (values == values[0]).all()
            and (r1 - r0 + 1, c1 - c0 + 1) == (BLOCK, BLOCK)
            and r0 % BLOCK == 0
            and c0 % BLOCK == 0
        )
        if not is_single_block:
            continue
        if exact_mse(scene.after, scene.before) != _TARGET_LCI_MSE:
            continue
        return scene
    raise RuntimeError("no admissible checkerboard scene found")


def paradox_mse_table(scene: CheckerboardScene | None = None) -> dict[str, Fraction]:
    """Exact MSEs of the three forecasting strategies on the scene.

    lci_mse: copy the earlier frame forward.
    difference_mse: block-constant prediction of the difference image,
    then added to the earlier frame.
    full_image_mse: block-constant prediction of the later frame directly.
    """
    if scene is None:
        scene = build_scene()
    lci = exact_mse(scene.before, scene.after)
    coarse_diff = coarse_best_prediction(scene.difference)
    difference = exact_mse(scene.before + coarse_diff, scene.after)
    coarse_full = coarse_best_prediction(scene.after)
    full_image = exact_mse(coarse_full, scene.after)
    return {
        "lci_mse": lci,
        "difference_mse": difference,
        "full_image_mse": full_image,
    }


def render_ascii(scene: CheckerboardScene | None = None) -> str:
    """Side-by-side text rendering of the two frames and their difference."""
    if scene is None:
        scene = build_scene()

    def rows(arr, chars) -> list[str]:
        return ["".join(chars[int(v)] for v in row) for row in arr]

    before = rows(scene.before, {0: ".", 1: "#"})
    after = rows(scene.after, {0: ".", 1: "#"})
    diff = rows(scene.difference + 1, {0: "-", 1: ".", 2: "+"})
    header = f"{'before':<10}{'after':<10}{'difference':<10}"
    lines = [header]
    for b, a, d in zip(before, after, diff):
        lines.append(f"{b:<10}{a:<10}{d:<10}")
    return "\n".join(lines)
