"""Procedural generator for Raven-style 3x3 matrix-completion puzzles.

Each item is nine cells of abstract geometric shapes governed by one to
three rules over distinct shape attributes, with the ninth cell withheld.
Eight answer options accompany every item: the rule-realised truth plus
seven taxonomy-labelled distractors (neighbour repetitions, wrong-rule and
partial-rule realisations, random perturbations).  Difficulty is the rule
count, and rendering is aliasing-free integer drawing so identical specs
always rasterise to identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

SHAPE_KINDS = ("disc", "square", "triangle", "bar", "cross")
ATTRIBUTES = ("size", "intensity", "count", "rotation", "overlay")
FAMILIES = ("constant", "progression", "addition", "subtraction", "distribution3")
AXES = ("row", "column")
ROTATIONS = (0, 45, 90, 135)
OPTION_LABELS = ("correct", "repetition_neighbour", "incorrect_rule", "incomplete_rule", "random")

SIZE_RANGE = (0.1, 0.9)
INK_MAX = 200  # shapes stay clearly darker than the white background

_SQRT2_HALF = 0.7071067811865476
_ROT_CS = {
    0: (1.0, 0.0),
    45: (_SQRT2_HALF, _SQRT2_HALF),
    90: (0.0, 1.0),
    135: (-_SQRT2_HALF, _SQRT2_HALF),
}
_TRI_X = 0.8660254037844386  # sin 60


class ProfileError(ValueError):
    """Difficulty profile cannot be realised."""


class GenerationError(RuntimeError):
    """Item generation exhausted its resampling budget."""

    def __init__(self, item_index: int, message: str):
        super().__init__(f"item {item_index}: {message}")
        self.item_index = item_index


class RuleRangeError(ValueError):
    """A progression left its attribute's legal range; resample, never clamp."""


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    size: float
    intensity: int
    count: int = 1
    rotation: int = 0
    position: int = 4

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if not (SIZE_RANGE[0] - 1e-9 <= self.size <= SIZE_RANGE[1] + 1e-9):
            raise ValueError(f"size {self.size} outside {SIZE_RANGE}")
        if not (0 <= self.intensity <= 255):
            raise ValueError(f"intensity {self.intensity} outside [0, 255]")
        if not (1 <= self.count <= 4):
            raise ValueError(f"count {self.count} outside [1, 4]")
        if self.rotation not in ROTATIONS:
            raise ValueError(f"rotation {self.rotation} not in {ROTATIONS}")
        if not (0 <= self.position <= 8):
            raise ValueError(f"position {self.position} outside [0, 8]")


@dataclass(frozen=True)
class RuleSpec:
    attribute: str
    family: str
    axis: str
    step: float | int | None = None
    values: tuple | None = None
    operands: tuple | None = None  # 3 lines x (slots_a, slots_b)
    orientation: int = 1  # latin-square direction for distribution3

    def __post_init__(self):
        if self.attribute not in ATTRIBUTES:
            raise ValueError(f"unknown attribute {self.attribute!r}")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.axis not in AXES:
            raise ValueError(f"unknown axis {self.axis!r}")
        overlayish = self.family in ("addition", "subtraction")
        if (self.attribute == "overlay") != overlayish:
            raise ValueError("overlay pairs exactly with addition/subtraction")
        if self.family == "progression" and self.step is None:
            raise ValueError("progression needs a step")
        if self.family == "distribution3":
            if self.values is None or len(self.values) != 3:
                raise ValueError("distribution3 needs three values")
            if self.orientation not in (1, 2):
                raise ValueError("orientation must be 1 or 2")
        if overlayish:
            if self.operands is None or len(self.operands) != 3:
                raise ValueError("overlay rule needs operand slots for all three lines")
            for a, b in self.operands:
                if not a:
                    raise ValueError("empty first operand")


def validate_rules(rules) -> tuple[RuleSpec, ...]:
    rules = tuple(rules)
    if not (1 <= len(rules) <= 3):
        raise ValueError("an item carries 1..3 rules")
    attrs = [r.attribute for r in rules]
    if len(set(attrs)) != len(attrs):
        raise ValueError("rule attributes must be distinct")
    if "overlay" in attrs and "count" in attrs:
        raise ValueError("overlay and count rules both govern occupancy; pick one")
    return rules


@dataclass(frozen=True)
class OptionSpec:
    cell: tuple[ShapeSpec, ...]
    label: str

    def __post_init__(self):
        if self.label not in OPTION_LABELS:
            raise ValueError(f"unknown option label {self.label!r}")


@dataclass(frozen=True)
class MatrixItem:
    id: str
    seed: int
    rules: tuple[RuleSpec, ...]
    base: tuple[ShapeSpec, ...]
    cells: tuple[tuple[ShapeSpec, ...], ...]
    options: tuple[OptionSpec, ...]
    answer_index: int
    difficulty_rank: int

    def __post_init__(self):
        if len(self.cells) != 9:
            raise ValueError("an item has nine cells")
        if len(self.options) != 8:
            raise ValueError("an item offers eight options")
        correct = [i for i, o in enumerate(self.options) if o.label == "correct"]
        if correct != [self.answer_index]:
            raise ValueError("exactly one correct option, at answer_index")
        if self.options[self.answer_index].cell != self.cells[8]:
            raise ValueError("correct option must equal the realised ninth cell")
        if self.difficulty_rank < 1:
            raise ValueError("difficulty_rank starts at 1")


# ---------------------------------------------------------------------------
# rule realisation


def _rank(rule: RuleSpec, row: int, col: int) -> int:
    return col if rule.axis == "row" else row


def _attribute_domain_check(attribute: str, value):
    if attribute == "intensity":
        if not (0 <= value <= 255):
            raise RuleRangeError(f"intensity {value} out of range")
        return int(value)
    if attribute == "size":
        if not (SIZE_RANGE[0] - 1e-9 <= value <= SIZE_RANGE[1] + 1e-9):
            raise RuleRangeError(f"size {value} out of range")
        return float(value)
    if attribute == "count":
        if value != int(value) or not (1 <= value <= 4):
            raise RuleRangeError(f"count {value} out of range")
        return int(value)
    if attribute == "rotation":
        if value not in ROTATIONS:
            raise RuleRangeError(f"rotation {value} not in {ROTATIONS}")
        return int(value)
    raise ValueError(f"no scalar domain for {attribute}")


def _overlay_slots(rule: RuleSpec, row: int, col: int) -> tuple[int, ...]:
    line = row if rule.axis == "row" else col
    pos = col if rule.axis == "row" else row
    slots_a, slots_b = rule.operands[line]
    if pos == 0:
        chosen = set(slots_a)
    elif pos == 1:
        chosen = set(slots_b)
    elif rule.family == "addition":
        chosen = set(slots_a) | set(slots_b)
    else:
        chosen = set(slots_a) - set(slots_b)
    if not chosen:
        raise RuleRangeError("overlay produced an empty cell")
    return tuple(sorted(chosen))


def realize_cell(rules, row: int, col: int, base) -> tuple[ShapeSpec, ...]:
    """Apply each rule independently to its attribute for one grid position.

    Constant copies the base value; progression adds rank*step along the
    rule's axis; addition/subtraction compose the first two cells of the
    line by set union/difference of occupied slots; distribution3 walks a
    latin square so each value appears once per row and column.  A
    progression that leaves its attribute's range raises RuleRangeError.
    """
    rules = validate_rules(rules)
    base = tuple(base)
    if not base:
        raise ValueError("base cell must hold at least one shape")
    shapes = list(base)
    overlay = next((r for r in rules if r.attribute == "overlay"), None)
    if overlay is not None:
        proto = base[0]
        shapes = [replace(proto, count=1, position=s) for s in _overlay_slots(overlay, row, col)]
    for rule in sorted(rules, key=lambda r: r.attribute):
        if rule.attribute == "overlay" or rule.family == "constant":
            continue
        if rule.family == "progression":
            base_value = getattr(base[0], rule.attribute)
            value = _attribute_domain_check(
                rule.attribute, base_value + _rank(rule, row, col) * rule.step
            )
        else:  # distribution3
            value = _attribute_domain_check(
                rule.attribute, rule.values[(rule.orientation * row + col) % 3]
            )
        shapes = [replace(s, **{rule.attribute: value}) for s in shapes]
    return tuple(shapes)


# ---------------------------------------------------------------------------
# rendering


@dataclass(frozen=True)
class CellGeometry:
    """Pixel layout of the 3x3 lattice: origin, pitch and total cell border."""

    origin_x: int
    origin_y: int
    pitch: int
    border: int

    @property
    def interior(self) -> int:
        return self.pitch - self.border

    def cell_rect(self, row: int, col: int) -> tuple[int, int, int]:
        """(y0, x0, size) of the cell's interior square."""
        inset = self.border // 2
        return (
            self.origin_y + row * self.pitch + inset,
            self.origin_x + col * self.pitch + inset,
            self.interior,
        )


@dataclass(frozen=True)
class RenderConfig:
    image_size: int = 512
    pitch: int = 160
    margin: int = 16
    border: int = 10
    background: int = 255

    def __post_init__(self):
        if 2 * self.margin + 3 * self.pitch != self.image_size:
            raise ValueError("margins and pitch must tile the image exactly")
        if self.border % 2 or self.border < 2:
            raise ValueError("border must be even and >= 2")
        if self.pitch - self.border < 24:
            raise ValueError("cell interior too small")
        if not (0 <= self.background <= 255):
            raise ValueError("background outside [0, 255]")

    def geometry(self) -> CellGeometry:
        return CellGeometry(self.margin, self.margin, self.pitch, self.border)


def _shape_mask(kind, yy, xx, cy, cx, half, rotation) -> np.ndarray:
    dy = yy - cy
    dx = xx - cx
    if kind == "disc":
        return dx * dx + dy * dy <= half * half
    c, s = _ROT_CS[rotation]
    u = dx * c + dy * s
    v = -dx * s + dy * c
    if kind == "square":
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    if kind == "bar":
        return (np.abs(u) <= half) & (np.abs(v) <= half / 3.0)
    if kind == "cross":
        return ((np.abs(u) <= half / 3.0) & (np.abs(v) <= half)) | (
            (np.abs(v) <= half / 3.0) & (np.abs(u) <= half)
        )
    if kind == "triangle":
        ax, ay = 0.0, -half
        bx, by = _TRI_X * half, 0.5 * half
        cx2, cy2 = -_TRI_X * half, 0.5 * half
        d1 = (bx - ax) * (v - ay) - (by - ay) * (u - ax)
        d2 = (cx2 - bx) * (v - by) - (cy2 - by) * (u - bx)
        d3 = (ax - cx2) * (v - cy2) - (ay - cy2) * (u - cx2)
        return ((d1 <= 0) & (d2 <= 0) & (d3 <= 0)) | ((d1 >= 0) & (d2 >= 0) & (d3 >= 0))
    raise ValueError(f"unknown shape kind {kind!r}")


def render_cell(shapes, tile_size: int, background: int = 255) -> np.ndarray:
    """Rasterise one cell's shapes into a tile; overlapping ink keeps the darker."""
    tile = np.full((tile_size, tile_size), background, dtype=np.uint8)
    yy, xx = np.mgrid[0:tile_size, 0:tile_size].astype(np.float64)
    slot = tile_size / 3.0
    for spec in shapes:
        half = spec.size * tile_size / 2.0
        for j in range(spec.count):
            s = (spec.position + j) % 9
            sr, sc = divmod(s, 3)
            cy = (sr + 0.5) * slot
            cx = (sc + 0.5) * slot
            mask = _shape_mask(spec.kind, yy, xx, cy, cx, half, spec.rotation)
            tile[mask] = np.minimum(tile[mask], np.uint8(spec.intensity))
    return tile


@dataclass
class RasterCase:
    """Rendered puzzle: masked matrix image, answer mask, and option tiles."""

    image: np.ndarray
    mask: np.ndarray
    option_cells: tuple[np.ndarray, ...]
    cell_geometry: CellGeometry


def _blit(image: np.ndarray, geometry: CellGeometry, row: int, col: int, tile: np.ndarray):
    y0, x0, size = geometry.cell_rect(row, col)
    image[y0 : y0 + size, x0 : x0 + size] = tile


def render_full(item: MatrixItem, cfg: RenderConfig = RenderConfig()) -> np.ndarray:
    """The complete, un-masked matrix: all nine cells drawn."""
    geometry = cfg.geometry()
    image = np.full((cfg.image_size, cfg.image_size), cfg.background, dtype=np.uint8)
    for idx, cell in enumerate(item.cells):
        _blit(image, geometry, idx // 3, idx % 3, render_cell(cell, geometry.interior, cfg.background))
    return image


def render_case(item: MatrixItem, cfg: RenderConfig = RenderConfig()) -> RasterCase:
    """Puzzle raster with the ninth cell blank under a rectangular mask."""
    geometry = cfg.geometry()
    image = np.full((cfg.image_size, cfg.image_size), cfg.background, dtype=np.uint8)
    for idx, cell in enumerate(item.cells[:8]):
        _blit(image, geometry, idx // 3, idx % 3, render_cell(cell, geometry.interior, cfg.background))
    mask = np.zeros_like(image, dtype=bool)
    y0, x0, size = geometry.cell_rect(2, 2)
    mask[y0 : y0 + size, x0 : x0 + size] = True
    option_cells = tuple(
        render_cell(opt.cell, geometry.interior, cfg.background) for opt in item.options
    )
    return RasterCase(image, mask, option_cells, geometry)


def paste_tile(image: np.ndarray, geometry: CellGeometry, tile: np.ndarray, row: int = 2, col: int = 2) -> np.ndarray:
    """Copy of `image` with `tile` pasted into the given cell's interior."""
    out = image.copy()
    _blit(out, geometry, row, col, tile)
    return out


# ---------------------------------------------------------------------------
# battery generation

_INT_GRID = tuple(range(0, INK_MAX + 1, 10))
_INT_STEPS = (30, 40, 50)
_SIZE_GRID_UP = (0.16, 0.18, 0.20, 0.22, 0.24)
_SIZE_GRID_DOWN = (0.22, 0.24, 0.26, 0.28, 0.30)
_SIZE_STEP = 0.04
_DIST3_INT = (0, 40, 80, 120, 160, 200)
_DIST3_SIZE = (0.14, 0.18, 0.22, 0.26, 0.30)

DEFAULT_PROFILE: tuple[tuple[tuple[str, str, str], ...], ...] = (
    (("constant", "intensity", "row"),),
    (("progression", "intensity", "row"),),
    (("progression", "count", "row"),),
    (("progression", "size", "column"),),
    (("progression", "intensity", "row"), ("progression", "count", "column")),
    (("progression", "size", "row"), ("progression", "intensity", "column")),
    (("progression", "count", "row"), ("progression", "intensity", "column")),
    (("progression", "intensity", "row"), ("progression", "rotation", "column")),
    (
        ("progression", "intensity", "row"),
        ("progression", "count", "column"),
        ("progression", "size", "row"),
    ),
    (
        ("addition", "overlay", "row"),
        ("progression", "intensity", "column"),
        ("progression", "size", "column"),
    ),
    (
        ("subtraction", "overlay", "row"),
        ("progression", "intensity", "column"),
        ("progression", "size", "row"),
    ),
    (
        ("distribution3", "intensity", "row"),
        ("addition", "overlay", "column"),
        ("progression", "size", "row"),
    ),
)

_GENERIC_TEMPLATES = {
    1: DEFAULT_PROFILE[1],
    2: DEFAULT_PROFILE[4],
    3: DEFAULT_PROFILE[8],
}


def _normalise_profile(profile, n_items: int):
    if profile is None:
        if n_items <= len(DEFAULT_PROFILE):
            templates = DEFAULT_PROFILE[:n_items]
        else:
            templates = DEFAULT_PROFILE + (DEFAULT_PROFILE[-1],) * (n_items - len(DEFAULT_PROFILE))
        return templates
    templates = []
    for entry in profile:
        if isinstance(entry, int):
            if entry not in _GENERIC_TEMPLATES:
                raise ProfileError(f"rule count {entry} outside 1..3")
            templates.append(_GENERIC_TEMPLATES[entry])
        else:
            templates.append(tuple(tuple(t) for t in entry))
    if len(templates) != n_items:
        raise ProfileError(f"profile length {len(templates)} != n_items {n_items}")
    counts = [len(t) for t in templates]
    if any(not 1 <= c <= 3 for c in counts):
        raise ProfileError("rule counts must lie in 1..3")
    if any(a > b for a, b in zip(counts, counts[1:])):
        raise ProfileError("rule counts must be non-decreasing")
    for t in templates:
        for family, attribute, axis in t:
            if family not in FAMILIES or attribute not in ATTRIBUTES or axis not in AXES:
                raise ProfileError(f"bad template entry {(family, attribute, axis)}")
    return tuple(templates)


def _sample_intensity_progression(rng) -> tuple[int, int]:
    step = int(rng.choice(_INT_STEPS)) * int(rng.choice((-1, 1)))
    lo = max(0, -2 * step)
    hi = min(INK_MAX, INK_MAX - 2 * step)
    base = int(rng.integers(lo // 10, hi // 10 + 1)) * 10
    return base, step


def _sample_rules(rng, template):
    """Instantiate a template's rules and the base cell they act on."""
    ruled = {attr for _, attr, _ in template}
    kind_pool = ("triangle", "bar", "cross") if "rotation" in ruled else SHAPE_KINDS
    base_kind = str(rng.choice(kind_pool))
    base_size = float(rng.choice(_SIZE_GRID_UP + _SIZE_GRID_DOWN))
    base_intensity = int(rng.choice(_INT_GRID))
    base_count = 1
    base_rotation = int(rng.choice(ROTATIONS))
    base_position = int(rng.integers(0, 9))
    rules = []
    for family, attribute, axis in template:
        if family == "constant":
            rules.append(RuleSpec(attribute, "constant", axis))
        elif family == "progression":
            if attribute == "intensity":
                base_intensity, step = _sample_intensity_progression(rng)
                rules.append(RuleSpec(attribute, "progression", axis, step=step))
            elif attribute == "count":
                if rng.random() < 0.5:
                    base_count, step = int(rng.integers(1, 3)), 1
                else:
                    base_count, step = int(rng.integers(3, 5)), -1
                rules.append(RuleSpec(attribute, "progression", axis, step=step))
            elif attribute == "size":
                if rng.random() < 0.5:
                    base_size, step = float(rng.choice(_SIZE_GRID_UP)), _SIZE_STEP
                else:
                    base_size, step = float(rng.choice(_SIZE_GRID_DOWN)), -_SIZE_STEP
                rules.append(RuleSpec(attribute, "progression", axis, step=step))
            elif attribute == "rotation":
                if rng.random() < 0.5:
                    base_rotation, step = int(rng.choice((0, 45))), 45
                else:
                    base_rotation, step = int(rng.choice((90, 135))), -45
                rules.append(RuleSpec(attribute, "progression", axis, step=step))
            else:
                raise ProfileError(f"progression undefined for {attribute}")
        elif family == "distribution3":
            if attribute == "intensity":
                values = tuple(int(v) for v in rng.choice(_DIST3_INT, size=3, replace=False))
            elif attribute == "size":
                values = tuple(float(v) for v in rng.choice(_DIST3_SIZE, size=3, replace=False))
            elif attribute == "count":
                values = tuple(int(v) for v in rng.choice((1, 2, 3, 4), size=3, replace=False))
            elif attribute == "rotation":
                values = tuple(int(v) for v in rng.choice(ROTATIONS, size=3, replace=False))
            else:
                raise ProfileError(f"distribution3 undefined for {attribute}")
            rules.append(
                RuleSpec(attribute, "distribution3", axis, values=values,
                         orientation=int(rng.choice((1, 2))))
            )
        else:  # addition / subtraction on the overlay attribute
            operands = []
            for _ in range(3):
                na = int(rng.integers(2, 4))
                slots_a = tuple(sorted(int(s) for s in rng.choice(9, size=na, replace=False)))
                if family == "subtraction":
                    slots_b = (int(rng.choice(slots_a)),)
                else:
                    pool = [s for s in range(9) if s not in slots_a]
                    nb = int(rng.integers(1, 3))
                    slots_b = tuple(sorted(int(s) for s in rng.choice(pool, size=nb, replace=False)))
                operands.append((slots_a, slots_b))
            rules.append(RuleSpec("overlay", family, axis, operands=tuple(operands)))
            base_size = min(base_size, 0.30)  # shapes must stay inside their slots
    base = (
        ShapeSpec(
            kind=base_kind,
            size=base_size,
            intensity=base_intensity,
            count=base_count,
            rotation=base_rotation,
            position=base_position,
        ),
    )
    return validate_rules(rules), base


# distractor construction ----------------------------------------------------


def _jitter_cell(cell, rng) -> tuple[ShapeSpec, ...]:
    """Perturb one attribute of every shape, staying inside legal ranges."""
    moves = []
    first = cell[0]
    for delta in (30, -30, 50, -50):
        if 0 <= first.intensity + delta <= 255:
            moves.append(("intensity", first.intensity + delta))
    for delta in (0.06, -0.06):
        if SIZE_RANGE[0] <= first.size + delta <= SIZE_RANGE[1]:
            moves.append(("size", round(first.size + delta, 4)))
    moves.append(("rotation", ROTATIONS[(ROTATIONS.index(first.rotation) + 1) % 4]))
    moves.append(("position", (first.position + 1) % 9))
    attr, value = moves[int(rng.integers(0, len(moves)))]
    if attr == "position":
        return tuple(replace(s, position=(s.position + 1) % 9) for s in cell)
    return tuple(replace(s, **{attr: value}) for s in cell)


def _random_cell(truth, rng) -> tuple[ShapeSpec, ...]:
    """Perturb at least two attributes of the realised truth cell."""
    cell = truth
    n_attrs = int(rng.integers(2, 4))
    picks = rng.permutation(4)[:n_attrs]
    for pick in picks:
        first = cell[0]
        if pick == 0:
            choices = [d for d in (-60, -40, 40, 60) if 0 <= first.intensity + d <= 255]
            delta = int(rng.choice(choices)) if choices else 40
            cell = tuple(replace(s, intensity=max(0, min(255, s.intensity + delta))) for s in cell)
        elif pick == 1:
            choices = [d for d in (-0.06, 0.06) if SIZE_RANGE[0] <= first.size + d <= SIZE_RANGE[1]]
            delta = float(rng.choice(choices)) if choices else 0.06
            cell = tuple(replace(s, size=round(s.size + delta, 4)) for s in cell)
        elif pick == 2:
            turn = int(rng.integers(1, 4))
            cell = tuple(
                replace(s, rotation=ROTATIONS[(ROTATIONS.index(s.rotation) + turn) % 4])
                for s in cell
            )
        else:
            shift = int(rng.integers(1, 9))
            cell = tuple(replace(s, position=(s.position + shift) % 9) for s in cell)
    return cell


def _wrong_rule_variants(rule: RuleSpec, base) -> list[RuleSpec]:
    if rule.family == "progression":
        return [
            replace(rule, family="constant", step=None),
            replace(rule, step=-rule.step),
        ]
    if rule.family == "constant":
        if rule.attribute == "intensity":
            step = 30 if getattr(base[0], "intensity") <= INK_MAX - 60 else -30
            return [replace(rule, family="progression", step=step)]
        if rule.attribute == "size":
            step = _SIZE_STEP if base[0].size <= 0.24 else -_SIZE_STEP
            return [replace(rule, family="progression", step=step)]
        if rule.attribute == "count":
            return [replace(rule, family="progression", step=1 if base[0].count <= 2 else -1)]
        if rule.attribute == "rotation":
            return [replace(rule, family="progression", step=45 if base[0].rotation <= 45 else -45)]
        return []
    if rule.family == "distribution3":
        rolled = rule.values[1:] + rule.values[:1]
        return [replace(rule, orientation=3 - rule.orientation), replace(rule, values=rolled)]
    if rule.family == "addition":
        return [replace(rule, family="subtraction")]
    return [replace(rule, family="addition")]


def _incorrect_rule_cell(rules, base, rng):
    order = rng.permutation(len(rules))
    for idx in order:
        variants = _wrong_rule_variants(rules[idx], base)
        for v_idx in rng.permutation(len(variants)):
            modified = list(rules)
            modified[idx] = variants[v_idx]
            try:
                return realize_cell(modified, 2, 2, base)
            except (RuleRangeError, ValueError):
                continue
    return None


def _incomplete_rule_cell(rules, base, rng):
    if len(rules) < 2:
        return None
    keep = [i for i in range(len(rules))]
    drop = int(rng.integers(0, len(rules)))
    subset = [rules[i] for i in keep if i != drop]
    try:
        return realize_cell(subset, 2, 2, base)
    except (RuleRangeError, ValueError):
        return None


def make_distractors(item_or_parts, seed: int) -> tuple[OptionSpec, ...]:
    """Eight shuffled options: the realised truth plus seven distractors.

    Distractor plan: two neighbour repetitions (cells 8 and 6), two
    wrong-rule realisations, one partial-rule realisation when the item
    carries several rules, and random perturbations for the rest.  Any
    option whose render collides with an already-accepted one is rebuilt
    with jitter; deterministic in (item, seed).
    """
    if isinstance(item_or_parts, MatrixItem):
        rules, base, cells = item_or_parts.rules, item_or_parts.base, item_or_parts.cells
    else:
        rules, base, cells = item_or_parts
    rng = np.random.default_rng(seed)
    truth = cells[8]
    tile_size = RenderConfig().geometry().interior

    accepted_specs = [truth]
    accepted_labels = ["correct"]
    accepted_bytes = {render_cell(truth, tile_size).tobytes()}

    def admit(label, builder, fallback_source=None):
        for attempt in range(40):
            cell = builder(attempt)
            if cell is None:
                if fallback_source is None:
                    return False
                cell = _random_cell(fallback_source, rng)
            elif attempt >= 8:
                # a builder with few variants can keep colliding; jitter out
                cell = _jitter_cell(cell, rng)
            key = render_cell(cell, tile_size).tobytes()
            if key not in accepted_bytes:
                accepted_bytes.add(key)
                accepted_specs.append(cell)
                accepted_labels.append(label)
                return True
        return False

    def repetition(source):
        def build(attempt):
            return source if attempt == 0 else _jitter_cell(source, rng)
        return build

    plan = [
        ("repetition_neighbour", repetition(cells[7])),
        ("repetition_neighbour", repetition(cells[5])),
        ("incorrect_rule", lambda a: _incorrect_rule_cell(rules, base, rng)),
        ("incorrect_rule", lambda a: _incorrect_rule_cell(rules, base, rng)),
        (
            ("incomplete_rule", lambda a: _incomplete_rule_cell(rules, base, rng))
            if len(rules) >= 2
            else ("random", lambda a: _random_cell(truth, rng))
        ),
        ("random", lambda a: _random_cell(truth, rng)),
        ("random", lambda a: _random_cell(truth, rng)),
    ]
    for entry in plan:
        label, builder = entry
        if not admit(label, builder, fallback_source=truth):
            raise GenerationError(-1, f"could not build 8 distinct options (label {label})")

    order = rng.permutation(8)
    options = tuple(
        OptionSpec(accepted_specs[i], accepted_labels[i]) for i in order
    )
    return options


def _generate_item(item_seed: int, index: int, template, rank: int) -> MatrixItem:
    rng = np.random.default_rng(item_seed)
    for _ in range(100):
        try:
            rules, base = _sample_rules(rng, template)
            cells = tuple(realize_cell(rules, r, c, base) for r in range(3) for c in range(3))
        except (RuleRangeError, ValueError):
            continue
        option_seed = int(rng.integers(0, 2**63))
        try:
            options = make_distractors((rules, base, cells), option_seed)
        except GenerationError:
            continue
        answer_index = next(i for i, o in enumerate(options) if o.label == "correct")
        return MatrixItem(
            id=f"item_{index:03d}",
            seed=int(item_seed),
            rules=rules,
            base=base,
            cells=cells,
            options=options,
            answer_index=answer_index,
            difficulty_rank=rank,
        )
    raise GenerationError(index, "resampling budget exhausted")


def generate_battery(seed: int, n_items: int = 12, profile=None) -> list[MatrixItem]:
    """Deterministic battery of items with strictly increasing difficulty rank."""
    if n_items < 1:
        raise ProfileError("n_items must be >= 1")
    templates = _normalise_profile(profile, n_items)
    root = np.random.SeedSequence(seed)
    item_seeds = root.generate_state(n_items, dtype=np.uint64)
    return [
        _generate_item(int(item_seeds[i]), i, templates[i], rank=i + 1)
        for i in range(n_items)
    ]


# ---------------------------------------------------------------------------
# manifest + file layout


def _rule_to_dict(rule: RuleSpec) -> dict:
    d = {"attribute": rule.attribute, "family": rule.family, "axis": rule.axis}
    if rule.step is not None:
        d["step"] = rule.step
    if rule.values is not None:
        d["values"] = list(rule.values)
    if rule.operands is not None:
        d["operands"] = [[list(a), list(b)] for a, b in rule.operands]
    if rule.family == "distribution3":
        d["orientation"] = rule.orientation
    return d


def battery_manifest(items, battery_seed: int) -> dict:
    """JSON-ready description: ids, seeds, rules, answer keys, option labels.

    Distractor label frequencies are a generator choice, flagged here so
    downstream consumers know they carry no normative weight.
    """
    return {
        "schema": "ravenbench-battery-v1",
        "battery_seed": int(battery_seed),
        "n_items": len(items),
        "distractor_mix": "generator_choice",
        "items": [
            {
                "id": it.id,
                "seed": it.seed,
                "difficulty_rank": it.difficulty_rank,
                "rules": [_rule_to_dict(r) for r in it.rules],
                "answer_index": it.answer_index,
                "option_labels": [o.label for o in it.options],
            }
            for it in items
        ],
    }


def write_battery(items, out_dir, battery_seed: int, cfg: RenderConfig = RenderConfig()) -> Path:
    """Write manifest plus per-item image/mask/option PNGs; returns manifest path."""
    from ravenbench.pngio import save_gray

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, item in enumerate(items):
        case = render_case(item, cfg)
        save_gray(out_dir / f"item_{i:03d}_image.png", case.image)
        save_gray(out_dir / f"item_{i:03d}_mask.png", case.mask.astype(np.uint8) * 255)
        for k, tile in enumerate(case.option_cells):
            save_gray(out_dir / f"item_{i:03d}_opt{k}.png", tile)
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(battery_manifest(items, battery_seed), indent=2, sort_keys=True) + "\n")
    return manifest_path
