"""Procedural multimodal training data.

Scenes are flat-color rasters of simple shapes on a coarse grid, plus a
5x7 bitmap font for rendered glyph strings. Captions and answers are
derived from the scene geometry, so every sample is exactly verifiable.
Generators are pure functions of (seed, stage, index): byte-identical
across runs and processes, with nested-prefix datasets for scaling runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CONCEPT = "CONCEPT"
SEMANTIC = "SEMANTIC"
ALIGN_CAPTION = "ALIGN_CAPTION"
ALIGN_DETECT = "ALIGN_DETECT"
ALIGN_OCR = "ALIGN_OCR"
INSTRUCT = "INSTRUCT"
TEXT_ONLY = "TEXT_ONLY"

STAGE_MIXES = ("concept", "semantic", "align", "instruct", "text_only")
_MIX_CODE = {name: i + 1 for i, name in enumerate(STAGE_MIXES)}

COLORS = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.65, 0.15),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "purple": (0.55, 0.15, 0.70),
    "orange": (0.95, 0.55, 0.05),
}
COLOR_NAMES = tuple(COLORS)
KINDS = ("square", "circle", "triangle")
NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five")

# proportions of the alignment mix: captioning / detection / OCR
ALIGN_SHARES = (0.539, 0.052, 0.409)
# proportions of the instruction mix: caption QA / counting / OCR / text-only
INSTRUCT_SHARES = (0.30, 0.30, 0.30, 0.10)
CONCEPT_SUFFIX_RATE = 0.30
CONCEPT_WRONG_COLOR_RATE = 0.10

_NOISE_SUFFIXES = (
    ", photo taken in 2014",
    ", uploaded by a user",
    " from the archive",
    ", stock image 4471",
    " posted on a blog",
)

BACKGROUND = 0.92
GLYPH_SHADE = 0.10

# 5x7 bitmap font over A-Z and 0-9; '#' marks a lit pixel
FONT_5X7 = {
    "A": (".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "B": ("####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."),
    "C": (".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."),
    "D": ("###..", "#..#.", "#...#", "#...#", "#...#", "#..#.", "###.."),
    "E": ("#####", "#....", "#....", "####.", "#....", "#....", "#####"),
    "F": ("#####", "#....", "#....", "####.", "#....", "#....", "#...."),
    "G": (".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"),
    "H": ("#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "I": (".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."),
    "J": ("..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."),
    "K": ("#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"),
    "L": ("#....", "#....", "#....", "#....", "#....", "#....", "#####"),
    "M": ("#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"),
    "N": ("#...#", "#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#"),
    "O": (".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "P": ("####.", "#...#", "#...#", "####.", "#....", "#....", "#...."),
    "Q": (".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"),
    "R": ("####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"),
    "S": (".####", "#....", "#....", ".###.", "....#", "....#", "####."),
    "T": ("#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."),
    "U": ("#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "V": ("#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."),
    "W": ("#...#", "#...#", "#...#", "#.#.#", "#.#.#", "#.#.#", ".#.#."),
    "X": ("#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"),
    "Y": ("#...#", "#...#", "#...#", ".#.#.", "..#..", "..#..", "..#.."),
    "Z": ("#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"),
    "0": (".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."),
    "1": ("..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."),
    "2": (".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"),
    "3": ("#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."),
    "4": ("...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."),
    "5": ("#####", "#....", "####.", "....#", "....#", "#...#", ".###."),
    "6": ("..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."),
    "7": ("#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."),
    "8": (".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."),
    "9": (".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."),
}
GLYPHS = "".join(sorted(FONT_5X7))


@dataclass(frozen=True)
class Shape:
    kind: str
    color: str
    cell: tuple  # (row, col) on the scene grid


@dataclass(frozen=True)
class SceneSpec:
    canvas: int
    grid: int
    shapes: tuple = ()
    glyphs: str | None = None
    glyph_scale: int = 0


@dataclass
class SynthSample:
    """One training/eval sample; the raster is rendered lazily from the scene."""

    prompt: str
    response: str
    stage_tag: str
    index: int
    scene: SceneSpec | None
    category: str | None = None
    noise: tuple = ()
    _image: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def image(self) -> np.ndarray | None:
        if self.scene is None:
            return None
        if self._image is None:
            self._image = render(self.scene)
        return self._image


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def cell_bounds_px(scene: SceneSpec, cell) -> tuple:
    r, c = cell
    n = scene.canvas
    g = scene.grid
    return (r * n // g, c * n // g, (r + 1) * n // g, (c + 1) * n // g)


def cell_box_1000(grid: int, cell) -> tuple:
    """Normalized [x0, y0, x1, y1] of a grid cell on a 0-1000 canvas."""
    r, c = cell
    return (c * 1000 // grid, r * 1000 // grid,
            (c + 1) * 1000 // grid, (r + 1) * 1000 // grid)


def _draw_shape(canvas: np.ndarray, scene: SceneSpec, shape: Shape) -> None:
    y0, x0, y1, x1 = cell_bounds_px(scene, shape.cell)
    inset_y = max(1, (y1 - y0) // 8)
    inset_x = max(1, (x1 - x0) // 8)
    y0, y1 = y0 + inset_y, y1 - inset_y
    x0, x1 = x0 + inset_x, x1 - inset_x
    rgb = COLORS[shape.color]
    if shape.kind == "square":
        canvas[y0:y1, x0:x1] = rgb
    elif shape.kind == "circle":
        cy, cx = (y0 + y1) / 2.0, (x0 + x1) / 2.0
        rad = min(y1 - y0, x1 - x0) / 2.0
        yy, xx = np.mgrid[y0:y1, x0:x1]
        mask = (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= rad * rad
        canvas[y0:y1, x0:x1][mask] = rgb
    else:  # upward triangle
        h = y1 - y0
        cx = (x0 + x1) / 2.0
        half_w = (x1 - x0) / 2.0
        yy, xx = np.mgrid[y0:y1, x0:x1]
        frac = (yy + 0.5 - y0) / h
        mask = np.abs(xx + 0.5 - cx) <= frac * half_w
        canvas[y0:y1, x0:x1][mask] = rgb


def _draw_glyphs(canvas: np.ndarray, text: str, scale: int) -> None:
    n = len(text)
    width = (6 * n - 1) * scale
    height = 7 * scale
    y0 = (canvas.shape[0] - height) // 2
    x = (canvas.shape[1] - width) // 2
    for ch in text:
        rows = FONT_5X7[ch]
        for r, row in enumerate(rows):
            for c, bit in enumerate(row):
                if bit == "#":
                    canvas[y0 + r * scale:y0 + (r + 1) * scale,
                           x + c * scale:x + (c + 1) * scale] = GLYPH_SHADE
        x += 6 * scale


def glyph_fit_scale(canvas: int, n_glyphs: int) -> int:
    """Largest integer pixel scale at which n glyphs fit with a margin."""
    return max(1, min((canvas - 4) // (6 * n_glyphs - 1), (canvas - 4) // 7))


def render(scene: SceneSpec) -> np.ndarray:
    img = np.full((scene.canvas, scene.canvas, 3), BACKGROUND, dtype=np.float32)
    for shape in scene.shapes:
        _draw_shape(img, scene, shape)
    if scene.glyphs:
        _draw_glyphs(img, scene.glyphs, scene.glyph_scale)
    return img


# ---------------------------------------------------------------------------
# descriptions derived from geometry
# ---------------------------------------------------------------------------

def shape_phrase(shape: Shape) -> str:
    return f"a {shape.color} {shape.kind}"


def list_phrase(shapes) -> str:
    parts = [shape_phrase(s) for s in shapes]
    if len(parts) == 1:
        return parts[0]
    return ", ".join(parts[:-1]) + " and " + parts[-1]


def relation_of(a: Shape, b: Shape) -> str:
    """The spatial relation of a w.r.t. b; horizontal wins ties."""
    dr = a.cell[0] - b.cell[0]
    dc = a.cell[1] - b.cell[1]
    if dc != 0 and abs(dc) >= abs(dr):
        return "left of" if dc < 0 else "right of"
    return "above" if dr < 0 else "below"


def semantic_caption(shapes) -> str:
    count = NUMBER_WORDS[len(shapes)]
    base = f"{count} shapes: {list_phrase(shapes)}." if len(shapes) > 1 \
        else f"one shape: {list_phrase(shapes)}."
    a, b = shapes[0], shapes[1]
    rel = relation_of(a, b)
    return f"{base} the {a.color} {a.kind} is {rel} the {b.color} {b.kind}."


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def _rng(seed: int, mix: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, _MIX_CODE[mix], index])


def _random_scene(rng, n_shapes: int, canvas: int, grid: int = 3,
                  distinct_kinds: bool = False, distinct_pairs: bool = False) -> SceneSpec:
    cells = rng.choice(grid * grid, size=n_shapes, replace=False)
    shapes = []
    used_pairs = set()
    for cell in cells:
        while True:
            kind = KINDS[rng.integers(len(KINDS))]
            color = COLOR_NAMES[rng.integers(len(COLOR_NAMES))]
            if distinct_kinds and any(s.kind == kind for s in shapes):
                continue
            if distinct_pairs and (kind, color) in used_pairs:
                continue
            break
        used_pairs.add((kind, color))
        shapes.append(Shape(kind=kind, color=color, cell=(int(cell) // grid, int(cell) % grid)))
    return SceneSpec(canvas=canvas, grid=grid, shapes=tuple(shapes))


def _canvas_size(rng, lo: int = 32, hi: int = 96) -> int:
    return int(rng.integers(lo // 8, hi // 8 + 1) * 8)


def gen_concept(seed: int, index: int) -> SynthSample:
    """Noisy short captions: a 30% irrelevant suffix and a 10% wrong color
    word mimic web alt-text."""
    rng = _rng(seed, "concept", index)
    scene = _random_scene(rng, int(rng.integers(1, 5)), _canvas_size(rng))
    caption = list_phrase(scene.shapes)
    noise = []
    if rng.random() < CONCEPT_WRONG_COLOR_RATE:
        noise.append("color")
        victim = scene.shapes[int(rng.integers(len(scene.shapes)))]
        wrong = COLOR_NAMES[(COLOR_NAMES.index(victim.color)
                             + 1 + int(rng.integers(len(COLOR_NAMES) - 1)))
                            % len(COLOR_NAMES)]
        caption = caption.replace(victim.color, wrong, 1)
    if rng.random() < CONCEPT_SUFFIX_RATE:
        noise.append("suffix")
        caption += _NOISE_SUFFIXES[int(rng.integers(len(_NOISE_SUFFIXES)))]
    return SynthSample(prompt="provide a one-sentence caption for the image.",
                       response=caption + ".", stage_tag=CONCEPT, index=index,
                       scene=scene, noise=tuple(noise))


def gen_semantic(seed: int, index: int) -> SynthSample:
    """Clean captions with a shape count and one true spatial relation."""
    rng = _rng(seed, "semantic", index)
    scene = _random_scene(rng, int(rng.integers(2, 6)), _canvas_size(rng))
    return SynthSample(prompt="describe the image.",
                       response=semantic_caption(scene.shapes),
                       stage_tag=SEMANTIC, index=index, scene=scene)


def alignment_category(seed: int, index: int) -> str:
    """The caption/detect/OCR draw for an alignment index (same stream
    the generator consumes first)."""
    u = _rng(seed, "align", index).random()
    if u < ALIGN_SHARES[0]:
        return "caption"
    if u < ALIGN_SHARES[0] + ALIGN_SHARES[1]:
        return "detect"
    return "ocr"


def _gen_ocr(rng, index: int, stage_tag: str, category: str,
             max_len: int = 3) -> SynthSample:
    n = int(rng.integers(1, max_len + 1))
    text = "".join(GLYPHS[int(rng.integers(len(GLYPHS)))] for _ in range(n))
    canvas = 64
    scene = SceneSpec(canvas=canvas, grid=3, glyphs=text,
                      glyph_scale=glyph_fit_scale(canvas, n))
    return SynthSample(prompt="read the text in the image.", response=text,
                       stage_tag=stage_tag, index=index, scene=scene,
                       category=category)


def gen_alignment(seed: int, index: int) -> SynthSample:
    """Task-mixed alignment data: captioning, boxed detection, OCR."""
    rng = _rng(seed, "align", index)
    u = rng.random()
    if u < ALIGN_SHARES[0]:
        scene = _random_scene(rng, int(rng.integers(2, 6)), _canvas_size(rng))
        return SynthSample(prompt="describe the image.",
                           response=semantic_caption(scene.shapes),
                           stage_tag=ALIGN_CAPTION, index=index, scene=scene,
                           category="caption")
    if u < ALIGN_SHARES[0] + ALIGN_SHARES[1]:
        scene = _random_scene(rng, int(rng.integers(1, 4)), 64, distinct_pairs=True)
        target = scene.shapes[int(rng.integers(len(scene.shapes)))]
        box = cell_box_1000(scene.grid, target.cell)
        name = f"the {target.color} {target.kind}"
        return SynthSample(
            prompt=f"detect {name} in the image.",
            response=f"<ref>{name}</ref><box>[[{box[0]},{box[1]},{box[2]},{box[3]}]]</box>",
            stage_tag=ALIGN_DETECT, index=index, scene=scene, category="detect")
    return _gen_ocr(rng, index, ALIGN_OCR, "ocr")


def gen_text_only(seed: int, index: int) -> SynthSample:
    """Small arithmetic word problems exercising the pure text path."""
    rng = _rng(seed, "text_only", index)
    a, b = int(rng.integers(0, 21)), int(rng.integers(0, 21))
    op = ("plus", "minus", "times")[int(rng.integers(3))]
    if op == "plus":
        value = a + b
    elif op == "minus":
        a, b = max(a, b), min(a, b)
        value = a - b
    else:
        a, b = a % 10, b % 10
        value = a * b
    return SynthSample(prompt=f"what is {a} {op} {b}?", response=str(value),
                       stage_tag=TEXT_ONLY, index=index, scene=None,
                       category="text_only")


def instruct_task(seed: int, index: int) -> str:
    u = _rng(seed, "instruct", index).random()
    edges = np.cumsum(INSTRUCT_SHARES)
    for name, edge in zip(("caption_qa", "count", "ocr", "text_only"), edges):
        if u < edge:
            return name
    return "text_only"


def gen_instruct(seed: int, index: int) -> SynthSample:
    """Instruction mix: follow-up caption QA, counting, OCR reading, and
    text-only arithmetic."""
    rng = _rng(seed, "instruct", index)
    u = rng.random()
    edges = np.cumsum(INSTRUCT_SHARES)
    if u < edges[0]:
        scene = _random_scene(rng, int(rng.integers(1, 4)), _canvas_size(rng),
                              distinct_kinds=True)
        asked = scene.shapes[int(rng.integers(len(scene.shapes)))]
        prior = f"describe the image.\n{list_phrase(scene.shapes)}."
        return SynthSample(prompt=f"{prior}\nwhat color is the {asked.kind}?",
                           response=asked.color, stage_tag=INSTRUCT, index=index,
                           scene=scene, category="caption_qa")
    if u < edges[1]:
        scene = _random_scene(rng, int(rng.integers(1, 6)), _canvas_size(rng))
        return SynthSample(prompt="how many shapes are in the image?",
                           response=NUMBER_WORDS[len(scene.shapes)],
                           stage_tag=INSTRUCT, index=index, scene=scene,
                           category="count")
    if u < edges[2]:
        return _gen_ocr(rng, index, INSTRUCT, "ocr")
    sample = gen_text_only(seed, index)
    return SynthSample(prompt=sample.prompt, response=sample.response,
                       stage_tag=INSTRUCT, index=index, scene=None,
                       category="text_only")


_GENERATORS = {
    "concept": gen_concept,
    "semantic": gen_semantic,
    "align": gen_alignment,
    "instruct": gen_instruct,
    "text_only": gen_text_only,
}


class SynthDataset:
    """Lazy indexable sample source with the nested-prefix property:
    datasets of sizes N < M agree on the first N indices."""

    def __init__(self, mix: str, size: int, seed: int, start: int = 0):
        if mix not in _GENERATORS:
            raise ValueError(f"unknown data mix {mix!r}; expected one of {STAGE_MIXES}")
        if size < 1:
            raise ValueError("dataset size must be >= 1")
        self.mix = mix
        self.size = size
        self.seed = seed
        self.start = start

    def __len__(self):
        return self.size

    def __getitem__(self, i: int) -> SynthSample:
        if not 0 <= i < self.size:
            raise IndexError(i)
        return _GENERATORS[self.mix](self.seed, self.start + i)


def dataset(mix: str, size: int, seed: int, start: int = 0) -> SynthDataset:
    return SynthDataset(mix, size, seed, start)
