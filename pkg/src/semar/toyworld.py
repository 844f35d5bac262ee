"""Synthetic shapes world: scenes, rasters, captions, QA pairs, frozen encoders.

A scene is a 4x4 grid holding 1..3 colored shapes. Rasters are 16x16x3 floats
in [0,1] (4x4 pixel cells). The two frozen encoders stand in for pretrained
vision towers: a handcrafted per-cell semantic feature and an orthogonal
patch-isometry whose inverse is exact, so pixel quality is measurable as
latent MSE. Everything here is a pure function of (seed, scene).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GRID = 4
CELL = 4
IMG = GRID * CELL
NUM_SLOTS = GRID * GRID
DS = 32
DP = CELL * CELL * 3
PIXEL_BASIS_SEED = 770245  # committed; regenerating Q requires changing this

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
ROW_NAMES = ("top", "upper", "lower", "bottom")
COL_NAMES = ("left", "midleft", "midright", "right")

# 4x4 occupancy masks; fill ratios 12/16, 16/16, 10/16 keep shapes separable
# from pixel statistics alone
_CIRCLE = np.ones((CELL, CELL), dtype=bool)
_CIRCLE[[0, 0, -1, -1], [0, -1, 0, -1]] = False
_SQUARE = np.ones((CELL, CELL), dtype=bool)
_TRIANGLE = np.tril(np.ones((CELL, CELL), dtype=bool))
SHAPE_MASKS = {"circle": _CIRCLE, "square": _SQUARE, "triangle": _TRIANGLE}


def position_name(row: int, col: int) -> str:
    return f"{ROW_NAMES[row]} {COL_NAMES[col]}"


class Vocab:
    """Bijective token table; grid positions are single tokens."""

    SPECIALS = ("<pad>", "<bos>", "<eos>", "<boi>", "<eoi>", "<q>", "<a>")
    WORDS = ("a", "at", "and", "what", "color", "shape", "is", "the", "where", "?")

    def __init__(self):
        positions = tuple(position_name(r, c) for r in range(GRID) for c in range(GRID))
        self.tokens: tuple[str, ...] = self.SPECIALS + self.WORDS + COLORS + SHAPES + positions
        assert len(self.tokens) < 64
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        assert len(self.ids) == len(self.tokens)
        self.pad = self.ids["<pad>"]
        self.bos = self.ids["<bos>"]
        self.eos = self.ids["<eos>"]
        self.boi = self.ids["<boi>"]
        self.eoi = self.ids["<eoi>"]
        self.q = self.ids["<q>"]
        self.a = self.ids["<a>"]
        self.color_ids = tuple(self.ids[c] for c in COLORS)
        self.shape_ids = tuple(self.ids[s] for s in SHAPES)
        self.position_ids = tuple(self.ids[p] for p in positions)

    def __len__(self):
        return len(self.tokens)

    def encode(self, words) -> list[int]:
        return [self.ids[w] for w in words]

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]


VOCAB = Vocab()


@dataclass(frozen=True)
class Obj:
    row: int
    col: int
    shape: str
    color: str

    def __post_init__(self):
        if not (0 <= self.row < GRID and 0 <= self.col < GRID):
            raise ValueError(f"cell ({self.row},{self.col}) outside {GRID}x{GRID} grid")
        if self.shape not in SHAPES or self.color not in COLORS:
            raise ValueError(f"unknown attributes {self.shape}/{self.color}")


@dataclass(frozen=True)
class Scene:
    objects: tuple[Obj, ...]

    def __post_init__(self):
        if not 1 <= len(self.objects) <= 3:
            raise ValueError(f"scene must hold 1..3 objects, got {len(self.objects)}")
        cells = [(o.row, o.col) for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("two objects share a cell")
        ordered = tuple(sorted(self.objects, key=lambda o: (o.row, o.col)))
        object.__setattr__(self, "objects", ordered)


@dataclass(frozen=True)
class ToySample:
    scene: Scene
    raster: np.ndarray          # (IMG, IMG, 3) in [0,1]
    caption: list[int]
    qa: list[tuple[list[int], int]]
    semantic: np.ndarray        # (NUM_SLOTS, DS)
    pixel_latents: np.ndarray   # (NUM_SLOTS, DP)


def generate_scene(rng: np.random.Generator) -> Scene:
    count = int(rng.integers(1, 4))
    cells = rng.choice(NUM_SLOTS, size=count, replace=False)
    objs = []
    for cell in cells:
        objs.append(Obj(row=int(cell) // GRID, col=int(cell) % GRID,
                        shape=SHAPES[int(rng.integers(len(SHAPES)))],
                        color=COLORS[int(rng.integers(len(COLORS)))]))
    return Scene(tuple(objs))


def render(scene: Scene) -> np.ndarray:
    raster = np.zeros((IMG, IMG, 3), dtype=np.float32)
    for o in scene.objects:
        mask = SHAPE_MASKS[o.shape]
        block = raster[o.row * CELL:(o.row + 1) * CELL, o.col * CELL:(o.col + 1) * CELL]
        block[mask] = COLOR_RGB[o.color]
    return raster


def caption(scene: Scene) -> list[int]:
    words: list[str] = []
    for i, o in enumerate(scene.objects):
        if i:
            words.append("and")
        words += ["a", o.color, o.shape, "at", position_name(o.row, o.col)]
    return VOCAB.encode(words)


def caption_string(scene: Scene) -> str:
    return " ".join(VOCAB.decode(caption(scene)))


def qa_pairs(scene: Scene) -> list[tuple[list[int], int]]:
    """One QA pair per object attribute; ambiguous references are skipped."""
    shape_counts: dict[str, int] = {}
    pair_counts: dict[tuple[str, str], int] = {}
    for o in scene.objects:
        shape_counts[o.shape] = shape_counts.get(o.shape, 0) + 1
        key = (o.color, o.shape)
        pair_counts[key] = pair_counts.get(key, 0) + 1
    out = []
    for o in scene.objects:
        if shape_counts[o.shape] == 1:
            q = VOCAB.encode(["what", "color", "is", "the", o.shape, "?"])
            out.append((q, VOCAB.ids[o.color]))
        if pair_counts[(o.color, o.shape)] == 1:
            q = VOCAB.encode(["where", "is", "the", o.color, o.shape, "?"])
            out.append((q, VOCAB.ids[position_name(o.row, o.col)]))
        q = VOCAB.encode(["what", "shape", "is", "at", position_name(o.row, o.col), "?"])
        out.append((q, VOCAB.ids[o.shape]))
    return out


def answer_candidates(question: list[int]) -> tuple[int, ...]:
    """Legal single-token answers for a question, from its interrogative form."""
    head = VOCAB.decode(question[:2])
    if head == ["what", "color"]:
        return VOCAB.color_ids
    if head == ["what", "shape"]:
        return VOCAB.shape_ids
    if head[0] == "where":
        return VOCAB.position_ids
    raise ValueError(f"unrecognized question form: {' '.join(VOCAB.decode(question))}")


# ---------------------------------------------------------------------------
# caption parsing (reference grammar, used by eval round trips)
# ---------------------------------------------------------------------------


def parse_caption(ids) -> Scene | None:
    """Inverse of caption(); None when the token stream is not grammatical."""
    words = []
    try:
        words = VOCAB.decode(ids)
    except IndexError:
        return None
    pos_by_name = {position_name(r, c): (r, c) for r in range(GRID) for c in range(GRID)}
    objs = []
    i = 0
    while i < len(words):
        if objs:
            if words[i] != "and":
                return None
            i += 1
        if i + 4 >= len(words) or words[i] != "a" or words[i + 3] != "at":
            return None
        color, shape, pos = words[i + 1], words[i + 2], words[i + 4]
        if color not in COLORS or shape not in SHAPES or pos not in pos_by_name:
            return None
        r, c = pos_by_name[pos]
        objs.append(Obj(row=r, col=c, shape=shape, color=color))
        i += 5
    try:
        return Scene(tuple(objs))
    except ValueError:
        return None


# ---------------------------------------------------------------------------
# frozen encoders
# ---------------------------------------------------------------------------


def _cells(raster: np.ndarray):
    for r in range(GRID):
        for c in range(GRID):
            yield r, c, raster[r * CELL:(r + 1) * CELL, c * CELL:(c + 1) * CELL]


def encode_semantic(raster: np.ndarray) -> np.ndarray:
    """Per-cell handcrafted features, zero-padded to DS dims.

    Layout: mean RGB (3) | palette histogram (4) | occupancy (1) |
    fill ratio + edge transitions (2) | cell position (2) | zero pad.
    The positional block keeps every feature vector away from zero norm.
    """
    if raster.shape != (IMG, IMG, 3):
        raise ValueError(f"raster shape {raster.shape}, want {(IMG, IMG, 3)}")
    out = np.zeros((NUM_SLOTS, DS), dtype=np.float32)
    for r, c, patch in _cells(raster):
        lit = patch.max(axis=-1) > 0.5
        f = np.zeros(DS, dtype=np.float32)
        f[0:3] = patch.reshape(-1, 3).mean(axis=0)
        for k, name in enumerate(COLORS):
            rgb = np.array(COLOR_RGB[name], dtype=np.float32)
            f[3 + k] = float((np.abs(patch - rgb).sum(axis=-1) < 0.25).mean())
        f[7] = 1.0 if lit.any() else 0.0
        f[8] = float(lit.mean())
        horiz = (lit[:, 1:] != lit[:, :-1]).sum()
        vert = (lit[1:, :] != lit[:-1, :]).sum()
        f[9] = (horiz + vert) / (2.0 * CELL * (CELL - 1))
        f[10] = (r + 0.5) / GRID
        f[11] = (c + 0.5) / GRID
        out[r * GRID + c] = f
    return out


def classify_cells(raster: np.ndarray) -> list[tuple[str, str] | None]:
    """Deterministic per-cell (color, shape) read-back; None for empty cells.

    Inverts the rendering statistics: occupancy from lit count, color by
    nearest palette RGB over lit pixels, shape by nearest fill ratio.
    """
    fills = {name: float(mask.mean()) for name, mask in SHAPE_MASKS.items()}
    out: list[tuple[str, str] | None] = []
    for _, _, patch in _cells(raster):
        lit = patch.max(axis=-1) > 0.5
        if lit.sum() < fills["triangle"] * CELL * CELL / 2:
            out.append(None)
            continue
        mean_rgb = patch[lit].mean(axis=0)
        color = min(COLORS, key=lambda n: float(np.square(mean_rgb - np.array(COLOR_RGB[n])).sum()))
        ratio = float(lit.mean())
        shape = min(fills, key=lambda n: abs(fills[n] - ratio))
        out.append((color, shape))
    return out


def _pixel_basis() -> np.ndarray:
    rng = np.random.default_rng(PIXEL_BASIS_SEED)
    a = rng.standard_normal((DP, DP))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))  # canonical sign, float64


_Q = _pixel_basis()


def pixel_basis() -> np.ndarray:
    return _Q


def encode_pixel(raster: np.ndarray) -> np.ndarray:
    if raster.shape != (IMG, IMG, 3):
        raise ValueError(f"raster shape {raster.shape}, want {(IMG, IMG, 3)}")
    out = np.zeros((NUM_SLOTS, DP), dtype=np.float32)
    for r, c, patch in _cells(raster):
        out[r * GRID + c] = (_Q @ patch.reshape(-1).astype(np.float64)).astype(np.float32)
    return out


def decode_pixel(latents: np.ndarray) -> np.ndarray:
    latents = np.asarray(latents)
    if latents.shape != (NUM_SLOTS, DP):
        raise ValueError(f"latent shape {latents.shape}, want {(NUM_SLOTS, DP)}")
    raster = np.zeros((IMG, IMG, 3), dtype=np.float32)
    for idx in range(NUM_SLOTS):
        r, c = divmod(idx, GRID)
        patch = (_Q.T @ latents[idx].astype(np.float64)).reshape(CELL, CELL, 3)
        raster[r * CELL:(r + 1) * CELL, c * CELL:(c + 1) * CELL] = patch
    return raster


def make_sample(scene: Scene) -> ToySample:
    raster = render(scene)
    return ToySample(scene=scene, raster=raster, caption=caption(scene),
                     qa=qa_pairs(scene), semantic=encode_semantic(raster),
                     pixel_latents=encode_pixel(raster))


# ---------------------------------------------------------------------------
# corpus I/O: length-prefixed records + JSON manifest
# ---------------------------------------------------------------------------


def world_digest() -> str:
    cfg = {"grid": GRID, "cell": CELL, "ds": DS, "dp": DP,
           "pixel_seed": PIXEL_BASIS_SEED, "vocab": VOCAB.tokens}
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _scene_record(scene: Scene) -> bytes:
    return json.dumps(
        {"objects": [[o.row, o.col, o.shape, o.color] for o in scene.objects]},
        separators=(",", ":")).encode()


def _record_scene(raw: bytes) -> Scene:
    d = json.loads(raw.decode())
    return Scene(tuple(Obj(row=r, col=c, shape=s, color=k) for r, c, s, k in d["objects"]))


def generate_corpus(size: int, seed: int) -> list[Scene]:
    rng = np.random.default_rng(seed)
    return [generate_scene(rng) for _ in range(size)]


def save_corpus(path, scenes: list[Scene], seed: int) -> dict:
    """Write scenes as length-prefixed records plus a manifest JSON sidecar.

    Rasters and features are not stored; they are pure functions of the scene
    and the committed world constants, so records stay a few dozen bytes.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        for scene in scenes:
            rec = _scene_record(scene)
            f.write(struct.pack("<I", len(rec)))
            f.write(rec)
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    manifest = {"seed": seed, "count": len(scenes), "config_digest": world_digest(),
                "corpus_digest": digest}
    path.with_suffix(".manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_corpus(path) -> list[Scene]:
    path = Path(path)
    blob = path.read_bytes()
    scenes = []
    off = 0
    while off < len(blob):
        if off + 4 > len(blob):
            raise ValueError(f"truncated corpus record at byte {off}")
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        if off + n > len(blob):
            raise ValueError(f"truncated corpus record at byte {off}")
        scenes.append(_record_scene(blob[off:off + n]))
        off += n
    return scenes
