"""Deterministic synthetic scenes: colored shapes with exact masks and
templated prompts, plus occlusion / clutter / low-resolution perturbations.

Every random draw comes from a splitmix64 stream seeded per sample, so a
scene depends only on ``(seed, canvas, scenario)`` and the object layout
does not depend on the scenario at all.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, FormatError
from .pnm import read_pgm, read_ppm, write_pgm, write_ppm
from .text_encoder import COLORS, SHAPES, split_words

SCENARIOS = ("clean", "occluded", "cluttered", "lowres")
NUM_CLASSES = 1 + len(SHAPES) * len(COLORS)
CLASS_NAMES = ["background"] + [f"{c} {s}" for s in SHAPES for c in COLORS]
MANIFEST_VERSION = 1

RGB = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.70, 0.20),
    "blue": (0.15, 0.30, 0.85),
    "yellow": (0.90, 0.85, 0.15),
}
# stroke colors chosen away from every class color
DISTRACTOR_RGB = ((1.0, 0.0, 1.0), (0.0, 1.0, 1.0), (1.0, 1.0, 1.0), (0.05, 0.05, 0.05), (0.55, 0.35, 0.2))

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Vigna's splitmix64 generator."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return _mix64(self.state)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * ((self.next_u64() >> 11) * (1.0 / (1 << 53)))

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in the closed range [lo, hi]."""
        if hi < lo:
            raise ContractError(f"empty range [{lo}, {hi}]")
        return lo + self.next_u64() % (hi - lo + 1)

    def choice(self, seq: Sequence):
        return seq[self.randint(0, len(seq) - 1)]


def derive_seed(base: int, index: int) -> int:
    """Seed of sample ``index`` in a dataset generated from ``base``."""
    return _mix64((base + (index + 1) * GOLDEN) & MASK64)


def class_id(shape: str, color: str) -> int:
    return 1 + len(COLORS) * SHAPES.index(shape) + COLORS.index(color)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cx: int
    cy: int
    size: int

    @property
    def class_id(self) -> int:
        return class_id(self.shape, self.color)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    height: int
    width: int
    objects: tuple[SceneObject, ...]


@dataclass
class SegSample:
    image: np.ndarray          # [3, H, W] in [0, 1]
    mask: np.ndarray           # [H, W] int64 class ids
    prompt: str
    scenario: str = "clean"
    seed: int = 0
    meta: dict = field(default_factory=dict, compare=False, repr=False)


def shape_region(obj: SceneObject, height: int, width: int) -> np.ndarray:
    """Boolean raster of the pixels whose centers fall inside ``obj``."""
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    dx, dy = x - obj.cx, y - obj.cy
    s = float(obj.size)
    if obj.shape == "circle":
        return dx * dx + dy * dy <= s * s
    if obj.shape == "square":
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if obj.shape == "triangle":
        # apex at (cx, cy - s), base from (cx - s, cy + s) to (cx + s, cy + s)
        return (dy <= s) & (2.0 * np.abs(dx) <= dy + s)
    raise ContractError(f"unknown shape {obj.shape!r}")


def size_range(height: int, width: int) -> tuple[int, int]:
    side = min(height, width)
    lo = max(1, round(side * 0.08))
    hi = max(lo, min(round(side * 0.16), (side - 1) // 2))
    return min(lo, hi), hi


def sample_spec(seed: int, height: int, width: int, rng: SplitMix64 | None = None) -> SceneSpec:
    rng = rng or SplitMix64(seed)
    lo, hi = size_range(height, width)
    objects = []
    for _ in range(rng.randint(1, 4)):
        shape = rng.choice(SHAPES)
        color = rng.choice(COLORS)
        size = rng.randint(lo, hi)
        cx = rng.randint(size, width - 1 - size)
        cy = rng.randint(size, height - 1 - size)
        objects.append(SceneObject(shape, color, cx, cy, size))
    return SceneSpec(seed, height, width, tuple(objects))


def _phrase(obj: SceneObject) -> str:
    return f"{obj.color} {obj.shape}"


def render_prompt(spec: SceneSpec) -> str:
    """``a scene with <color> <shape>[, <color> <shape>]*`` with one spatial
    clause relating the first two objects."""
    objs = spec.objects
    if not objs:
        raise ContractError("a prompt needs at least one object")
    if len(objs) == 1:
        return f"a scene with {_phrase(objs[0])}"
    a, b = objs[0], objs[1]
    if abs(a.cx - b.cx) >= abs(a.cy - b.cy):
        first, second = (a, b) if a.cx <= b.cx else (b, a)
        clause = f"{_phrase(first)} left of {_phrase(second)}"
    else:
        first, second = (a, b) if a.cy <= b.cy else (b, a)
        clause = f"{_phrase(first)} above {_phrase(second)}"
    rest = "".join(f", {_phrase(o)}" for o in objs[2:])
    return f"a scene with {clause}{rest}"


def parse_prompt(prompt: str) -> list[tuple[str, str]]:
    """Recover the (color, shape) pairs mentioned in a templated prompt."""
    words = split_words(prompt)
    return [(w, words[i + 1]) for i, w in enumerate(words[:-1]) if w in COLORS and words[i + 1] in SHAPES]


def render(spec: SceneSpec, rng: SplitMix64, textured: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Image, class mask and object-index map (-1 = background)."""
    h, w = spec.height, spec.width
    base = rng.uniform(0.35, 0.65)
    tint = [rng.uniform(-0.05, 0.05) for _ in range(3)]
    shades = [rng.uniform(0.85, 1.0) for _ in spec.objects]
    image = np.empty((3, h, w))
    for c in range(3):
        image[c] = base + tint[c]
    if textured:
        noise = np.array([rng.uniform(-0.06, 0.06) for _ in range(h * w)]).reshape(h, w)
        image += noise[None]
    mask = np.zeros((h, w), dtype=np.int64)
    owner = np.full((h, w), -1, dtype=np.int64)
    for i, (obj, shade) in enumerate(zip(spec.objects, shades)):
        region = shape_region(obj, h, w)
        for c in range(3):
            image[c][region] = RGB[obj.color][c] * shade
        mask[region] = obj.class_id
        owner[region] = i
    return image, mask, owner


def _draw_strokes(image: np.ndarray, rng: SplitMix64, count: int) -> None:
    _, h, w = image.shape
    directions = ((1, 0), (0, 1), (1, 1), (1, -1))
    for _ in range(count):
        x, y = rng.randint(0, w - 1), rng.randint(0, h - 1)
        dx, dy = rng.choice(directions)
        length = rng.randint(3, 8)
        color = rng.choice(DISTRACTOR_RGB)
        for t in range(length):
            px, py = x + t * dx, y + t * dy
            if 0 <= px < w and 0 <= py < h:
                image[:, py, px] = color


def _occluder(owner: np.ndarray, target: int, rng: SplitMix64) -> tuple[np.ndarray, float]:
    """Axis-aligned bar hiding 20-40% of the target object's pixels."""
    obj = owner == target
    total = int(obj.sum())
    ys, xs = np.nonzero(obj)
    h, w = owner.shape
    first_axis = rng.randint(0, 1)
    for axis in (first_axis, 1 - first_axis):
        counts = obj.sum(axis=axis)               # per column if axis == 0, per row otherwise
        lo_i, hi_i = (xs.min(), xs.max()) if axis == 0 else (ys.min(), ys.max())
        prefix = np.concatenate([[0], np.cumsum(counts)])
        options = [(s, e) for s in range(lo_i, hi_i + 1) for e in range(s + 1, hi_i + 2)
                   if 0.20 <= (prefix[e] - prefix[s]) / total <= 0.40]
        if not options:
            continue
        s, e = options[rng.randint(0, len(options) - 1)]
        bar = np.zeros_like(obj)
        if axis == 0:
            bar[max(ys.min() - 2, 0):min(ys.max() + 3, h), s:e] = True
        else:
            bar[s:e, max(xs.min() - 2, 0):min(xs.max() + 3, w)] = True
        return bar, float((bar & obj).sum()) / total
    raise ContractError("object too small to occlude within 20-40%")


def lowres(image: np.ndarray, factor: int = 4) -> np.ndarray:
    """Nearest-neighbor downsample then upsample by ``factor``."""
    _, h, w = image.shape
    small = image[:, ::factor, ::factor]
    return np.repeat(np.repeat(small, factor, axis=1), factor, axis=2)[:, :h, :w].copy()


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def generate_scene(seed: int, height: int = 64, width: int = 64, scenario: str = "clean") -> SegSample:
    """Render one sample; identical arguments give bit-identical output.

    Images are quantized to 8 bits so that they survive a PPM roundtrip
    unchanged.
    """
    if scenario not in SCENARIOS:
        raise ContractError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    if height < 4 or width < 4:
        raise ContractError(f"canvas {height}x{width} too small")
    rng = SplitMix64(seed)
    spec = sample_spec(seed, height, width, rng)
    image, mask, owner = render(spec, rng, textured=scenario == "cluttered")
    meta: dict = {"spec": spec}
    if scenario == "cluttered":
        clutter = np.zeros_like(image)
        _draw_strokes(clutter, rng, 30)
        # black strokes are 0.05, never exactly zero
        clutter_mask = clutter.any(axis=0)
        # strokes sit on the background, under every object
        bg = owner < 0
        for c in range(3):
            image[c][clutter_mask & bg] = clutter[c][clutter_mask & bg]
    elif scenario == "occluded":
        target = len(spec.objects) - 1
        bar, frac = _occluder(owner, target, rng)
        gray = rng.uniform(0.4, 0.6)
        image[:, bar] = gray
        meta.update(occluder=bar, target=target, occluded_fraction=frac)
    elif scenario == "lowres":
        image = lowres(image, 4)
    meta["owner"] = owner
    return SegSample(quantize(image), mask, render_prompt(spec), scenario, seed, meta)


def generate_dataset(n: int, seed: int, height: int = 64, width: int = 64,
                     scenarios: Sequence[str] = ("clean",), start: int = 0) -> list[SegSample]:
    """``n`` samples with per-index seeds; scenarios are assigned round-robin."""
    if n < 0:
        raise ContractError(f"sample count must be non-negative, got {n}")
    return [generate_scene(derive_seed(seed, i), height, width, scenarios[i % len(scenarios)])
            for i in range(start, start + n)]


# ---------------------------------------------------------------- on-disk format

@dataclass
class DatasetManifest:
    version: int
    classes: list[str]
    samples: list[dict]

    def to_json(self) -> dict:
        return {"version": self.version, "classes": self.classes, "samples": self.samples}


def write_dataset(samples: Iterable[SegSample], directory) -> DatasetManifest:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        name = f"{i:06d}"
        write_ppm(root / "images" / f"{name}.ppm", s.image)
        write_pgm(root / "masks" / f"{name}.pgm", s.mask)
        entries.append({"image": f"images/{name}.ppm", "mask": f"masks/{name}.pgm",
                        "prompt": s.prompt, "scenario": s.scenario, "seed": int(s.seed)})
    manifest = DatasetManifest(MANIFEST_VERSION, list(CLASS_NAMES), entries)
    (root / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=1) + "\n", encoding="utf-8")
    return manifest


def read_manifest(directory) -> DatasetManifest:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"missing dataset manifest: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict) or set(raw) != {"version", "classes", "samples"}:
        raise FormatError(f"{path}: expected keys version, classes, samples")
    if raw["version"] != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {raw['version']}")
    if raw["classes"] != CLASS_NAMES:
        raise FormatError(f"{path}: class table does not match the {NUM_CLASSES} known classes")
    for i, e in enumerate(raw["samples"]):
        if not isinstance(e, dict) or set(e) != {"image", "mask", "prompt", "scenario", "seed"}:
            raise FormatError(f"{path}: sample {i} has malformed fields")
        if e["scenario"] not in SCENARIOS:
            raise FormatError(f"{path}: sample {i} has unknown scenario {e['scenario']!r}")
    return DatasetManifest(raw["version"], raw["classes"], raw["samples"])


def load_dataset(directory) -> list[SegSample]:
    root = Path(directory)
    manifest = read_manifest(root)
    samples = []
    for e in manifest.samples:
        img_path, mask_path = root / e["image"], root / e["mask"]
        for p in (img_path, mask_path):
            if not p.is_file():
                raise FileNotFoundError(f"missing dataset file: {p}")
        image, mask = read_ppm(img_path), read_pgm(mask_path)
        if image.shape[1:] != mask.shape:
            raise FormatError(f"{img_path} and {mask_path} differ in size")
        if mask.max(initial=0) >= NUM_CLASSES:
            raise FormatError(f"{mask_path}: class id {mask.max()} outside the class table")
        samples.append(SegSample(image, mask, e["prompt"], e["scenario"], int(e["seed"])))
    return samples


def rerender(samples: Iterable[SegSample], scenario: str) -> list[SegSample]:
    """The same scenes (by seed and canvas) rendered under another scenario."""
    return [generate_scene(s.seed, s.mask.shape[0], s.mask.shape[1], scenario) for s in samples]


def holdout_split(samples: Sequence[SegSample], fraction: float = 0.2) -> tuple[list, list]:
    """Train / held-out split: the last ``fraction`` of samples by index."""
    n_test = int(round(len(samples) * fraction))
    cut = len(samples) - n_test
    return list(samples[:cut]), list(samples[cut:])
