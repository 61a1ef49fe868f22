"""Synthetic datasets: colored geometric primitives on textured backgrounds.

Three generators share the same rasterizer: per-pixel class maps for
semantic segmentation, referring expressions with binary masks, and layered
planar-depth scenes. Everything is drawn from a seeded stream, so a
(generator, n, seed) triple identifies a dataset exactly.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .rng import Rng

SHAPE_NAMES = ["circle", "square", "triangle", "ring", "cross"]
SEMSEG_CLASS_NAMES = ["background"] + SHAPE_NAMES
SCENE_NAMES = ["kitchen", "bathroom", "office", "bedroom"]
POSITIONS = ["left", "right", "top", "bottom"]

PALETTE = {
    "circle": (0.85, 0.20, 0.20),
    "square": (0.20, 0.80, 0.25),
    "triangle": (0.20, 0.30, 0.85),
    "ring": (0.85, 0.80, 0.20),
    "cross": (0.80, 0.25, 0.80),
}

SCENE_TINTS = {
    "kitchen": (0.50, 0.46, 0.40),
    "bathroom": (0.42, 0.48, 0.52),
    "office": (0.46, 0.46, 0.46),
    "bedroom": (0.52, 0.44, 0.44),
}


CAPTION_SET_SIZE = 3


@dataclass
class TaskBatch:
    """One training batch: images in [0,1], task labels, optional prompts."""

    images: object  # Tensor B x 3 x H x W
    labels: np.ndarray
    task: str
    prompts: list | None = None
    captions: list | None = None


@dataclass
class Dataset:
    task: str
    images: np.ndarray  # N x 3 x S x S float32 in [0, 1]
    labels: np.ndarray  # class map / binary mask / depth map
    class_names: list
    prompts: list = None  # per-sample expression or scene name
    captions: list = None  # per-sample caption set for generative pretraining
    meta: list = field(default_factory=list)

    def __len__(self):
        return self.images.shape[0]


def _caption_set(present, pad_caption):
    """Fixed-size caption list naming image content.

    A multi-prompt set during generative pretraining is what trains the
    cross-attention to pick the matching prompt per position; a single
    prompt gives the query/key projections no selection signal at all.
    """
    caps = [f"a photo of a {name}" for name in present[: CAPTION_SET_SIZE]]
    while len(caps) < CAPTION_SET_SIZE:
        caps.append(pad_caption)
    return caps


def shape_mask(name, side, cx, cy, r):
    yy, xx = np.mgrid[0:side, 0:side]
    dx, dy = xx - cx, yy - cy
    if name == "circle":
        return dx * dx + dy * dy <= r * r
    if name == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= r
    if name == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    if name == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if name == "cross":
        w = max(int(round(r * 0.35)), 1)
        return ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= w) & (np.abs(dx) <= r)
        )
    raise ConfigError(f"unknown shape {name!r}")


def _textured_background(side, rng, base=(0.45, 0.45, 0.45), amplitude=0.02):
    img = np.empty((3, side, side), dtype=np.float32)
    for c in range(3):
        img[c] = base[c] + amplitude * rng.normal((side, side))
    return np.clip(img, 0.0, 1.0)


def _paint(img, mask, color, rng, jitter=0.04):
    shade = [np.clip(c + jitter * float(rng.normal(())), 0.0, 1.0) for c in color]
    for c in range(3):
        img[c][mask] = shade[c]


def _place(rng, side, r):
    cx = int(rng.integers(r + 1, side - r - 1))
    cy = int(rng.integers(r + 1, side - r - 1))
    return cx, cy


def gen_shapes_semseg(n, classes=6, side=64, seed=0) -> Dataset:
    """Colored primitives on textured noise; per-pixel class labels.

    Class 0 is the background; classes 1..K-1 are shape kinds in a fixed
    order, so the class list doubles as the prompt vocabulary.
    """
    if classes < 2 or classes > len(SEMSEG_CLASS_NAMES):
        raise ConfigError(f"semseg classes must be in [2, {len(SEMSEG_CLASS_NAMES)}]")
    rng = Rng(seed)
    names = SEMSEG_CLASS_NAMES[:classes]
    shape_kinds = names[1:]
    images = np.empty((n, 3, side, side), dtype=np.float32)
    labels = np.zeros((n, side, side), dtype=np.uint8)
    captions = []
    for i in range(n):
        img = _textured_background(side, rng)
        label = np.zeros((side, side), dtype=np.uint8)
        count = int(rng.integers(1, 4))
        areas = {}
        for _ in range(count):
            kind_idx = int(rng.integers(0, len(shape_kinds)))
            kind = shape_kinds[kind_idx]
            r = int(rng.integers(side // 10, side // 4))
            cx, cy = _place(rng, side, r)
            mask = shape_mask(kind, side, cx, cy, r)
            _paint(img, mask, PALETTE[kind], rng)
            label[mask] = kind_idx + 1
            areas[kind] = areas.get(kind, 0) + int(mask.sum())
        images[i] = img
        labels[i] = label
        by_area = [k for k, _ in sorted(areas.items(), key=lambda kv: -kv[1])]
        captions.append(_caption_set(by_area, "a photo of a background"))
    return Dataset("semseg", images, labels, names, captions=captions)


def gen_refseg(n, side=64, seed=0) -> Dataset:
    """Two-object scenes with positional referring expressions.

    Samples come in pairs over the same scene, one expression per object,
    so expressions on a shared scene select different masks.
    """
    if n % 2:
        n += 1
    rng = Rng(seed)
    images = np.empty((n, 3, side, side), dtype=np.float32)
    labels = np.zeros((n, side, side), dtype=np.uint8)
    prompts = []
    captions = []
    meta = []
    for pair in range(n // 2):
        img = _textured_background(side, rng)
        axis = "horizontal" if rng.uniform(0, 1, ()) < 0.5 else "vertical"
        kinds = list(rng.choice(SHAPE_NAMES, size=2))
        while kinds[0] == kinds[1]:
            kinds[1] = str(rng.choice(SHAPE_NAMES))
        r = side // 6
        masks = []
        for slot in range(2):
            if axis == "horizontal":
                lo = r + 1 if slot == 0 else side // 2 + r
                hi = side // 2 - r if slot == 0 else side - r - 1
                cx = int(rng.integers(lo, hi))
                cy = int(rng.integers(r + 1, side - r - 1))
            else:
                cx = int(rng.integers(r + 1, side - r - 1))
                lo = r + 1 if slot == 0 else side // 2 + r
                hi = side // 2 - r if slot == 0 else side - r - 1
                cy = int(rng.integers(lo, hi))
            radius = int(rng.integers(side // 8, side // 5))
            mask = shape_mask(str(kinds[slot]), side, cx, cy, radius)
            _paint(img, mask, PALETTE[str(kinds[slot])], rng)
            masks.append(mask)
        # later paint wins overlapping pixels
        masks[0] = masks[0] & ~masks[1]
        words = ("left", "right") if axis == "horizontal" else ("top", "bottom")
        for slot in range(2):
            idx = 2 * pair + slot
            images[idx] = img
            labels[idx] = masks[slot].astype(np.uint8)
            expression = f"the {words[slot]} {kinds[slot]}"
            prompts.append(expression)
            captions.append(_caption_set([str(k) for k in kinds],
                                         "a photo of a background"))
            meta.append({"scene": pair, "expression": expression})
    return Dataset("refseg", images, labels, ["object"], prompts=prompts,
                   captions=captions, meta=meta)


def gen_depth(n, side=64, seed=0, max_depth=10.0) -> Dataset:
    """Layered planar primitives with analytic depth and a scene tag.

    The background is a slanted plane; each primitive is a shallower plane,
    composited with a z-buffer so the nearest surface wins per pixel.
    """
    rng = Rng(seed)
    images = np.empty((n, 3, side, side), dtype=np.float32)
    depths = np.empty((n, side, side), dtype=np.float32)
    prompts = []
    captions = []
    meta = []
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    for i in range(n):
        scene = str(rng.choice(SCENE_NAMES))
        img = _textured_background(side, rng, base=SCENE_TINTS[scene])
        bg = (
            6.0
            + 2.0 * float(rng.uniform(-1, 1, ())) * (xx / side)
            + 2.0 * float(rng.uniform(-1, 1, ())) * (yy / side)
        )
        depth = np.clip(bg, 0.5, max_depth)
        objects = []
        for _ in range(int(rng.integers(1, 4))):
            kind = str(rng.choice(SHAPE_NAMES))
            r = int(rng.integers(side // 10, side // 4))
            cx, cy = _place(rng, side, r)
            c0 = float(rng.uniform(1.0, 5.0, ()))
            ax = float(rng.uniform(-0.5, 0.5, ())) / side
            by = float(rng.uniform(-0.5, 0.5, ())) / side
            mask = shape_mask(kind, side, cx, cy, r)
            plane = np.clip(c0 + ax * (xx - cx) + by * (yy - cy), 0.5, max_depth)
            closer = mask & (plane < depth)
            depth = np.where(closer, plane, depth)
            shade = np.clip(1.05 - 0.06 * plane, 0.3, 1.0)
            for c in range(3):
                img[c] = np.where(closer, PALETTE[kind][c] * shade, img[c])
            objects.append(
                {"kind": kind, "cx": cx, "cy": cy, "r": r, "c0": c0, "ax": ax, "by": by}
            )
        images[i] = img.astype(np.float32)
        depths[i] = depth.astype(np.float32)
        prompts.append(scene)
        captions.append(_caption_set([scene] + [o["kind"] for o in objects],
                                     f"a photo of a {scene}"))
        meta.append({"scene": scene, "objects": objects})
    return Dataset("depth", images, depths, list(SCENE_NAMES), prompts=prompts,
                   captions=captions, meta=meta)


GENERATORS = {
    "shapes_semseg": gen_shapes_semseg,
    "refseg": gen_refseg,
    "depth": gen_depth,
}


def dataset_from_spec(spec: dict) -> Dataset:
    """Build a dataset from a manifest entry: a generator spec or file list."""
    if "files" in spec:
        return _load_files(spec["files"], spec.get("task", "semseg"))
    name = spec.get("name")
    if name not in GENERATORS:
        raise ConfigError(
            f"dataset: unknown generator {name!r}, expected one of {sorted(GENERATORS)}"
        )
    kwargs = {k: v for k, v in spec.items() if k not in ("name", "task")}
    return GENERATORS[name](**kwargs)


def _load_files(paths, task):
    images, labels, prompts = [], [], []
    class_names = None
    for path in paths:
        with np.load(path, allow_pickle=False) as z:
            images.append(np.asarray(z["image"], dtype=np.float32))
            labels.append(np.asarray(z["label"]))
            if "prompt" in z:
                prompts.append(str(z["prompt"]))
            if class_names is None and "class_names" in z:
                class_names = [str(s) for s in z["class_names"]]
    return Dataset(
        task,
        np.stack(images),
        np.stack(labels),
        class_names or SEMSEG_CLASS_NAMES,
        prompts=prompts or None,
    )


def prompt_words() -> list:
    """Every word any generator can emit, for vocabulary construction."""
    words = set()
    for name in SEMSEG_CLASS_NAMES + SCENE_NAMES + POSITIONS:
        words.update(name.split())
    words.update("a photo of the".split())
    return sorted(words)
