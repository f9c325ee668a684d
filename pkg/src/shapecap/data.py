"""Synthetic shape-world scenes, templated captions, and the dataset file format.

A scene is a 64x64 canvas holding 2..6 non-overlapping colored shapes.  One
object is the *center*: the scene graph stores one relation from the center to
every other object, with the predicate picked by a deterministic geometry rule,
and the caption mentions the center plus its m nearest neighbours in distance
order.  Everything here is plain numpy so that the same code doubles as the
oracle-side ground truth generator and as the analytic annotation recovery used
by the HTTP service (scenes can be reconstructed exactly from rendered pixels).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import DatasetParseError, GenerationError, InputError

CANVAS_SIZE = 64

COLOR_RGB = {
    "red": (230, 25, 75),
    "green": (60, 180, 75),
    "blue": (0, 130, 200),
    "yellow": (255, 225, 25),
    "purple": (145, 30, 180),
    "orange": (245, 130, 48),
    "cyan": (70, 240, 240),
    "pink": (250, 190, 212),
}
COLOR_NAMES = tuple(COLOR_RGB)
SHAPE_NAMES = ("circle", "square", "triangle")
BACKGROUND_RGB = (255, 255, 255)

PREDICATES = ("left_of", "right_of", "above", "below", "near")
# Every surface form spans exactly two tokens, which keeps caption length a
# pure function of the relation count: 3 + 6m - 1 tokens for m relations.
PREDICATE_SURFACE = {
    "left_of": ("left", "of"),
    "right_of": ("right", "of"),
    "above": ("high", "above"),
    "below": ("down", "below"),
    "near": ("close", "to"),
}
INVERSE_PREDICATE = {
    "left_of": "right_of",
    "right_of": "left_of",
    "above": "below",
    "below": "above",
    "near": "near",
}
NEAR_RADIUS = 18.0

MIN_BOX_SIDE = 10
MAX_BOX_SIDE = 22
MIN_BOX_AREA_PX = 16
MAX_OBJECTS = 6
MAX_CAPTION_LEN = 20
MAX_RELATIONS_MENTIONED = 3
PLACEMENT_ATTEMPTS = 1000

PAD_TOKEN = "<pad>"
VOCAB: tuple[str, ...] = (
    (PAD_TOKEN, "a", "and")
    + COLOR_NAMES
    + SHAPE_NAMES
    + ("left", "of", "right", "high", "above", "down", "below", "close", "to")
)
VOCAB_SIZE = 64  # fixed codebook size; ids beyond len(VOCAB) are unused slots
PAD_ID = 0
_WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}

assert len(VOCAB) <= VOCAB_SIZE

_N_OBJECT_CHOICES = (2, 3, 4, 5, 6)
_N_OBJECT_WEIGHTS = (0.25, 0.30, 0.20, 0.15, 0.10)


def word_id(word: str) -> int:
    return _WORD_TO_ID[word]


def detokenize(tokens: Sequence[int]) -> str:
    words = []
    for t in tokens:
        words.append(VOCAB[t] if 0 <= t < len(VOCAB) else f"<unk{t}>")
    return " ".join(words)


@dataclass(eq=False)
class SceneObject:
    shape: str
    color: str
    box: tuple[float, float, float, float]  # normalized (x0, y0, x1, y1)
    mask: np.ndarray  # bool (H, W), subset of the box pixel footprint

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SceneObject):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.color == other.color
            and self.box == other.box
            and np.array_equal(self.mask, other.mask)
        )


@dataclass(eq=False)
class ShapeWorldScene:
    canvas: tuple[int, int]  # (H, W)
    objects: list[SceneObject]
    relations: list[tuple[int, str, int]]  # (subject, predicate, object)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ShapeWorldScene):
            return NotImplemented
        return (
            self.canvas == other.canvas
            and self.objects == other.objects
            and self.relations == other.relations
        )


@dataclass(eq=True)
class CaptionSample:
    tokens: list[int]
    entity_links: dict[int, int]  # noun token position -> object index
    center_object: int


@dataclass(eq=True)
class Sample:
    scene: ShapeWorldScene
    caption: CaptionSample


def box_to_px(box: tuple[float, float, float, float], canvas: tuple[int, int]) -> tuple[int, int, int, int]:
    h, w = canvas
    return (
        int(round(box[0] * w)),
        int(round(box[1] * h)),
        int(round(box[2] * w)),
        int(round(box[3] * h)),
    )


def px_to_box(px: tuple[int, int, int, int], canvas: tuple[int, int]) -> tuple[float, float, float, float]:
    h, w = canvas
    return (px[0] / w, px[1] / h, px[2] / w, px[3] / h)


def _box_center_px(px: tuple[int, int, int, int]) -> tuple[float, float]:
    return ((px[0] + px[2]) / 2.0, (px[1] + px[3]) / 2.0)


def rasterize_shape(shape: str, box_px: tuple[int, int, int, int], canvas: tuple[int, int]) -> np.ndarray:
    """Boolean (H, W) mask; always touches all four sides of its box."""
    x0, y0, x1, y1 = box_px
    h, w = canvas
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise InputError(f"box {box_px} outside canvas {canvas}")
    mask = np.zeros((h, w), dtype=bool)
    bw, bh = x1 - x0, y1 - y0
    ys, xs = np.mgrid[y0:y1, x0:x1]
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    if shape == "square":
        patch = np.ones((bh, bw), dtype=bool)
    elif shape == "circle":
        nx = (xs + 0.5 - cx) / (bw / 2.0)
        ny = (ys + 0.5 - cy) / (bh / 2.0)
        patch = nx * nx + ny * ny <= 1.0
    elif shape == "triangle":
        # scanline half-width grows linearly to the base; a pixel is set when
        # its [x, x+1) footprint overlaps the scanline interval, which keeps
        # the apex row non-empty for every aspect ratio
        hw = (bw / 2.0) * ((ys + 1 - y0) / bh)
        patch = (xs + 1 > cx - hw) & (xs < cx + hw)
    else:
        raise InputError(f"unknown shape {shape!r}")
    mask[y0:y1, x0:x1] = patch
    return mask


def predicate_holds(pred: str, sbox_px: tuple[int, int, int, int], obox_px: tuple[int, int, int, int]) -> bool:
    scx, scy = _box_center_px(sbox_px)
    ocx, ocy = _box_center_px(obox_px)
    if pred == "left_of":
        return scx < ocx
    if pred == "right_of":
        return scx > ocx
    if pred == "above":
        return scy < ocy
    if pred == "below":
        return scy > ocy
    if pred == "near":
        return float(np.hypot(ocx - scx, ocy - scy)) < NEAR_RADIUS
    raise InputError(f"unknown predicate {pred!r}")


def pick_predicate(sbox_px: tuple[int, int, int, int], obox_px: tuple[int, int, int, int]) -> str:
    """Deterministic predicate for a subject/object box pair."""
    scx, scy = _box_center_px(sbox_px)
    ocx, ocy = _box_center_px(obox_px)
    dx, dy = ocx - scx, ocy - scy
    if float(np.hypot(dx, dy)) < NEAR_RADIUS:
        return "near"
    if abs(dx) >= abs(dy):
        return "left_of" if dx > 0 else "right_of"
    return "above" if dy > 0 else "below"


def star_relations(boxes_px: Sequence[tuple[int, int, int, int]], center: int) -> list[tuple[int, str, int]]:
    """One relation from the center to every other box, nearest first."""
    order = []
    ccx, ccy = _box_center_px(boxes_px[center])
    for i, b in enumerate(boxes_px):
        if i == center:
            continue
        cx, cy = _box_center_px(b)
        order.append((float(np.hypot(cx - ccx, cy - ccy)), i))
    order.sort()
    return [(center, pick_predicate(boxes_px[center], boxes_px[i]), i) for _, i in order]


def _boxes_disjoint(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> bool:
    # require a 1px gap so rendered component labelling can never merge objects
    return a[2] + 1 <= b[0] or b[2] + 1 <= a[0] or a[3] + 1 <= b[1] or b[3] + 1 <= a[1]


def generate_scene(rng_seed: int, n_objects: int) -> ShapeWorldScene:
    """Scene with n distinct (shape, color) objects and a star of relations."""
    if not 2 <= n_objects <= MAX_OBJECTS:
        raise InputError(f"n_objects must be in [2, {MAX_OBJECTS}], got {n_objects}")
    rng = np.random.default_rng(rng_seed)
    canvas = (CANVAS_SIZE, CANVAS_SIZE)
    combos = rng.choice(len(SHAPE_NAMES) * len(COLOR_NAMES), size=n_objects, replace=False)

    boxes_px: list[tuple[int, int, int, int]] = []
    for _ in range(n_objects):
        for attempt in range(PLACEMENT_ATTEMPTS + 1):
            if attempt == PLACEMENT_ATTEMPTS:
                raise GenerationError(
                    f"could not place object after {PLACEMENT_ATTEMPTS} attempts (seed {rng_seed})"
                )
            bw = int(rng.integers(MIN_BOX_SIDE, MAX_BOX_SIDE + 1))
            bh = int(rng.integers(MIN_BOX_SIDE, MAX_BOX_SIDE + 1))
            x0 = int(rng.integers(0, CANVAS_SIZE - bw + 1))
            y0 = int(rng.integers(0, CANVAS_SIZE - bh + 1))
            cand = (x0, y0, x0 + bw, y0 + bh)
            if all(_boxes_disjoint(cand, b) for b in boxes_px):
                boxes_px.append(cand)
                break

    objects = []
    for combo, bpx in zip(combos, boxes_px):
        shape = SHAPE_NAMES[int(combo) // len(COLOR_NAMES)]
        color = COLOR_NAMES[int(combo) % len(COLOR_NAMES)]
        objects.append(
            SceneObject(
                shape=shape,
                color=color,
                box=px_to_box(bpx, canvas),
                mask=rasterize_shape(shape, bpx, canvas),
            )
        )
    center = int(rng.integers(n_objects))
    return ShapeWorldScene(canvas=canvas, objects=objects, relations=star_relations(boxes_px, center))


def render_scene(scene: ShapeWorldScene) -> np.ndarray:
    """uint8 (H, W, 3) image on a white background."""
    h, w = scene.canvas
    img = np.full((h, w, 3), BACKGROUND_RGB, dtype=np.uint8)
    for obj in scene.objects:
        img[obj.mask] = COLOR_RGB[obj.color]
    return img


def recover_objects(image: np.ndarray) -> list[SceneObject]:
    """Reconstruct objects from a rendered scene by palette components.

    Returns objects sorted by (x0, y0, x1, y1, shape, color).  On a clean
    render this reproduces the generating objects exactly; shapes are matched
    by exact template equality first and by IoU as a fallback for images that
    went through resampling.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError(f"expected (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    canvas = (h, w)
    objects = []
    for color, rgb in COLOR_RGB.items():
        binary = np.all(image == np.asarray(rgb, dtype=np.uint8), axis=2)
        if not binary.any():
            continue
        labels, count = ndimage.label(binary, structure=np.ones((3, 3), dtype=int))
        for k in range(1, count + 1):
            comp = labels == k
            if int(comp.sum()) < MIN_BOX_AREA_PX:
                continue
            ys, xs = np.nonzero(comp)
            bpx = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
            shape = None
            for cand in SHAPE_NAMES:
                if np.array_equal(rasterize_shape(cand, bpx, canvas), comp):
                    shape = cand
                    break
            if shape is None:
                best = -1.0
                for cand in SHAPE_NAMES:
                    tmpl = rasterize_shape(cand, bpx, canvas)
                    iou = float((tmpl & comp).sum()) / float((tmpl | comp).sum())
                    if iou > best:
                        best, shape = iou, cand
            objects.append(SceneObject(shape=shape, color=color, box=px_to_box(bpx, canvas), mask=comp))
    objects.sort(key=lambda o: (o.box, o.shape, o.color))
    return objects


def scene_from_image(image: np.ndarray, center: int) -> ShapeWorldScene:
    """Recovered scene with the deterministic relation star around `center`."""
    objects = recover_objects(image)
    if not objects:
        raise InputError("no recognizable objects in image")
    if not 0 <= center < len(objects):
        raise InputError(f"center {center} out of range for {len(objects)} objects")
    canvas = (image.shape[0], image.shape[1])
    boxes_px = [box_to_px(o.box, canvas) for o in objects]
    relations = star_relations(boxes_px, center) if len(objects) > 1 else []
    return ShapeWorldScene(canvas=canvas, objects=objects, relations=relations)


def caption_length(n_relations: int) -> int:
    return 3 if n_relations == 0 else 6 * n_relations + 2


def noun_positions(n_relations: int) -> list[int]:
    return [2] + [6 * k + 1 for k in range(1, n_relations + 1)]


def caption_from_graph(scene: ShapeWorldScene, center: int, relation_indices: Sequence[int]) -> CaptionSample:
    """Templated caption for a star of relations around the center.

    Relations must be incident to the center (the subject is normalized to the
    center by predicate inversion when needed) and must each introduce a new
    object.  The first noun is always the center.
    """
    if len(relation_indices) == 0:
        raise InputError("relation subset must be non-empty")
    if not 0 <= center < len(scene.objects):
        raise InputError(f"center {center} out of range")
    if len(relation_indices) > MAX_RELATIONS_MENTIONED:
        raise InputError(f"at most {MAX_RELATIONS_MENTIONED} relations fit in a caption")

    mentioned = [center]
    normalized: list[tuple[str, int]] = []
    for ri in relation_indices:
        if not 0 <= ri < len(scene.relations):
            raise InputError(f"relation index {ri} out of range")
        s, pred, o = scene.relations[ri]
        if s != center and o != center:
            raise InputError(f"relation {ri} is not incident to center {center}")
        if o == center:
            s, pred, o = o, INVERSE_PREDICATE[pred], s
        if o in mentioned:
            raise InputError(f"object {o} mentioned twice")
        mentioned.append(o)
        normalized.append((pred, o))

    tokens = [word_id("a"), word_id(scene.objects[center].color), word_id(scene.objects[center].shape)]
    for k, (pred, o) in enumerate(normalized):
        if k > 0:
            tokens.append(word_id("and"))
        tokens.extend(word_id(wd) for wd in PREDICATE_SURFACE[pred])
        obj = scene.objects[o]
        tokens.extend((word_id("a"), word_id(obj.color), word_id(obj.shape)))
    assert len(tokens) == caption_length(len(normalized)) <= MAX_CAPTION_LEN

    links = dict(zip(noun_positions(len(normalized)), mentioned))
    return CaptionSample(tokens=tokens, entity_links=links, center_object=center)


@dataclass(eq=True)
class ParsedCaption:
    groups: list[tuple[str, str]]  # (color, shape) in mention order
    predicates: list[str]  # predicates[k] relates group 0 to group k+1


def parse_caption(tokens: Sequence[int]) -> ParsedCaption:
    """Inverse of the caption template; raises InputError on malformed input."""
    surface_to_pred = {surf: p for p, surf in PREDICATE_SURFACE.items()}
    words = [VOCAB[t] if 0 <= t < len(VOCAB) else "?" for t in tokens]

    def group(at: int) -> tuple[str, str]:
        if at + 3 > len(words) or words[at] != "a":
            raise InputError(f"expected entity group at token {at}")
        color, shape = words[at + 1], words[at + 2]
        if color not in COLOR_RGB or shape not in SHAPE_NAMES:
            raise InputError(f"bad entity group at token {at}: {words[at:at + 3]}")
        return color, shape

    groups = [group(0)]
    predicates = []
    at = 3
    while at < len(words):
        if groups[1:]:
            if words[at] != "and":
                raise InputError(f"expected 'and' at token {at}")
            at += 1
        if at + 2 > len(words) or (words[at], words[at + 1]) not in surface_to_pred:
            raise InputError(f"expected predicate at token {at}")
        predicates.append(surface_to_pred[(words[at], words[at + 1])])
        groups.append(group(at + 2))
        at += 5
    if not predicates:
        raise InputError("caption mentions no relation")
    return ParsedCaption(groups=groups, predicates=predicates)


# ---------------------------------------------------------------------------
# run-length encoding and the line-delimited dataset file format
# ---------------------------------------------------------------------------

def encode_rle(mask: np.ndarray) -> dict:
    """Row-major RLE: {"size": [h, w], "first": bit of run 0, "runs": [...]}"""
    if mask.ndim != 2:
        raise InputError(f"mask must be 2-d, got shape {mask.shape}")
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        raise InputError("empty mask")
    boundaries = np.nonzero(np.diff(flat))[0] + 1
    edges = np.concatenate(([0], boundaries, [flat.size]))
    runs = np.diff(edges).tolist()
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "first": int(flat[0]), "runs": runs}


def decode_rle(rle: dict) -> np.ndarray:
    h, w = int(rle["size"][0]), int(rle["size"][1])
    runs = rle["runs"]
    if sum(runs) != h * w or any(r <= 0 for r in runs):
        raise InputError("run lengths do not tile the mask")
    values = (np.arange(len(runs)) + int(rle["first"])) % 2
    return np.repeat(values.astype(bool), runs).reshape(h, w)


def sample_to_record(sample: Sample) -> dict:
    scene, cap = sample.scene, sample.caption
    return {
        "canvas": [scene.canvas[0], scene.canvas[1]],
        "objects": [
            {"shape": o.shape, "color": o.color, "box": list(o.box), "rle": encode_rle(o.mask)}
            for o in scene.objects
        ],
        "relations": [[s, p, o] for s, p, o in scene.relations],
        "caption": {
            "tokens": list(cap.tokens),
            "links": sorted([pos, obj] for pos, obj in cap.entity_links.items()),
            "center": cap.center_object,
        },
    }


def sample_from_record(record: dict) -> Sample:
    canvas = (int(record["canvas"][0]), int(record["canvas"][1]))
    objects = [
        SceneObject(
            shape=o["shape"],
            color=o["color"],
            box=tuple(o["box"]),
            mask=decode_rle(o["rle"]),
        )
        for o in record["objects"]
    ]
    scene = ShapeWorldScene(
        canvas=canvas,
        objects=objects,
        relations=[(int(s), str(p), int(o)) for s, p, o in record["relations"]],
    )
    cap = record["caption"]
    caption = CaptionSample(
        tokens=[int(t) for t in cap["tokens"]],
        entity_links={int(pos): int(obj) for pos, obj in cap["links"]},
        center_object=int(cap["center"]),
    )
    return Sample(scene=scene, caption=caption)


def write_dataset(samples: Iterable[Sample], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(json.dumps(sample_to_record(sample), separators=(",", ":")) + "\n")


def read_dataset(path: str) -> list[Sample]:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                samples.append(sample_from_record(json.loads(line)))
            except DatasetParseError:
                raise
            except Exception as exc:
                raise DatasetParseError(lineno, str(exc)) from exc
    return samples


# ---------------------------------------------------------------------------
# full sample generation
# ---------------------------------------------------------------------------

def generate_sample(scene_seed: int, n_objects: int, n_mentioned: int) -> Sample:
    scene = generate_scene(scene_seed, n_objects)
    center = scene.relations[0][0]
    m = min(n_mentioned, len(scene.relations), MAX_RELATIONS_MENTIONED)
    caption = caption_from_graph(scene, center, list(range(m)))
    return Sample(scene=scene, caption=caption)


def generate_dataset(seed: int, count: int) -> list[Sample]:
    """Deterministic dataset; distractor objects appear in roughly half the scenes."""
    if count < 0:
        raise InputError("count must be non-negative")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(count):
        n = int(rng.choice(_N_OBJECT_CHOICES, p=_N_OBJECT_WEIGHTS))
        m = int(rng.integers(1, min(MAX_RELATIONS_MENTIONED, n - 1) + 1))
        scene_seed = int(rng.integers(0, 2**63 - 1))
        samples.append(generate_sample(scene_seed, n, m))
    return samples
