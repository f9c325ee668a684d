"""Scene-graph containers, prompt-centric subgraph extraction, and targets."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import COLOR_NAMES, PREDICATES, SHAPE_NAMES, CaptionSample, ShapeWorldScene
from .errors import InputError

log = logging.getLogger(__name__)

MAX_NODES = 36
MAX_EDGES = 64
MAX_ENTITIES = 6  # permutation target column count

N_NODE_LABELS = len(SHAPE_NAMES) * len(COLOR_NAMES)
_PRED_TO_ID = {p: i for i, p in enumerate(PREDICATES)}


def node_label(shape: str, color: str) -> int:
    return SHAPE_NAMES.index(shape) * len(COLOR_NAMES) + COLOR_NAMES.index(color)


def box_iou(a, b) -> float:
    """Rectangle IoU; boxes are (x0, y0, x1, y1) in any common unit."""
    ax0, ay0, ax1, ay1 = (float(v) for v in a)
    bx0, by0, bx1, by1 = (float(v) for v in b)
    if ax1 <= ax0 or ay1 <= ay0 or bx1 <= bx0 or by1 <= by0:
        raise InputError("degenerate box")
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


@dataclass(eq=False)
class SceneGraph:
    """Fixed-capacity graph; padding rows carry an explicit validity flag.

    `node_ids` maps rows back to the originating node indices, so subgraphs
    keep their identity relative to the parent graph.
    """

    labels: np.ndarray  # (MAX_NODES,) int64
    boxes: np.ndarray  # (MAX_NODES, 4) float64, normalized
    node_valid: np.ndarray  # (MAX_NODES,) bool
    node_ids: np.ndarray  # (MAX_NODES,) int64
    edges: np.ndarray  # (MAX_EDGES, 3) int64 rows (subject_row, predicate, object_row)
    edge_valid: np.ndarray  # (MAX_EDGES,) bool
    masks: np.ndarray | None = None  # (MAX_NODES, H, W) bool

    @property
    def n_nodes(self) -> int:
        return int(self.node_valid.sum())

    @property
    def n_edges(self) -> int:
        return int(self.edge_valid.sum())

    def row_of(self, node_id: int) -> int:
        rows = np.nonzero(self.node_valid & (self.node_ids == node_id))[0]
        if rows.size != 1:
            raise InputError(f"node id {node_id} not present exactly once")
        return int(rows[0])


def _empty_graph(with_masks: tuple[int, int] | None) -> SceneGraph:
    return SceneGraph(
        labels=np.zeros(MAX_NODES, dtype=np.int64),
        boxes=np.zeros((MAX_NODES, 4), dtype=np.float64),
        node_valid=np.zeros(MAX_NODES, dtype=bool),
        node_ids=np.full(MAX_NODES, -1, dtype=np.int64),
        edges=np.zeros((MAX_EDGES, 3), dtype=np.int64),
        edge_valid=np.zeros(MAX_EDGES, dtype=bool),
        masks=None if with_masks is None else np.zeros((MAX_NODES,) + with_masks, dtype=bool),
    )


def graph_from_scene(scene: ShapeWorldScene, include_masks: bool = True) -> SceneGraph:
    n = len(scene.objects)
    if n > MAX_NODES:
        raise InputError(f"{n} nodes exceed capacity {MAX_NODES}")
    if len(scene.relations) > MAX_EDGES:
        raise InputError(f"{len(scene.relations)} edges exceed capacity {MAX_EDGES}")
    g = _empty_graph(scene.canvas if include_masks else None)
    for i, obj in enumerate(scene.objects):
        g.labels[i] = node_label(obj.shape, obj.color)
        g.boxes[i] = obj.box
        g.node_valid[i] = True
        g.node_ids[i] = i
        if include_masks:
            g.masks[i] = obj.mask
    for j, (s, pred, o) in enumerate(scene.relations):
        if not (g.node_valid[s] and g.node_valid[o]):
            raise InputError(f"relation {j} references an invalid node")
        g.edges[j] = (s, pred if isinstance(pred, int) else _PRED_TO_ID[pred], o)
        g.edge_valid[j] = True
    return g


def coarse_subgraph(graph: SceneGraph, o: int) -> SceneGraph:
    """1-hop closed neighborhood of node row `o`, with all edges among it.

    Rows are re-packed in ascending original-row order; `node_ids` carries the
    parent graph's node ids through.
    """
    if not (0 <= o < MAX_NODES and graph.node_valid[o]):
        raise InputError(f"prompt node {o} is not a valid node")
    keep = {o}
    for j in range(MAX_EDGES):
        if not graph.edge_valid[j]:
            continue
        s, _, t = graph.edges[j]
        if s == o:
            keep.add(int(t))
        elif t == o:
            keep.add(int(s))
    rows = sorted(keep)
    remap = {r: i for i, r in enumerate(rows)}

    sub = _empty_graph(None if graph.masks is None else graph.masks.shape[1:])
    for i, r in enumerate(rows):
        sub.labels[i] = graph.labels[r]
        sub.boxes[i] = graph.boxes[r]
        sub.node_valid[i] = True
        sub.node_ids[i] = graph.node_ids[r]
        if graph.masks is not None:
            sub.masks[i] = graph.masks[r]
    k = 0
    for j in range(MAX_EDGES):
        if not graph.edge_valid[j]:
            continue
        s, p, t = (int(v) for v in graph.edges[j])
        if s in remap and t in remap:
            sub.edges[k] = (remap[s], p, remap[t])
            sub.edge_valid[k] = True
            k += 1
    return sub


@dataclass(eq=False)
class RelevanceTarget:
    scores: np.ndarray  # (MAX_NODES,) float64 in {0, 1}
    permutation: np.ndarray  # (MAX_NODES, MAX_ENTITIES) float64, row one-hot for score-1 rows
    n_entities: int


def relevance_target(subgraph: SceneGraph, sample: CaptionSample, iou_threshold: float) -> RelevanceTarget:
    """Binary relevance plus caption-order permutation target.

    A node scores 1 when its box IoU with some caption entity strictly exceeds
    the threshold (a tie at the threshold scores 0).  Two nodes claiming the
    same entity keep the higher IoU; the loser is demoted to 0 and logged.
    """
    order = sorted(sample.entity_links)
    entity_objs = [sample.entity_links[p] for p in order]
    if len(entity_objs) > MAX_ENTITIES:
        raise InputError(f"{len(entity_objs)} entities exceed {MAX_ENTITIES}")
    entity_boxes = [subgraph.boxes[subgraph.row_of(obj)] for obj in entity_objs]

    scores = np.zeros(MAX_NODES, dtype=np.float64)
    perm = np.zeros((MAX_NODES, MAX_ENTITIES), dtype=np.float64)
    best: dict[int, tuple[float, int]] = {}  # entity -> (iou, node row)
    for row in range(MAX_NODES):
        if not subgraph.node_valid[row]:
            continue
        ious = [box_iou(subgraph.boxes[row], eb) for eb in entity_boxes]
        k = int(np.argmax(ious))
        if ious[k] > iou_threshold:
            if k in best and best[k][0] >= ious[k]:
                log.info("node %d demoted: entity %d already matched at IoU %.3f", row, k, best[k][0])
                continue
            if k in best:
                log.info("node %d displaces node %d on entity %d", row, best[k][1], k)
                prev = best[k][1]
                scores[prev] = 0.0
                perm[prev, k] = 0.0
            best[k] = (ious[k], row)
            scores[row] = 1.0
            perm[row, k] = 1.0

    for k in range(len(entity_objs)):
        if k not in best:
            raise InputError(f"caption entity {k} matched no subgraph node at IoU > {iou_threshold}")
    return RelevanceTarget(scores=scores, permutation=perm, n_entities=len(entity_objs))
