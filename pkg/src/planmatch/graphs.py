"""Two-level scene graphs of rooms and wall surfaces.

A graph holds room nodes and wall-surface (WS) nodes with dense integer ids,
directed typed edges, and optionally a standardized feature matrix. This module
owns the node feature encoding, feature standardization statistics, structural
edge augmentation (room adjacency and per-room angular wall rings), and the
JSON interchange format.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

FEATURE_DIM = 7
GRAPH_FORMAT_VERSION = 1

# Facing wall surfaces of different rooms imply a room adjacency when their
# centroids are within this distance and their normals are anti-parallel
# within this angle.
DEFAULT_ADJACENCY_DIST_TOL = 0.5
DEFAULT_ADJACENCY_ANGLE_TOL = math.radians(10.0)

_UNIT_NORM_TOL = 1e-6
_STD_FLOOR = 1e-8


class GraphError(ValueError):
    """A graph, node, or serialized payload violates the schema."""


class NodeType(enum.Enum):
    ROOM = "room"
    WALL_SURFACE = "ws"


class EdgeType(enum.Enum):
    ROOM_WS = "room_ws"
    ROOM_ROOM = "room_room"
    WS_WS = "ws_ws"


@dataclass(frozen=True)
class NodeRecord:
    """One node. Geometry fields beyond the centroid apply to WS nodes only;
    room nodes carry the sentinel values ``normal=(0,0)``, ``length=-1``."""

    id: int
    node_type: NodeType
    centroid: tuple[float, float]
    normal: tuple[float, float] = (0.0, 0.0)
    length: float = -1.0
    parent_room: int | None = None

    def validate(self) -> None:
        if self.id < 0:
            raise GraphError(f"node id must be non-negative, got {self.id}")
        if not all(math.isfinite(c) for c in self.centroid):
            raise GraphError(f"node {self.id} has a non-finite centroid")
        if self.node_type is NodeType.ROOM:
            if self.normal != (0.0, 0.0):
                raise GraphError(f"room node {self.id} must have a zero normal")
            if self.length != -1.0:
                raise GraphError(f"room node {self.id} must have length -1")
            if self.parent_room is not None:
                raise GraphError(f"room node {self.id} must not have a parent room")
        else:
            norm = math.hypot(self.normal[0], self.normal[1])
            if abs(norm - 1.0) > _UNIT_NORM_TOL:
                raise GraphError(
                    f"ws node {self.id} normal must be unit length, got norm {norm!r}"
                )
            if not (math.isfinite(self.length) and self.length > 0.0):
                raise GraphError(f"ws node {self.id} needs a positive length")
            if self.parent_room is None:
                raise GraphError(f"ws node {self.id} is missing its parent room")


Edge = tuple[int, int, EdgeType]


@dataclass(frozen=True)
class SceneGraph:
    """Immutable graph. ``nodes[i].id == i`` always holds (dense ids).

    ``features`` is either None or an (N, 7) float64 matrix of standardized
    node features aligned with node ids.
    """

    nodes: tuple[NodeRecord, ...]
    edges: tuple[Edge, ...]
    features: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def node(self, node_id: int) -> NodeRecord:
        return self.nodes[node_id]

    def rooms(self) -> list[NodeRecord]:
        return [n for n in self.nodes if n.node_type is NodeType.ROOM]

    def wall_surfaces(self) -> list[NodeRecord]:
        return [n for n in self.nodes if n.node_type is NodeType.WALL_SURFACE]

    def edges_of_type(self, edge_type: EdgeType) -> list[Edge]:
        return [e for e in self.edges if e[2] is edge_type]

    def validate(self) -> None:
        n = self.n_nodes
        if n == 0:
            raise GraphError("graph has no nodes")
        for i, node in enumerate(self.nodes):
            if node.id != i:
                raise GraphError(f"node ids must be dense 0..N-1; index {i} holds id {node.id}")
            node.validate()
            if node.node_type is NodeType.WALL_SURFACE:
                parent = node.parent_room
                if not (0 <= parent < n) or self.nodes[parent].node_type is not NodeType.ROOM:
                    raise GraphError(f"ws node {i} references invalid parent room {parent}")

        seen: set[Edge] = set()
        ws_parent_edges: dict[int, int] = {}
        for src, dst, etype in self.edges:
            if not (0 <= src < n and 0 <= dst < n):
                raise GraphError(f"edge ({src}, {dst}) references a missing node")
            if src == dst:
                raise GraphError(f"self edge on node {src}")
            key = (src, dst, etype)
            if key in seen:
                raise GraphError(f"duplicate edge {key}")
            seen.add(key)
            st = self.nodes[src].node_type
            dt = self.nodes[dst].node_type
            if etype is EdgeType.ROOM_WS:
                if st is not NodeType.ROOM or dt is not NodeType.WALL_SURFACE:
                    raise GraphError(f"room_ws edge ({src}, {dst}) has wrong endpoint types")
                if self.nodes[dst].parent_room != src:
                    raise GraphError(f"room_ws edge ({src}, {dst}) does not match ws parent")
                ws_parent_edges[dst] = ws_parent_edges.get(dst, 0) + 1
            elif etype is EdgeType.ROOM_ROOM:
                if st is not NodeType.ROOM or dt is not NodeType.ROOM:
                    raise GraphError(f"room_room edge ({src}, {dst}) has wrong endpoint types")
            else:
                if st is not NodeType.WALL_SURFACE or dt is not NodeType.WALL_SURFACE:
                    raise GraphError(f"ws_ws edge ({src}, {dst}) has wrong endpoint types")

        for node in self.nodes:
            if node.node_type is NodeType.WALL_SURFACE:
                if ws_parent_edges.get(node.id, 0) != 1:
                    raise GraphError(
                        f"ws node {node.id} needs exactly one incoming room_ws edge "
                        f"from its parent, found {ws_parent_edges.get(node.id, 0)}"
                    )

        if self.features is not None:
            f = self.features
            if f.shape != (n, FEATURE_DIM):
                raise GraphError(f"features must have shape ({n}, {FEATURE_DIM}), got {f.shape}")
            if not np.all(np.isfinite(f)):
                raise GraphError("features contain non-finite values")


def build_feature_vector(node: NodeRecord) -> np.ndarray:
    """Raw 7-dim feature: [room-flag, ws-flag, cx, cy, nx, ny, length]."""
    node.validate()
    is_room = node.node_type is NodeType.ROOM
    return np.array(
        [
            1.0 if is_room else 0.0,
            0.0 if is_room else 1.0,
            node.centroid[0],
            node.centroid[1],
            node.normal[0],
            node.normal[1],
            node.length,
        ],
        dtype=np.float64,
    )


def raw_feature_matrix(graph: SceneGraph) -> np.ndarray:
    return np.stack([build_feature_vector(n) for n in graph.nodes], axis=0)


@dataclass(frozen=True, eq=False)
class FeatureStats:
    """Per-dimension mean/std for feature standardization.

    The two type one-hot dimensions are pinned to mean 0, std 1 so they pass
    through standardization untouched.
    """

    mean: np.ndarray
    std: np.ndarray

    def validate(self) -> None:
        if self.mean.shape != (FEATURE_DIM,) or self.std.shape != (FEATURE_DIM,):
            raise GraphError("feature stats must be 7-dim vectors")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.std))):
            raise GraphError("feature stats contain non-finite values")
        if np.any(self.std <= 0.0):
            raise GraphError("feature stds must be positive")


def compute_feature_stats(graphs: list[SceneGraph]) -> FeatureStats:
    """Population mean/std over every node of every graph in the list."""
    if not graphs:
        raise GraphError("need at least one graph to compute feature stats")
    feats = np.concatenate([raw_feature_matrix(g) for g in graphs], axis=0)
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)  # population std (ddof=0)
    mean[:2] = 0.0
    std[:2] = 1.0
    std = np.where(std < _STD_FLOOR, 1.0, std)
    stats = FeatureStats(mean=mean, std=std)
    stats.validate()
    return stats


def standardize_features(graph: SceneGraph, stats: FeatureStats) -> SceneGraph:
    """Return a copy of the graph with features = (raw - mean) / std."""
    stats.validate()
    feats = (raw_feature_matrix(graph) - stats.mean) / stats.std
    out = replace(graph, features=feats)
    out.validate()
    return out


def _ring_edges(room: NodeRecord, walls: list[NodeRecord]) -> set[tuple[int, int]]:
    """Directed cycle edges over a room's walls ordered by angle around the room."""
    if len(walls) < 2:
        return set()
    rx, ry = room.centroid

    def key(w: NodeRecord) -> tuple[float, int]:
        return (math.atan2(w.centroid[1] - ry, w.centroid[0] - rx), w.id)

    ordered = sorted(walls, key=key)
    out: set[tuple[int, int]] = set()
    k = len(ordered)
    for i in range(k):
        a = ordered[i].id
        b = ordered[(i + 1) % k].id
        if a == b:
            continue
        # Consecutive plus wrap-around, both directions; a k=2 ring collapses
        # to the single pair emitted once per direction.
        out.add((a, b))
        out.add((b, a))
    return out


def augment_edges(
    graph: SceneGraph,
    adjacency_dist_tol: float = DEFAULT_ADJACENCY_DIST_TOL,
    adjacency_angle_tol: float = DEFAULT_ADJACENCY_ANGLE_TOL,
) -> SceneGraph:
    """Add room-room adjacency and per-room angular wall-ring edges.

    Expects a graph holding only room_ws edges. Two rooms become adjacent when
    some wall pair, one wall from each room, has centroid distance at most
    ``adjacency_dist_tol`` and anti-parallel normals within
    ``adjacency_angle_tol``. Each room's walls (when it has at least two) are
    linked in a directed ring sorted by angle around the room centroid, ties
    broken by node id.
    """
    graph.validate()
    if any(e[2] is not EdgeType.ROOM_WS for e in graph.edges):
        raise GraphError("augment_edges expects a graph with only room_ws edges")
    if adjacency_dist_tol < 0 or not (0 <= adjacency_angle_tol < math.pi / 2):
        raise GraphError("invalid adjacency tolerances")

    walls_by_room: dict[int, list[NodeRecord]] = {}
    for node in graph.nodes:
        if node.node_type is NodeType.WALL_SURFACE:
            walls_by_room.setdefault(node.parent_room, []).append(node)

    ws = graph.wall_surfaces()
    cos_thresh = -math.cos(adjacency_angle_tol)
    adjacent: set[tuple[int, int]] = set()
    for i, wa in enumerate(ws):
        for wb in ws[i + 1 :]:
            if wa.parent_room == wb.parent_room:
                continue
            pair = (min(wa.parent_room, wb.parent_room), max(wa.parent_room, wb.parent_room))
            if pair in adjacent:
                continue
            dx = wa.centroid[0] - wb.centroid[0]
            dy = wa.centroid[1] - wb.centroid[1]
            if math.hypot(dx, dy) > adjacency_dist_tol:
                continue
            dot = wa.normal[0] * wb.normal[0] + wa.normal[1] * wb.normal[1]
            if dot <= cos_thresh:
                adjacent.add(pair)

    room_room = []
    for a, b in sorted(adjacent):
        room_room.append((a, b, EdgeType.ROOM_ROOM))
        room_room.append((b, a, EdgeType.ROOM_ROOM))
    room_room.sort(key=lambda e: (e[0], e[1]))

    ring: set[tuple[int, int]] = set()
    for room in graph.rooms():
        ring |= _ring_edges(room, walls_by_room.get(room.id, []))
    ws_ws = [(a, b, EdgeType.WS_WS) for a, b in sorted(ring)]

    out = replace(graph, edges=graph.edges + tuple(room_room) + tuple(ws_ws))
    out.validate()
    return out


def relabel_nodes(graph: SceneGraph, new_ids: list[int]) -> SceneGraph:
    """Relabel node i to new_ids[i]; new_ids must be a permutation of 0..N-1."""
    n = graph.n_nodes
    if sorted(new_ids) != list(range(n)):
        raise GraphError("new_ids must be a permutation of 0..N-1")
    nodes: list[NodeRecord | None] = [None] * n
    for node in graph.nodes:
        nid = new_ids[node.id]
        parent = None if node.parent_room is None else new_ids[node.parent_room]
        nodes[nid] = replace(node, id=nid, parent_room=parent)
    edges = tuple(
        sorted(
            ((new_ids[s], new_ids[d], t) for s, d, t in graph.edges),
            key=lambda e: (e[2].value, e[0], e[1]),
        )
    )
    features = None
    if graph.features is not None:
        features = np.empty_like(graph.features)
        features[np.asarray(new_ids)] = graph.features
    out = SceneGraph(nodes=tuple(nodes), edges=edges, features=features)
    out.validate()
    return out


def graph_to_json_dict(graph: SceneGraph) -> dict:
    nodes = []
    for node in graph.nodes:
        entry: dict = {
            "id": node.id,
            "type": node.node_type.value,
            "centroid": [node.centroid[0], node.centroid[1]],
        }
        if node.node_type is NodeType.WALL_SURFACE:
            entry["normal"] = [node.normal[0], node.normal[1]]
            entry["length"] = node.length
            entry["parent_room"] = node.parent_room
        nodes.append(entry)
    edges = [{"src": s, "dst": d, "type": t.value} for s, d, t in graph.edges]
    return {"version": GRAPH_FORMAT_VERSION, "nodes": nodes, "edges": edges}


def graph_from_json_dict(data: dict) -> SceneGraph:
    if not isinstance(data, dict):
        raise GraphError("graph payload must be a JSON object")
    version = data.get("version")
    if version != GRAPH_FORMAT_VERSION:
        raise GraphError(f"unsupported graph format version {version!r}")
    try:
        nodes = []
        for entry in data["nodes"]:
            type_str = entry["type"]
            try:
                node_type = NodeType(type_str)
            except ValueError:
                raise GraphError(f"unknown node type {type_str!r}") from None
            cx, cy = entry["centroid"]
            if node_type is NodeType.ROOM:
                nodes.append(NodeRecord(id=int(entry["id"]), node_type=node_type,
                                        centroid=(float(cx), float(cy))))
            else:
                nx_, ny_ = entry["normal"]
                nodes.append(
                    NodeRecord(
                        id=int(entry["id"]),
                        node_type=node_type,
                        centroid=(float(cx), float(cy)),
                        normal=(float(nx_), float(ny_)),
                        length=float(entry["length"]),
                        parent_room=int(entry["parent_room"]),
                    )
                )
        edges = []
        for entry in data["edges"]:
            try:
                etype = EdgeType(entry["type"])
            except ValueError:
                raise GraphError(f"unknown edge type {entry['type']!r}") from None
            edges.append((int(entry["src"]), int(entry["dst"]), etype))
    except (KeyError, TypeError) as exc:
        raise GraphError(f"malformed graph payload: {exc}") from exc
    graph = SceneGraph(nodes=tuple(nodes), edges=tuple(edges))
    graph.validate()
    return graph


def save_graph(graph: SceneGraph, path: str | Path) -> None:
    Path(path).write_text(json.dumps(graph_to_json_dict(graph), indent=2) + "\n")


def load_graph(path: str | Path) -> SceneGraph:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise GraphError(f"invalid JSON in {path}: {exc}") from exc
    return graph_from_json_dict(data)
