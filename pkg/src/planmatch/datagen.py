"""Procedural floor-plan corpus: generation, degradation, splits, disk layout.

Floor plans are grid tilings of axis-aligned rectangular rooms, so rooms that
share a grid boundary have exactly coincident facing wall surfaces. A noisy
partial copy of each plan stands in for what a robot has mapped so far; the
node correspondence between the two is recorded as ground truth.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .graphs import (
    EdgeType,
    GraphError,
    NodeRecord,
    NodeType,
    SceneGraph,
    graph_from_json_dict,
    graph_to_json_dict,
)

CORPUS_FORMAT_VERSION = 1
SPLIT_NAMES = ("train", "val", "test")
DEFAULT_SPLIT_FRACTIONS = (0.7, 0.15, 0.15)

_MAX_DROP_RESAMPLES = 16
_MIN_WS_LENGTH = 0.01


class DatagenError(ValueError):
    """Invalid generation/perturbation parameters or corpus payloads."""


@dataclass(frozen=True)
class GenParams:
    rooms_min: int = 5
    rooms_max: int = 10
    room_size_min: float = 3.0
    room_size_max: float = 8.0
    seed: int = 0

    def validate(self) -> None:
        if self.rooms_min < 1 or self.rooms_max < self.rooms_min:
            raise DatagenError(f"invalid room count range [{self.rooms_min}, {self.rooms_max}]")
        if not (0 < self.room_size_min <= self.room_size_max):
            raise DatagenError(
                f"invalid room size range [{self.room_size_min}, {self.room_size_max}]"
            )


@dataclass(frozen=True)
class NoiseParams:
    p_drop_room: float = 0.1
    p_drop_ws: float = 0.2
    sigma_centroid: float = 0.1
    sigma_normal_angle: float = math.radians(5.0)
    sigma_length: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        for name in ("p_drop_room", "p_drop_ws"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise DatagenError(f"{name} must be in [0, 1], got {p}")
        for name in ("sigma_centroid", "sigma_normal_angle", "sigma_length"):
            s = getattr(self, name)
            if not (math.isfinite(s) and s >= 0.0):
                raise DatagenError(f"{name} must be a finite non-negative value, got {s}")


@dataclass(frozen=True)
class GroundTruth:
    """Correspondence from situational-graph node ids to plan node ids."""

    pairs: tuple[tuple[int, int], ...]  # (s_id, a_id), sorted by s_id

    def as_dict(self) -> dict[int, int]:
        return dict(self.pairs)

    def validate(self, a_graph: SceneGraph | None = None, s_graph: SceneGraph | None = None) -> None:
        s_ids = [s for s, _ in self.pairs]
        a_ids = [a for _, a in self.pairs]
        if len(set(s_ids)) != len(s_ids) or len(set(a_ids)) != len(a_ids):
            raise DatagenError("ground truth must be injective on both sides")
        if list(s_ids) != sorted(s_ids):
            raise DatagenError("ground truth pairs must be sorted by s_id")
        if s_graph is not None and a_graph is not None:
            for s, a in self.pairs:
                if not (0 <= s < s_graph.n_nodes and 0 <= a < a_graph.n_nodes):
                    raise DatagenError(f"ground truth pair ({s}, {a}) out of range")
                if s_graph.node(s).node_type is not a_graph.node(a).node_type:
                    raise DatagenError(f"ground truth pair ({s}, {a}) mixes node types")


def generate_floorplan(params: GenParams) -> SceneGraph:
    """Sample a grid-tiled plan: rooms in an R x C grid with shared column
    widths and row heights, four wall surfaces per room, room->ws edges only."""
    params.validate()
    rng = np.random.default_rng(params.seed)
    n_rooms = int(rng.integers(params.rooms_min, params.rooms_max + 1))
    n_grid_rows = max(1, math.floor(math.sqrt(n_rooms)))
    n_grid_cols = math.ceil(n_rooms / n_grid_rows)
    widths = rng.uniform(params.room_size_min, params.room_size_max, size=n_grid_cols)
    heights = rng.uniform(params.room_size_min, params.room_size_max, size=n_grid_rows)
    x_edges = np.concatenate([[0.0], np.cumsum(widths)])
    y_edges = np.concatenate([[0.0], np.cumsum(heights)])

    nodes: list[NodeRecord] = []
    edges = []
    for k in range(n_rooms):
        r, c = divmod(k, n_grid_cols)
        x0, x1 = float(x_edges[c]), float(x_edges[c + 1])
        y0, y1 = float(y_edges[r]), float(y_edges[r + 1])
        xm, ym = (x0 + x1) / 2.0, (y0 + y1) / 2.0
        w, h = x1 - x0, y1 - y0
        room_id = len(nodes)
        nodes.append(NodeRecord(id=room_id, node_type=NodeType.ROOM, centroid=(xm, ym)))
        sides = (
            ((x0, ym), (-1.0, 0.0), h),  # west
            ((x1, ym), (1.0, 0.0), h),   # east
            ((xm, y0), (0.0, -1.0), w),  # south
            ((xm, y1), (0.0, 1.0), w),   # north
        )
        for centroid, normal, length in sides:
            ws_id = len(nodes)
            nodes.append(
                NodeRecord(
                    id=ws_id,
                    node_type=NodeType.WALL_SURFACE,
                    centroid=centroid,
                    normal=normal,
                    length=length,
                    parent_room=room_id,
                )
            )
            edges.append((room_id, ws_id, EdgeType.ROOM_WS))

    graph = SceneGraph(nodes=tuple(nodes), edges=tuple(edges))
    graph.validate()
    return graph


def subgraph(graph: SceneGraph, keep_ids: list[int]) -> tuple[SceneGraph, GroundTruth]:
    """Re-densified node subset plus the new-id -> old-id correspondence.

    Every kept wall surface must have its parent room kept as well. Kept nodes
    keep their relative id order.
    """
    keep = sorted(set(keep_ids))
    if not keep:
        raise DatagenError("subgraph needs at least one node")
    if keep[0] < 0 or keep[-1] >= graph.n_nodes:
        raise DatagenError("subgraph ids out of range")
    old_to_new = {old: new for new, old in enumerate(keep)}
    nodes = []
    for new_id, old_id in enumerate(keep):
        node = graph.node(old_id)
        parent = node.parent_room
        if parent is not None:
            if parent not in old_to_new:
                raise DatagenError(f"ws node {old_id} kept without its parent room")
            parent = old_to_new[parent]
        nodes.append(replace(node, id=new_id, parent_room=parent))
    edges = tuple(
        (old_to_new[s], old_to_new[d], t)
        for s, d, t in graph.edges
        if s in old_to_new and d in old_to_new
    )
    sub = SceneGraph(nodes=tuple(nodes), edges=edges)
    sub.validate()
    gt = GroundTruth(pairs=tuple((new, old) for new, old in enumerate(keep)))
    return sub, gt


def perturb(graph: SceneGraph, noise: NoiseParams) -> tuple[SceneGraph, GroundTruth]:
    """Degrade a plan into a partial noisy observation.

    Draw order is fixed so tests can replay it: (1) room drop masks, redrawn
    whole while every room is dropped, up to a bounded number of attempts,
    after which one rng-chosen room is forced to survive; (2) ws drop mask
    over surviving rooms' walls in id order; (3) centroid offsets for all
    survivors in new-id order; (4) normal rotation angles per surviving wall;
    (5) length jitter per surviving wall. Room drops cascade to their walls.
    """
    noise.validate()
    graph.validate()
    if any(e[2] is not EdgeType.ROOM_WS for e in graph.edges):
        raise DatagenError("perturb expects an unaugmented graph (room_ws edges only)")
    room_ids = [n.id for n in graph.rooms()]
    if not room_ids:
        raise DatagenError("perturb needs at least one room")

    rng = np.random.default_rng(noise.seed)
    for _ in range(_MAX_DROP_RESAMPLES):
        drop_room = rng.random(len(room_ids)) < noise.p_drop_room
        if not drop_room.all():
            break
    else:
        drop_room = np.ones(len(room_ids), dtype=bool)
        drop_room[int(rng.integers(len(room_ids)))] = False

    kept_rooms = {rid for rid, drop in zip(room_ids, drop_room) if not drop}
    ws_ids = [n.id for n in graph.wall_surfaces() if n.parent_room in kept_rooms]
    drop_ws = rng.random(len(ws_ids)) < noise.p_drop_ws
    kept_ws = [wid for wid, drop in zip(ws_ids, drop_ws) if not drop]

    sub, gt = subgraph(graph, sorted(kept_rooms) + kept_ws)

    m = sub.n_nodes
    offsets = rng.normal(0.0, noise.sigma_centroid, size=(m, 2))
    ws_new_ids = [n.id for n in sub.wall_surfaces()]
    angles = rng.normal(0.0, noise.sigma_normal_angle, size=len(ws_new_ids))
    dlens = rng.normal(0.0, noise.sigma_length, size=len(ws_new_ids))

    angle_of = dict(zip(ws_new_ids, angles))
    dlen_of = dict(zip(ws_new_ids, dlens))
    nodes = []
    for node in sub.nodes:
        cx = node.centroid[0] + offsets[node.id, 0]
        cy = node.centroid[1] + offsets[node.id, 1]
        if node.node_type is NodeType.ROOM:
            nodes.append(replace(node, centroid=(cx, cy)))
        else:
            a = angle_of[node.id]
            ca, sa = math.cos(a), math.sin(a)
            nx_ = ca * node.normal[0] - sa * node.normal[1]
            ny_ = sa * node.normal[0] + ca * node.normal[1]
            norm = math.hypot(nx_, ny_)
            nodes.append(
                replace(
                    node,
                    centroid=(cx, cy),
                    normal=(nx_ / norm, ny_ / norm),
                    length=max(node.length + dlen_of[node.id], _MIN_WS_LENGTH),
                )
            )
    out = SceneGraph(nodes=tuple(nodes), edges=sub.edges)
    out.validate()
    gt.validate(graph, out)
    return out, gt


@dataclass
class CorpusSample:
    a_graph: SceneGraph
    s_graph: SceneGraph
    ground_truth: GroundTruth
    split: str | None = None
    gen_seed: int | None = None
    noise_seed: int | None = None


@dataclass
class Corpus:
    samples: list[CorpusSample] = field(default_factory=list)

    def split_samples(self, name: str) -> list[CorpusSample]:
        if name not in SPLIT_NAMES:
            raise DatagenError(f"unknown split {name!r}")
        return [s for s in self.samples if s.split == name]


def _apportion(n: int, fractions: tuple[float, ...]) -> list[int]:
    """Largest-remainder apportionment; remainder ties go to the earlier split."""
    quotas = [n * f for f in fractions]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def stratified_split(
    corpus: Corpus,
    fractions: tuple[float, float, float] = DEFAULT_SPLIT_FRACTIONS,
    seed: int = 0,
    n_bins: int = 4,
) -> Corpus:
    """Assign train/val/test labels, stratified by plan node count.

    Samples are bucketed into quantile bins of A-graph size (at most n_bins,
    never more than the sample count; duplicate quantile edges leave some bins
    empty, which merges them), shuffled within each bin, and apportioned by
    largest remainder.
    """
    if len(fractions) != len(SPLIT_NAMES):
        raise DatagenError("need one fraction per split")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DatagenError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    if not corpus.samples:
        return corpus

    sizes = np.array([s.a_graph.n_nodes for s in corpus.samples])
    k = min(n_bins, len(corpus.samples))
    if k > 1:
        edges = np.quantile(sizes, [i / k for i in range(1, k)])
        bin_of = np.digitize(sizes, edges)
    else:
        bin_of = np.zeros(len(sizes), dtype=int)

    rng = np.random.default_rng(seed)
    for b in range(int(bin_of.max()) + 1):
        idxs = np.flatnonzero(bin_of == b)
        if idxs.size == 0:
            continue
        shuffled = idxs[rng.permutation(idxs.size)]
        counts = _apportion(idxs.size, tuple(fractions))
        start = 0
        for name, count in zip(SPLIT_NAMES, counts):
            for i in shuffled[start : start + count]:
                corpus.samples[int(i)].split = name
            start += count
    return corpus


def generate_corpus(
    count: int,
    gen_params: GenParams = GenParams(),
    noise_params: NoiseParams = NoiseParams(),
    seed: int = 0,
    fractions: tuple[float, float, float] = DEFAULT_SPLIT_FRACTIONS,
) -> Corpus:
    """Generate ``count`` (plan, observation, ground-truth) samples.

    Per-sample generation and perturbation seeds derive from independent
    SeedSequence children of ``seed``, so individual samples are reproducible
    without regenerating the whole corpus.
    """
    if count < 0:
        raise DatagenError(f"count must be non-negative, got {count}")
    gen_params.validate()
    noise_params.validate()
    children = np.random.SeedSequence(seed).spawn(count + 1)
    samples = []
    for i in range(count):
        gseed, nseed = (int(x) for x in children[i].generate_state(2, dtype=np.uint64))
        a_graph = generate_floorplan(replace(gen_params, seed=gseed))
        s_graph, gt = perturb(a_graph, replace(noise_params, seed=nseed))
        samples.append(
            CorpusSample(
                a_graph=a_graph, s_graph=s_graph, ground_truth=gt,
                gen_seed=gseed, noise_seed=nseed,
            )
        )
    corpus = Corpus(samples=samples)
    split_seed = int(children[count].generate_state(1, dtype=np.uint64)[0])
    return stratified_split(corpus, fractions=fractions, seed=split_seed)


def save_corpus(corpus: Corpus, out_dir: str | Path, meta: dict | None = None) -> None:
    """Write sample_<idx>.json files plus a manifest.json index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, sample in enumerate(corpus.samples):
        name = f"sample_{i}.json"
        payload = {
            "a_graph": graph_to_json_dict(sample.a_graph),
            "s_graph": graph_to_json_dict(sample.s_graph),
            "ground_truth": [[s, a] for s, a in sample.ground_truth.pairs],
        }
        (out / name).write_text(json.dumps(payload) + "\n")
        entries.append(
            {
                "file": name,
                "split": sample.split,
                "gen_seed": sample.gen_seed,
                "noise_seed": sample.noise_seed,
                "a_nodes": sample.a_graph.n_nodes,
                "s_nodes": sample.s_graph.n_nodes,
            }
        )
    manifest = {"version": CORPUS_FORMAT_VERSION, "count": len(corpus.samples), "samples": entries}
    if meta:
        manifest.update(meta)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_corpus(corpus_dir: str | Path) -> Corpus:
    root = Path(corpus_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DatagenError(f"no manifest.json in {root}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != CORPUS_FORMAT_VERSION:
        raise DatagenError(f"unsupported corpus version {manifest.get('version')!r}")
    samples = []
    for entry in manifest["samples"]:
        payload = json.loads((root / entry["file"]).read_text())
        a_graph = graph_from_json_dict(payload["a_graph"])
        s_graph = graph_from_json_dict(payload["s_graph"])
        gt = GroundTruth(pairs=tuple((int(s), int(a)) for s, a in payload["ground_truth"]))
        gt.validate(a_graph, s_graph)
        split = entry.get("split")
        if split is not None and split not in SPLIT_NAMES:
            raise DatagenError(f"unknown split label {split!r} in manifest")
        samples.append(
            CorpusSample(
                a_graph=a_graph, s_graph=s_graph, ground_truth=gt, split=split,
                gen_seed=entry.get("gen_seed"), noise_seed=entry.get("noise_seed"),
            )
        )
    return Corpus(samples=samples)


def gen_params_to_dict(p: GenParams) -> dict:
    return asdict(p)


def noise_params_to_dict(p: NoiseParams) -> dict:
    return asdict(p)
