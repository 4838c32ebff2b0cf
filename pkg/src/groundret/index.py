"""Exact k-nearest-neighbour retrieval over embedding records."""

import csv
import heapq
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatVersionError, InvalidArgument, ParseError

GEMB_MAGIC = b"GEMB"
GEMB_VERSION = 1


@dataclass(frozen=True)
class EmbeddingRecord:
    image_id: str
    vector: np.ndarray


@dataclass
class RetrievalResult:
    query_id: str
    ranked: list  # [(ref_id, distance)] ascending
    k: int

    @property
    def ids(self):
        return [rid for rid, _ in self.ranked]


def row_distances(points, q):
    """Euclidean distances from q to each row; shared by tree and scan."""
    diff = points - q
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


@dataclass
class _Node:
    lo: int
    hi: int
    axis: int = -1
    split: float = 0.0
    left: "_Node" = None
    right: "_Node" = None
    bbox_min: np.ndarray = field(default=None, repr=False)
    bbox_max: np.ndarray = field(default=None, repr=False)


class EmbeddingIndex:
    """Balanced k-d tree (median split on the widest axis) with leaf buckets."""

    def __init__(self, records, leaf_size=8):
        if not records:
            raise InvalidArgument("cannot index an empty record list")
        ids = [r.image_id for r in records]
        if len(set(ids)) != len(ids):
            raise InvalidArgument("duplicate id in embedding records")
        dims = {np.asarray(r.vector).shape for r in records}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise InvalidArgument(f"records have mismatched dims {sorted(dims)}")
        data = np.array([np.asarray(r.vector, dtype=np.float64) for r in records])
        self.dim = data.shape[1]
        self.leaf_size = leaf_size
        order = np.arange(len(records))
        self.root = self._build(data, order, 0, len(order))
        # leaves reference contiguous slices of the permuted arrays
        self.order = order
        self.points = np.ascontiguousarray(data[order])
        self.ids = [ids[i] for i in order]
        self.records = list(records)

    def __len__(self):
        return len(self.ids)

    def _build(self, data, order, lo, hi):
        pts = data[order[lo:hi]]
        node = _Node(lo, hi, bbox_min=pts.min(axis=0), bbox_max=pts.max(axis=0))
        if hi - lo <= self.leaf_size:
            return node
        spread = node.bbox_max - node.bbox_min
        axis = int(np.argmax(spread))
        if spread[axis] == 0.0:
            return node
        vals = pts[:, axis]
        # stable ordering keeps the build deterministic for equal coordinates
        perm = np.argsort(vals, kind="stable")
        order[lo:hi] = order[lo:hi][perm]
        mid = lo + (hi - lo) // 2
        node.axis = axis
        node.split = float(vals[perm[(hi - lo) // 2]])
        node.left = self._build(data, order, lo, mid)
        node.right = self._build(data, order, mid, hi)
        return node

    def depth(self):
        def walk(node):
            if node.left is None:
                return 1
            return 1 + max(walk(node.left), walk(node.right))
        return walk(self.root)

    def query(self, q, k):
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (self.dim,):
            raise InvalidArgument(f"query dim {q.shape} != index dim {self.dim}")
        if k < 1:
            raise InvalidArgument("k must be >= 1")
        k = min(k, len(self))
        # max-heap of the best k as (-dist, negated id key, idx)
        heap = []

        def bound(node):
            gap = np.maximum(node.bbox_min - q, 0.0) + np.maximum(q - node.bbox_max, 0.0)
            return float(np.sqrt(np.dot(gap, gap)))

        def worst():
            return -heap[0][0] if len(heap) == k else np.inf

        def visit(node):
            # strict comparison keeps equal-distance candidates for id tie-breaks
            if bound(node) > worst():
                return
            if node.left is None:
                dists = row_distances(self.points[node.lo:node.hi], q)
                for off, dist in enumerate(dists):
                    idx = node.lo + off
                    item = (-dist, _RevKey(self.ids[idx]), idx)
                    if len(heap) < k:
                        heapq.heappush(heap, item)
                    elif (dist, self.ids[idx]) < (-heap[0][0], heap[0][1].key):
                        heapq.heapreplace(heap, item)
                return
            first, second = (node.left, node.right) if q[node.axis] < node.split else (node.right, node.left)
            visit(first)
            visit(second)

        visit(self.root)
        best = sorted(((-nd, key.key) for nd, key, _ in heap))
        return [(rid, float(d)) for d, rid in best]


class _RevKey:
    """Inverts string ordering so the heap top holds the largest id among ties."""

    __slots__ = ("key",)

    def __init__(self, key):
        self.key = key

    def __lt__(self, other):
        return self.key > other.key

    def __eq__(self, other):
        return self.key == other.key


def build_index(records, leaf_size=8):
    return EmbeddingIndex(records, leaf_size=leaf_size)


def query_topk(index, q, k, query_id=""):
    return RetrievalResult(query_id, index.query(q, k), k)


def brute_force_topk(records, q, k, query_id=""):
    if k < 1:
        raise InvalidArgument("k must be >= 1")
    if not records:
        return RetrievalResult(query_id, [], k)
    q = np.asarray(q, dtype=np.float64)
    data = np.array([np.asarray(r.vector, dtype=np.float64) for r in records])
    if data.shape[1:] != q.shape:
        raise InvalidArgument(f"query dim {q.shape} != record dim {data.shape[1:]}")
    dists = row_distances(data, q)
    ranked = sorted(zip(dists.tolist(), (r.image_id for r in records)))[:k]
    return RetrievalResult(query_id, [(rid, d) for d, rid in ranked], k)


# ---------------------------------------------------------------------------
# GEMB embedding database


def write_embeddings(records, path):
    dim = len(records[0].vector) if records else 0
    with open(path, "wb") as fh:
        fh.write(GEMB_MAGIC)
        fh.write(struct.pack("<IIQ", GEMB_VERSION, dim, len(records)))
        for rec in records:
            raw = rec.image_id.encode("utf-8")
            vec = np.asarray(rec.vector, dtype="<f4")
            if vec.shape != (dim,):
                raise InvalidArgument(f"record {rec.image_id} has dim {vec.shape}, expected {dim}")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(vec.tobytes())


def read_embeddings(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != GEMB_MAGIC:
        raise ParseError(f"{path}: not an embedding database (bad magic)")
    version, dim, count = struct.unpack_from("<IIQ", blob, 4)
    if version != GEMB_VERSION:
        raise FormatVersionError(f"{path}: embedding format version {version}, expected {GEMB_VERSION}")
    pos = 20
    records = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            image_id = blob[pos:pos + n].decode("utf-8")
            pos += n
            vec = np.frombuffer(blob, dtype="<f4", count=dim, offset=pos).astype(np.float64)
            pos += 4 * dim
            records.append(EmbeddingRecord(image_id, vec))
    except (struct.error, ValueError) as exc:
        raise ParseError(f"{path}: truncated embedding database ({exc})") from None
    return records


# ---------------------------------------------------------------------------
# ranked retrieval lists

RETRIEVAL_HEADER = ["query_id", "k", "rank", "ref_id", "distance"]


def write_retrievals(results, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RETRIEVAL_HEADER)
        for res in results:
            for rank, (rid, dist) in enumerate(res.ranked, start=1):
                writer.writerow([res.query_id, res.k, rank, rid, repr(float(dist))])


def read_retrievals(path):
    """Inverse of write_retrievals; query order follows first appearance."""
    by_query = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != RETRIEVAL_HEADER:
            raise ParseError(f"{path}:1: expected header {','.join(RETRIEVAL_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                qid, k, rank, rid, dist = row
                res = by_query.setdefault(qid, RetrievalResult(qid, [], int(k)))
                if int(rank) != len(res.ranked) + 1:
                    raise ValueError(f"rank {rank} out of sequence")
                res.ranked.append((rid, float(dist)))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    return list(by_query.values())
