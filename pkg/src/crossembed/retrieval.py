"""Exact brute-force retrieval and recall@K in both directions.

Scores are inner products of unit-norm rows, i.e. cosine similarities. The
ranking order is (score descending, index position ascending) everywhere, so
tiled search, rank computation and the naive full sort agree exactly.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from crossembed.errors import ContractError, DataError, ShapeError

DEFAULT_KS = (1, 10, 50, 100)
DEFAULT_MEMORY_BUDGET = 512 * 2**20
_QUERY_BLOCK = 1024


@dataclass
class EmbeddingIndex:
    matrix: np.ndarray
    ids: list

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2 or len(self.ids) != self.matrix.shape[0]:
            raise ShapeError(f"index matrix {self.matrix.shape} vs {len(self.ids)} ids")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("index ids must be unique")
        norms = np.linalg.norm(self.matrix, axis=1)
        if norms.size and np.abs(norms - 1).max() > 1e-5:
            raise ContractError("index rows must be unit-norm (within 1e-5)")
        self.position = {i: p for p, i in enumerate(self.ids)}

    def __len__(self) -> int:
        return self.matrix.shape[0]


@dataclass
class RetrievalReport:
    direction: str
    recall_at: dict
    num_queries: int
    ranks: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"direction": self.direction, "num_queries": self.num_queries,
                "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())}}


# ---------------------------------------------------------------------------
# top-K


def scores(query: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Inner products accumulated in float64, rounded to float32.

    float32 GEMM rounding depends on the block shape, so duplicate rows could
    score one ulp apart in different tiles and break the tie rule. The
    float64 products of float32 inputs are exact; rounding the sums back to
    float32 makes scores independent of tiling in practice.
    """
    return (query.astype(np.float64) @ matrix.astype(np.float64).T).astype(np.float32)


def _take_best(scores: np.ndarray, cols: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row top ``k`` of ``scores`` ordered by (score desc, col asc)."""
    q, n = scores.shape
    if n > k:
        kth = np.partition(scores, n - k, axis=1)[:, n - k]
        cand = scores >= kth[:, None]
        counts = cand.sum(axis=1)
        width = int(counts.max())
        if width < n:
            r, c = np.nonzero(cand)
            slot = np.arange(r.size) - np.repeat(np.cumsum(counts) - counts, counts)
            s2 = np.full((q, width), -np.inf, dtype=scores.dtype)
            c2 = np.full((q, width), np.iinfo(np.int64).max, dtype=np.int64)
            s2[r, slot] = scores[r, c]
            c2[r, slot] = cols[r, c]
            scores, cols = s2, c2
    order = np.lexsort((cols, -scores), axis=-1)[:, :k]
    return np.take_along_axis(scores, order, 1), np.take_along_axis(cols, order, 1)


def top_k(query: np.ndarray, index, k: int,
          memory_budget: int = DEFAULT_MEMORY_BUDGET) -> tuple[np.ndarray, np.ndarray]:
    """Exact top-``k`` index positions and scores for every query row.

    The index is scanned in tiles sized so that one score block fits in
    ``memory_budget`` bytes; a running top-k buffer is merged per tile.
    """
    matrix = index.matrix if isinstance(index, EmbeddingIndex) else np.asarray(index, np.float32)
    query = np.asarray(query, dtype=np.float32)
    m, d = matrix.shape
    if query.ndim != 2 or query.shape[1] != d:
        raise ShapeError(f"query shape {query.shape} vs index dim {d}")
    if not 1 <= k <= m:
        raise ContractError(f"k={k} must lie in [1, {m}]")
    qb = min(_QUERY_BLOCK, max(1, len(query)))
    tile = max(k, min(m, memory_budget // (16 * 4 * qb)))  # float64 block plus temporaries
    out_s = np.empty((len(query), k), np.float32)
    out_i = np.empty((len(query), k), np.int64)
    for q0 in range(0, len(query), qb):
        qblock = query[q0:q0 + qb]
        best_s = np.empty((len(qblock), 0), np.float32)
        best_i = np.empty((len(qblock), 0), np.int64)
        for t0 in range(0, m, tile):
            s = scores(qblock, matrix[t0:t0 + tile])
            cols = np.broadcast_to(np.arange(t0, t0 + s.shape[1]), s.shape)
            best_s, best_i = _take_best(np.concatenate([best_s, s], 1),
                                        np.concatenate([best_i, cols], 1), k)
        out_s[q0:q0 + qb] = best_s
        out_i[q0:q0 + qb] = best_i
    return out_i, out_s


def top_k_ids(query: np.ndarray, index: EmbeddingIndex, k: int, **kw) -> list[list]:
    pos, _ = top_k(query, index, k, **kw)
    return [[index.ids[p] for p in row] for row in pos]


# ---------------------------------------------------------------------------
# recall


def ranks_of(query: np.ndarray, matrix: np.ndarray, relevant: Sequence[np.ndarray],
             block: int = _QUERY_BLOCK) -> np.ndarray:
    """0-based rank of the best-placed relevant item for each query.

    ``relevant[q]`` lists the index positions that count as correct for
    query ``q``. Rank = items strictly ahead in (score desc, position asc) order.
    """
    query = np.asarray(query, np.float32)
    matrix = np.asarray(matrix, np.float32)
    ranks = np.empty(len(query), np.int64)
    positions = np.arange(matrix.shape[0])
    single = all(len(r) == 1 for r in relevant)
    for q0 in range(0, len(query), block):
        s = scores(query[q0:q0 + block], matrix)
        if single:
            rel = np.array([relevant[i][0] for i in range(q0, q0 + s.shape[0])], dtype=np.int64)
            best = s[np.arange(s.shape[0]), rel][:, None]
            ahead = (s > best) | ((s == best) & (positions[None, :] < rel[:, None]))
            ranks[q0:q0 + s.shape[0]] = ahead.sum(axis=1)
            continue
        for r in range(s.shape[0]):
            rel = np.asarray(relevant[q0 + r], dtype=np.int64)
            if rel.size == 0:
                raise DataError(f"query {q0 + r} has no relevant item")
            rs = s[r, rel]
            best = rs.max()
            p = rel[rs == best].min()
            row = s[r]
            ranks[q0 + r] = int((row > best).sum() + ((row == best) & (positions < p)).sum())
    return ranks


def report_from_ranks(direction: str, ranks: np.ndarray, ks: Sequence[int]) -> RetrievalReport:
    ks = sorted(set(int(k) for k in ks))
    n = len(ranks)
    recall = {k: float((ranks < k).sum() / n) if n else 0.0 for k in ks}
    return RetrievalReport(direction=direction, recall_at=recall, num_queries=n, ranks=ranks)


def recall_at_k(query: np.ndarray, query_ids: Sequence, index: EmbeddingIndex,
                partner: Mapping, ks: Sequence[int] = DEFAULT_KS,
                direction: str = "t2i") -> RetrievalReport:
    """R@K where each query's single relevant item is ``partner[query_id]``."""
    relevant = []
    for qid in query_ids:
        pid = partner.get(qid)
        if pid is None or pid not in index.position:
            raise DataError(f"no partner in the index for query id {qid!r} (wanted {pid!r})")
        relevant.append(np.array([index.position[pid]]))
    return report_from_ranks(direction, ranks_of(query, index.matrix, relevant), ks)


def _relevant_sets(n: int, groups: Optional[Sequence]) -> list[np.ndarray]:
    if groups is None:
        return [np.array([i]) for i in range(n)]
    groups = np.asarray(groups)
    members: dict = {}
    for i, g in enumerate(groups.tolist()):
        members.setdefault(g, []).append(i)
    table = {g: np.array(v) for g, v in members.items()}
    return [table[g] for g in groups.tolist()]


def evaluate_pairs(img_emb: np.ndarray, txt_emb: np.ndarray, ks: Sequence[int] = DEFAULT_KS,
                   groups: Optional[Sequence] = None,
                   memory_budget: int = DEFAULT_MEMORY_BUDGET) -> dict[str, RetrievalReport]:
    """Both retrieval directions for row-aligned image/text embeddings.

    Row ``i`` of each matrix is the partner of row ``i`` of the other. With
    ``groups``, any item sharing the query's group counts as correct
    (class-level relevance); otherwise only the aligned partner does.
    """
    img_emb = np.asarray(img_emb, np.float32)
    txt_emb = np.asarray(txt_emb, np.float32)
    if img_emb.shape != txt_emb.shape:
        raise ShapeError(f"embedding shapes differ: {img_emb.shape} vs {txt_emb.shape}")
    ks = [k for k in ks if k <= len(img_emb)] or [len(img_emb)]
    rel = _relevant_sets(len(img_emb), groups)
    # float64 and float32 score blocks plus two boolean temporaries per query row
    block = max(1, memory_budget // (14 * max(1, len(img_emb))))
    return {
        "t2i": report_from_ranks("t2i", ranks_of(txt_emb, img_emb, rel, block), ks),
        "i2t": report_from_ranks("i2t", ranks_of(img_emb, txt_emb, rel, block), ks),
    }


def format_table(rows: Mapping[str, Mapping[str, RetrievalReport]], ks: Sequence[int]) -> str:
    """Aligned text table: one block per model, one line per direction, R@K in percent."""
    ks = list(ks)
    name_w = max([len("Model / R@K")] + [len(n) for n in rows])
    head = f"{'Model / R@K':<{name_w}}  {'':3}" + "".join(f"{k:>8}" for k in ks)
    lines = [head, "-" * len(head)]
    for name, reports in rows.items():
        for j, direction in enumerate(("t2i", "i2t")):
            rep = reports[direction]
            label = name if j == 0 else ""
            vals = "".join(f"{100 * rep.recall_at[k]:>8.1f}" if k in rep.recall_at else f"{'-':>8}"
                           for k in ks)
            lines.append(f"{label:<{name_w}}  {direction:3}{vals}")
    return "\n".join(lines)


def reports_to_json(rows: Mapping[str, Mapping[str, RetrievalReport]]) -> str:
    payload = {name: {d: r.to_dict() for d, r in reps.items()} for name, reps in rows.items()}
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# embedding files
#
#   offset  size  field
#   0       8     magic b"XEMBVECS"
#   8       4     uint32 version (1)
#   12      8     uint64 M (rows)
#   20      4     uint32 D (dim)
#   24      4*M*D float32 little-endian, row-major
# ids go to a sidecar "<path>.ids", one per line.

EMB_MAGIC = b"XEMBVECS"
EMB_VERSION = 1


def write_embeddings(path, matrix: np.ndarray, ids: Sequence[str]) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    m, d = matrix.shape
    if len(ids) != m:
        raise ShapeError(f"{m} rows but {len(ids)} ids")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC + struct.pack("<IQI", EMB_VERSION, m, d))
        fh.write(matrix.tobytes())
    Path(str(path) + ".ids").write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")


def read_embeddings(path) -> tuple[np.ndarray, list[str]]:
    buf = Path(path).read_bytes()
    if buf[:8] != EMB_MAGIC:
        raise DataError(f"{path}: not an embedding file")
    version, m, d = struct.unpack_from("<IQI", buf, 8)
    if version != EMB_VERSION:
        raise DataError(f"{path}: unsupported embedding file version {version}")
    if len(buf) != 24 + 4 * m * d:
        raise DataError(f"{path}: payload size does not match header ({m} x {d})")
    matrix = np.frombuffer(buf, dtype="<f4", offset=24).reshape(m, d).astype(np.float32)
    ids = Path(str(path) + ".ids").read_text(encoding="utf-8").splitlines()
    if len(ids) != m:
        raise DataError(f"{path}.ids has {len(ids)} ids for {m} rows")
    return matrix, ids


def benchmark_scan(index_size: int = 200_000, dim: int = 256, queries: int = 1000, k: int = 100,
                   memory_budget: int = DEFAULT_MEMORY_BUDGET, seed: int = 0) -> dict:
    """Time an exact top-k scan; reports seconds per 1K queries and the 1M-row extrapolation."""
    rng = np.random.default_rng(seed)
    index = rng.standard_normal((index_size, dim), dtype=np.float32)
    index /= np.linalg.norm(index, axis=1, keepdims=True)
    q = rng.standard_normal((queries, dim), dtype=np.float32)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    t0 = time.perf_counter()
    top_k(q, index, k, memory_budget=memory_budget)
    elapsed = time.perf_counter() - t0
    per_1k = elapsed * 1000 / queries
    return {"index_size": index_size, "dim": dim, "queries": queries, "k": k,
            "seconds": elapsed, "seconds_per_1k_queries": per_1k,
            "extrapolated_1M_seconds_per_1k_queries": per_1k * 1_000_000 / index_size}
