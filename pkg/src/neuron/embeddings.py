"""Concept-graph embeddings and per-admission vector pooling.

Walks treat the is-a edges as undirected and use the standard second-order
bias: weight 1/p for stepping back to the previous node, 1 for a common
neighbor of the previous node, 1/q otherwise. Training is skip-gram with
negative sampling over the walk corpus, run in a deterministic batched mode
(the default) or an optional lock-free threaded mode.

Admission-level vectors are a TF-IDF weighted mean of concept vectors:

    v = sum_c tf(c) * idf(c) * emb(c) / sum_c tf(c) * idf(c)

restricted to codes that actually have an embedding; admissions where no
code resolves pool to the zero vector, encoding absence of ontology
evidence rather than missingness. The IDF is the smoothed variant
ln((1 + N) / (1 + df)) + 1 over admissions as documents.
"""

from __future__ import annotations

import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyCorpus, EmptyGraph
from .ontology import ConceptGraph


@dataclass
class EmbeddingTable:
    dim: int
    vectors: dict[str, np.ndarray]

    def __contains__(self, concept_id: str) -> bool:
        return concept_id in self.vectors

    def save_tsv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for cid in sorted(self.vectors):
                vals = "\t".join("%.8g" % x for x in self.vectors[cid])
                fh.write(f"{cid}\t{vals}\n")

    @classmethod
    def load_tsv(cls, path: str | Path) -> "EmbeddingTable":
        vectors: dict[str, np.ndarray] = {}
        dim = 0
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                parts = line.rstrip("\n").split("\t")
                if len(parts) < 2:
                    continue
                vec = np.array([float(x) for x in parts[1:]], dtype=np.float64)
                vectors[parts[0]] = vec
                dim = len(vec)
        return cls(dim=dim, vectors=vectors)


@dataclass
class WeightTable:
    idf: dict[str, float]
    n_admissions: int


def _undirected_neighbors(graph: ConceptGraph) -> dict[str, list[str]]:
    nbrs: dict[str, set[str]] = {c: set() for c in graph.concepts}
    for child, parent in graph.is_a_edges:
        nbrs[child].add(parent)
        nbrs[parent].add(child)
    return {c: sorted(n) for c, n in nbrs.items()}


def generate_walks(
    graph: ConceptGraph,
    p: float = 1.0,
    q: float = 1.0,
    walk_len: int = 40,
    walks_per_node: int = 10,
    seed: int = 0,
) -> list[list[str]]:
    """Biased second-order random walks, ``walks_per_node`` per start node.

    Reproducible: each walk draws from its own generator seeded by
    (seed, node index, walk index), so walks are independent of execution
    order and safe to generate in parallel.
    """
    if not graph.concepts:
        raise EmptyGraph()
    if p <= 0 or q <= 0:
        raise ValueError("p and q must be positive")
    if walk_len < 2:
        raise ValueError("walk_len must be at least 2")

    nbrs = _undirected_neighbors(graph)
    nodes = sorted(graph.concepts)
    walks: list[list[str]] = []
    for node_idx, start in enumerate(nodes):
        for walk_idx in range(walks_per_node):
            rng = np.random.default_rng([seed, node_idx, walk_idx])
            walk = [start]
            if not nbrs[start]:
                walks.append(walk)
                continue
            while len(walk) < walk_len:
                cur = walk[-1]
                options = nbrs[cur]
                if len(walk) == 1:
                    walk.append(options[rng.integers(len(options))])
                    continue
                prev = walk[-2]
                prev_nbrs = nbrs[prev]
                weights = np.empty(len(options))
                for i, nxt in enumerate(options):
                    if nxt == prev:
                        weights[i] = 1.0 / p
                    elif nxt in prev_nbrs:
                        weights[i] = 1.0
                    else:
                        weights[i] = 1.0 / q
                cdf = np.cumsum(weights)
                pick = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
                walk.append(options[min(pick, len(options) - 1)])
            walks.append(walk)
    return walks


def _skipgram_pairs(
    walks: Sequence[Sequence[str]], index: dict[str, int], window: int
) -> tuple[np.ndarray, np.ndarray]:
    centers: list[int] = []
    contexts: list[int] = []
    for walk in walks:
        ids = [index[w] for w in walk]
        n = len(ids)
        for i in range(n):
            lo = max(0, i - window)
            hi = min(n, i + window + 1)
            for j in range(lo, hi):
                if j == i:
                    continue
                centers.append(ids[i])
                contexts.append(ids[j])
    return np.array(centers, dtype=np.int64), np.array(contexts, dtype=np.int64)


def _sgns_epoch(
    w_in: np.ndarray,
    w_out: np.ndarray,
    centers: np.ndarray,
    contexts: np.ndarray,
    noise_cdf: np.ndarray,
    negatives: int,
    lr_schedule,
    rng: np.random.Generator,
    batch: int = 512,
) -> None:
    order = rng.permutation(len(centers))
    for start in range(0, len(order), batch):
        sel = order[start : start + batch]
        c_idx = centers[sel]
        o_idx = contexts[sel]
        neg_idx = np.searchsorted(noise_cdf, rng.random((len(sel), negatives)), side="right")
        np.clip(neg_idx, 0, len(noise_cdf) - 1, out=neg_idx)

        alpha = lr_schedule(start)
        c = w_in[c_idx]                      # (B, dim)
        o_pos = w_out[o_idx]                 # (B, dim)
        o_neg = w_out[neg_idx]               # (B, k, dim)

        s_pos = _sigmoid(np.einsum("bd,bd->b", c, o_pos))
        s_neg = _sigmoid(np.einsum("bd,bkd->bk", c, o_neg))

        g_pos = (s_pos - 1.0)[:, None]       # target 1
        g_neg = s_neg[:, :, None]            # target 0

        grad_c = g_pos * o_pos + np.einsum("bko,bkd->bd", g_neg, o_neg)
        np.add.at(w_in, c_idx, -alpha * grad_c)
        np.add.at(w_out, o_idx, -alpha * (g_pos * c))
        grad_neg = (g_neg * c[:, None, :]).reshape(-1, c.shape[1])
        np.add.at(w_out, neg_idx.reshape(-1), -alpha * grad_neg)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def train_skipgram(
    walks: Sequence[Sequence[str]],
    dim: int = 32,
    window: int = 5,
    negatives: int = 5,
    epochs: int = 5,
    lr: float = 0.025,
    seed: int = 0,
    workers: int = 1,
    normalize: bool = False,
) -> EmbeddingTable:
    """Train skip-gram with negative sampling over the walk corpus.

    ``workers=1`` (the default) is fully deterministic for a fixed seed.
    ``workers > 1`` shards walks across threads that update shared weight
    matrices without locks; faster but not reproducible, and excluded from
    any verification run.
    """
    walks = [w for w in walks if w]
    if not walks:
        raise EmptyCorpus("walk corpus")
    if dim < 1:
        raise ValueError("dim must be >= 1")

    vocab = sorted({node for walk in walks for node in walk})
    index = {node: i for i, node in enumerate(vocab)}
    rng = np.random.default_rng(seed)
    w_in = (rng.random((len(vocab), dim)) - 0.5) / dim
    w_out = np.zeros((len(vocab), dim))

    if epochs > 0:
        freq = np.zeros(len(vocab))
        for walk in walks:
            for node in walk:
                freq[index[node]] += 1
        noise = freq ** 0.75
        noise_cdf = np.cumsum(noise / noise.sum())

        if workers <= 1:
            centers, contexts = _skipgram_pairs(walks, index, window)
            if len(centers) == 0:
                # every walk is a single isolated node; nothing to train on
                pass
            else:
                total = epochs * len(centers)
                done = 0

                for _ in range(epochs):
                    base = done

                    def schedule(offset: int, _base=base) -> float:
                        frac = (_base + offset) / total
                        return max(lr * (1.0 - frac), lr * 1e-4)

                    _sgns_epoch(w_in, w_out, centers, contexts, noise_cdf,
                                negatives, schedule, rng)
                    done += len(centers)
        else:
            shards = [walks[i::workers] for i in range(workers)]
            shards = [s for s in shards if s]

            def run_shard(shard_id: int) -> None:
                shard_rng = np.random.default_rng([seed, 1 + shard_id])
                cen, ctx = _skipgram_pairs(shards[shard_id], index, window)
                if len(cen) == 0:
                    return
                total = epochs * len(cen)
                done = 0
                for _ in range(epochs):
                    base = done
                    _sgns_epoch(
                        w_in, w_out, cen, ctx, noise_cdf, negatives,
                        lambda off, _b=base: max(lr * (1.0 - (_b + off) / total), lr * 1e-4),
                        shard_rng,
                    )
                    done += len(cen)

            with ThreadPoolExecutor(max_workers=len(shards)) as pool:
                list(pool.map(run_shard, range(len(shards))))

    if normalize:
        norms = np.linalg.norm(w_in, axis=1, keepdims=True)
        w_in = np.where(norms > 0, w_in / np.maximum(norms, 1e-12), w_in)

    return EmbeddingTable(dim=dim, vectors={node: w_in[i].copy() for node, i in index.items()})


def compute_idf(admissions: Iterable) -> WeightTable:
    """Smoothed inverse document frequency over admissions.

    Each admission is one document and its distinct codes are the terms.
    Accepts AdmissionRecord-like objects (anything with a ``codes``
    attribute) or bare code lists.
    """
    df: Counter[str] = Counter()
    n = 0
    for adm in admissions:
        codes = adm.codes if hasattr(adm, "codes") else adm
        n += 1
        df.update(set(codes))
    if n < 1:
        raise EmptyCorpus("admission list")
    idf = {c: math.log((1 + n) / (1 + k)) + 1.0 for c, k in df.items()}
    return WeightTable(idf=idf, n_admissions=n)


def pool_admission(codes: Sequence[str], emb: EmbeddingTable, w: WeightTable) -> np.ndarray:
    """TF-IDF weighted mean of the admission's concept vectors.

    Iterates distinct codes in sorted order, so the result is bit-identical
    under any permutation of ``codes``. Codes without an embedding are
    skipped; codes without an IDF entry get weight 0.
    """
    tf = Counter(codes)
    num = np.zeros(emb.dim)
    den = 0.0
    for code in sorted(tf):
        if code not in emb.vectors:
            continue
        weight = tf[code] * w.idf.get(code, 0.0)
        if weight == 0.0:
            continue
        num += weight * emb.vectors[code]
        den += weight
    if den <= 0.0:
        return np.zeros(emb.dim)
    return num / den
