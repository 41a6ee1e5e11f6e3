"""Knowledge-graph data model, file formats and the synthetic generator."""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

MODALITIES = ("g", "r", "a", "v", "s")
FEATURE_MAGIC = b"MMFT"
MASK_MAGIC = b"MASK"


class Vocab:
    """Interns names to dense ids in first-seen order."""

    def __init__(self, names: Iterable[str] = ()):
        self.names: list[str] = []
        self.index: dict[str, int] = {}
        for n in names:
            self.add(n)

    def add(self, name: str) -> int:
        idx = self.index.get(name)
        if idx is None:
            idx = len(self.names)
            self.index[name] = idx
            self.names.append(name)
        return idx

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self.index


def _triple_array(rows) -> np.ndarray:
    arr = np.asarray(rows, dtype=np.int64)
    return arr.reshape(-1, 3)


@dataclass
class KnowledgeGraph:
    entities: list[str]
    relations: list[str]
    train: np.ndarray
    valid: np.ndarray = field(default_factory=lambda: _triple_array([]))
    test: np.ndarray = field(default_factory=lambda: _triple_array([]))

    def __post_init__(self):
        self.train = _triple_array(self.train)
        self.valid = _triple_array(self.valid)
        self.test = _triple_array(self.test)
        self._adjacency = None
        self.validate()

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    @property
    def entity_index(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.entities)}

    @property
    def relation_index(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.relations)}

    def split(self, name: str) -> np.ndarray:
        if name not in ("train", "valid", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def all_triples(self) -> np.ndarray:
        return np.concatenate([self.train, self.valid, self.test])

    def validate(self) -> None:
        for name in ("train", "valid", "test"):
            t = self.split(name)
            if not len(t):
                continue
            if t[:, [0, 2]].min() < 0 or t[:, [0, 2]].max() >= self.num_entities:
                raise ValueError(f"{name} split references an unknown entity id")
            if t[:, 1].min() < 0 or t[:, 1].max() >= self.num_relations:
                raise ValueError(f"{name} split references an unknown relation id")
        sets = {n: set(map(tuple, self.split(n).tolist())) for n in ("train", "valid", "test")}
        for a, b in (("train", "valid"), ("train", "test"), ("valid", "test")):
            shared = sets[a] & sets[b]
            if shared:
                raise ValueError(f"splits {a} and {b} share {len(shared)} triple(s), "
                                 f"e.g. {next(iter(shared))}")

    @property
    def adjacency(self) -> list[np.ndarray]:
        """Undirected neighbor ids per entity from train triples (self excluded)."""
        if self._adjacency is None:
            nbrs: list[set[int]] = [set() for _ in range(self.num_entities)]
            for h, _, t in self.train.tolist():
                if h != t:
                    nbrs[h].add(t)
                    nbrs[t].add(h)
            self._adjacency = [np.array(sorted(s), dtype=np.int64) for s in nbrs]
        return self._adjacency

    def dense_adjacency(self, self_loops: bool = True) -> np.ndarray:
        adj = np.zeros((self.num_entities, self.num_entities), dtype=bool)
        for i, nb in enumerate(self.adjacency):
            adj[i, nb] = True
        if self_loops:
            np.fill_diagonal(adj, True)
        return adj


def _read_tsv_triples(path: Path, ents: Vocab, rels: Vocab, allow_new: bool) -> list[tuple]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected head<TAB>relation<TAB>tail, "
                                 f"got {len(parts)} field(s)")
            h, r, t = parts
            if not allow_new:
                for name in (h, t):
                    if name not in ents:
                        raise ValueError(f"{path}:{lineno}: unknown entity {name!r}")
                if r not in rels:
                    raise ValueError(f"{path}:{lineno}: unknown relation {r!r}")
            rows.append((ents.add(h), rels.add(r), ents.add(t)))
    return rows


def load_triples(train: str | Path, valid: str | Path | None = None,
                 test: str | Path | None = None, strict: bool = False,
                 entities: Sequence[str] = (), relations: Sequence[str] = ()) -> KnowledgeGraph:
    """Load tab-separated ``head relation tail`` files, one per split.

    Names are interned to dense ids in order of first appearance, after any
    pre-seeded ``entities``/``relations`` (which fixes the id order, e.g. to match
    the rows of a binary feature file). With ``strict`` set, valid/test may only
    mention names already seen in train.
    """
    ents, rels = Vocab(entities), Vocab(relations)
    splits = {"train": _read_tsv_triples(Path(train), ents, rels, True)}
    for name, path in (("valid", valid), ("test", test)):
        splits[name] = _read_tsv_triples(Path(path), ents, rels, not strict) if path else []
    kg = KnowledgeGraph(ents.names, rels.names, splits["train"], splits["valid"], splits["test"])
    log.info("loaded %d entities, %d relations, %d/%d/%d triples", kg.num_entities,
             kg.num_relations, len(kg.train), len(kg.valid), len(kg.test))
    return kg


def write_triples(path: str | Path, kg: KnowledgeGraph, split: str = "train") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in kg.split(split).tolist():
            fh.write(f"{kg.entities[h]}\t{kg.relations[r]}\t{kg.entities[t]}\n")


# alignment


@dataclass
class AlignmentSet:
    """Aligned (G1, G2) entity pairs; the first ``num_seed`` rows are training seeds."""

    pairs: np.ndarray
    num_seed: int

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if not 0 <= self.num_seed <= len(self.pairs):
            raise ValueError("num_seed out of range")
        for col, side in ((0, "G1"), (1, "G2")):
            _, counts = np.unique(self.pairs[:, col], return_counts=True)
            if (counts > 1).any():
                raise ValueError(f"an entity of {side} appears in more than one pair")

    @property
    def seed(self) -> np.ndarray:
        return self.pairs[: self.num_seed]

    @property
    def test(self) -> np.ndarray:
        return self.pairs[self.num_seed:]

    @property
    def seed_ratio(self) -> float:
        return self.num_seed / len(self.pairs) if len(self.pairs) else 0.0


def split_alignment(pairs, seed_ratio: float, rng: np.random.Generator) -> AlignmentSet:
    if not 0.0 <= seed_ratio <= 1.0:
        raise ValueError(f"seed ratio must lie in [0, 1], got {seed_ratio}")
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    order = rng.permutation(len(pairs))
    return AlignmentSet(pairs[order], int(round(seed_ratio * len(pairs))))


def load_alignment(path: str | Path, kg1: KnowledgeGraph, kg2: KnowledgeGraph,
                   seed_ratio: float | None = None, rng: np.random.Generator | None = None
                   ) -> AlignmentSet:
    """Read ``e1<TAB>e2`` lines; split by ``seed_ratio`` when given (file order otherwise all seed)."""
    idx1, idx2 = kg1.entity_index, kg2.entity_index
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected e1<TAB>e2")
            try:
                pairs.append((idx1[parts[0]], idx2[parts[1]]))
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: unknown entity {exc.args[0]!r}") from None
    if seed_ratio is None:
        return AlignmentSet(pairs, len(pairs))
    return split_alignment(pairs, seed_ratio, rng or np.random.default_rng(0))


def write_alignment(path: str | Path, alignment: AlignmentSet, kg1: KnowledgeGraph,
                    kg2: KnowledgeGraph, part: str = "all") -> None:
    rows = {"all": alignment.pairs, "seed": alignment.seed, "test": alignment.test}[part]
    with open(path, "w", encoding="utf-8") as fh:
        for a, b in rows.tolist():
            fh.write(f"{kg1.entities[a]}\t{kg2.entities[b]}\n")


# modality features


class ModalityFeatureStore:
    """Dense per-entity features of one modality plus presence and statistics.

    ``mean``/``std`` are population statistics over the rows flagged present and
    are refreshed whenever ``matrix`` is reassigned.
    """

    def __init__(self, modality: str, matrix, present=None):
        if modality not in MODALITIES:
            raise ValueError(f"unknown modality {modality!r}")
        self.modality = modality
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise ValueError(f"feature matrix must be 2-D, got shape {matrix.shape}")
        self.present = (np.ones(len(matrix), dtype=bool) if present is None
                        else np.asarray(present, dtype=bool).copy())
        if self.present.shape != (len(matrix),):
            raise ValueError("presence mask length differs from row count")
        self.matrix = matrix

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    @matrix.setter
    def matrix(self, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if not np.isfinite(value).all():
            raise ValueError(f"non-finite values in {self.modality} features")
        self._matrix = value
        rows = value[self.present]
        if len(rows):
            self.mean = rows.mean(axis=0)
            self.std = rows.std(axis=0)
        else:
            self.mean = np.zeros(value.shape[1])
            self.std = np.zeros(value.shape[1])

    @property
    def num_rows(self) -> int:
        return self._matrix.shape[0]

    @property
    def dim(self) -> int:
        return self._matrix.shape[1]

    def copy(self) -> "ModalityFeatureStore":
        return ModalityFeatureStore(self.modality, self._matrix.copy(), self.present)

    def __repr__(self) -> str:
        return (f"ModalityFeatureStore({self.modality!r}, rows={self.num_rows}, "
                f"dim={self.dim}, present={int(self.present.sum())})")


def write_features(path: str | Path, store: ModalityFeatureStore) -> None:
    """Binary layout: MMFT, u32 rows, u32 dim, row-major little-endian float32.

    A ``MASK`` block with one byte per row follows when any row is absent.
    """
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", store.num_rows, store.dim))
        fh.write(store.matrix.astype("<f4").tobytes())
        if not store.present.all():
            fh.write(MASK_MAGIC)
            fh.write(store.present.astype(np.uint8).tobytes())


def load_features(path: str | Path, modality: str,
                  entities: Sequence[str] | Mapping[str, int] | int) -> ModalityFeatureStore:
    """Read a binary ``MMFT`` file or a CSV with the entity name in column 0.

    ``entities`` is the entity list (or name->id map, or just |E| for binary
    files). CSV rows not listed are flagged absent and zero-filled.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == FEATURE_MAGIC:
        return _load_binary(path, modality, entities)
    return _load_csv(path, modality, entities)


def _num_entities(entities) -> int:
    return entities if isinstance(entities, int) else len(entities)


def _load_binary(path: Path, modality: str, entities) -> ModalityFeatureStore:
    raw = path.read_bytes()
    rows, dim = struct.unpack_from("<II", raw, 4)
    expected = _num_entities(entities)
    if rows != expected:
        raise ValueError(f"{path}: {rows} rows but the graph has {expected} entities")
    end = 12 + rows * dim * 4
    if len(raw) < end:
        raise ValueError(f"{path}: truncated feature block")
    matrix = np.frombuffer(raw, dtype="<f4", count=rows * dim, offset=12).reshape(rows, dim)
    if np.isnan(matrix).any():
        raise ValueError(f"{path}: NaN in feature data")
    present = None
    if raw[end:end + 4] == MASK_MAGIC:
        present = np.frombuffer(raw, dtype=np.uint8, count=rows, offset=end + 4).astype(bool)
    return ModalityFeatureStore(modality, matrix.astype(np.float64), present)


def _load_csv(path: Path, modality: str, entities) -> ModalityFeatureStore:
    if isinstance(entities, int):
        raise ValueError("CSV features need the entity names")
    index = entities if isinstance(entities, Mapping) else {n: i for i, n in enumerate(entities)}
    listed: dict[int, list[float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            name, values = row[0], row[1:]
            if name not in index:
                raise ValueError(f"{path}:{lineno}: unknown entity {name!r}")
            vec = [float(v) for v in values]
            if any(np.isnan(vec)):
                raise ValueError(f"{path}:{lineno}: NaN in feature data")
            listed[index[name]] = vec
    if not listed:
        raise ValueError(f"{path}: no feature rows")
    dims = {len(v) for v in listed.values()}
    if len(dims) != 1:
        raise ValueError(f"{path}: rows have differing lengths {sorted(dims)}")
    matrix = np.zeros((len(index), dims.pop()))
    present = np.zeros(len(index), dtype=bool)
    for i, vec in listed.items():
        matrix[i] = vec
        present[i] = True
    return ModalityFeatureStore(modality, matrix, present)


# bag-of-words relation / attribute features


def _ranked(counts: Mapping[int, int]) -> dict[int, int]:
    order = sorted(counts, key=lambda k: (-counts[k], k))
    return {key: pos for pos, key in enumerate(order)}


def _bow(per_entity: list[dict[int, int]], rank: dict[int, int], dim: int,
         binary: bool) -> np.ndarray:
    out = np.zeros((len(per_entity), dim))
    for e, items in enumerate(per_entity):
        for key, n in items.items():
            pos = rank[key]
            if pos < dim:
                out[e, pos] = 1.0 if binary else float(n)
    return out


def build_bow_features(kg: KnowledgeGraph, attribute_triples: Iterable[Sequence],
                       d_r: int = 1000, d_a: int = 1000, swap_encoding: bool = False
                       ) -> tuple[ModalityFeatureStore, ModalityFeatureStore]:
    """Relation and attribute bag-of-words vectors.

    Items are ranked by corpus frequency (ties by id) and the k-th ranked item
    fills position k. Relations record counts over the entity's train triples
    (as head or tail), attributes record presence; ``swap_encoding`` flips that.
    Attribute triples are ``(entity_id, attribute_key, ...)``; values are ignored.
    """
    if d_r < 1 or d_a < 1:
        raise ValueError("BoW dimensions must be >= 1")
    n = kg.num_entities
    rel_counts: dict[int, int] = {}
    rel_per: list[dict[int, int]] = [dict() for _ in range(n)]
    for h, r, t in kg.train.tolist():
        rel_counts[r] = rel_counts.get(r, 0) + 1
        for e in (h, t):
            rel_per[e][r] = rel_per[e].get(r, 0) + 1
    attr_counts: dict = {}
    attr_per: list[dict] = [dict() for _ in range(n)]
    for row in attribute_triples:
        e, key = int(row[0]), row[1]
        attr_counts[key] = attr_counts.get(key, 0) + 1
        attr_per[e][key] = attr_per[e].get(key, 0) + 1
    rel_bow = _bow(rel_per, _ranked(rel_counts), d_r, binary=swap_encoding)
    attr_rank = {k: i for i, k in enumerate(sorted(attr_counts, key=lambda k: (-attr_counts[k], str(k))))}
    attr_bow = _bow(attr_per, attr_rank, d_a, binary=not swap_encoding)
    return ModalityFeatureStore("r", rel_bow), ModalityFeatureStore("a", attr_bow)


def load_attributes(path: str | Path, kg: KnowledgeGraph) -> list[tuple[int, str, str]]:
    """``entity<TAB>attribute[<TAB>value]`` lines; entities must exist in ``kg``."""
    index = kg.entity_index
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if not parts[0]:
                continue
            if len(parts) < 2 or parts[0] not in index:
                raise ValueError(f"{path}:{lineno}: malformed attribute line")
            out.append((index[parts[0]], parts[1], parts[2] if len(parts) > 2 else ""))
    return out


def write_attributes(path: str | Path, attrs, kg: KnowledgeGraph) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e, key, value in attrs:
            fh.write(f"{kg.entities[e]}\t{key}\t{value}\n")


# synthetic data


@dataclass
class SyntheticSpec:
    num_entities: int = 200
    num_relations: int = 8
    num_triples: int = 1000
    num_clusters: int = 10
    num_attributes: int = 30
    attributes_per_entity: int = 4
    visual_dim: int = 32
    surface_dim: int = 16
    img_ratio: float = 1.0
    seed_ratio: float = 0.3
    jitter: float = 0.0
    valid_ratio: float = 0.0
    test_ratio: float = 0.0
    cluster_scale: float = 1.0
    entity_scale: float = 0.5


@dataclass
class SyntheticDataset:
    kg1: KnowledgeGraph
    kg2: KnowledgeGraph
    alignment: AlignmentSet
    features1: dict[str, ModalityFeatureStore]
    features2: dict[str, ModalityFeatureStore]
    attributes1: list[tuple[int, str, str]]
    attributes2: list[tuple[int, str, str]]
    clusters: np.ndarray


def _presence(rng: np.random.Generator, n: int, ratio: float) -> np.ndarray:
    present = np.zeros(n, dtype=bool)
    present[rng.choice(n, size=int(round(ratio * n)), replace=False)] = True
    return present


def generate_synthetic(spec: SyntheticSpec, seed: int) -> SyntheticDataset:
    """Clustered toy MMKG and an isomorphic, id-permuted copy of it.

    Entities belong to latent clusters and each relation maps clusters to
    clusters, so visual/surface features (cluster centroid plus an entity-specific
    offset) carry information about plausible tails. Aligned pairs share features
    up to Gaussian jitter of scale ``spec.jitter``.
    """
    for name in ("img_ratio", "seed_ratio", "valid_ratio", "test_ratio"):
        value = getattr(spec, name)
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {value}")
    if spec.valid_ratio + spec.test_ratio >= 1.0:
        raise ValueError("valid_ratio + test_ratio must leave room for training triples")
    if spec.num_entities < 2 or spec.num_relations < 1:
        raise ValueError("need at least 2 entities and 1 relation")
    rng = np.random.default_rng(seed)
    n, c = spec.num_entities, max(1, min(spec.num_clusters, spec.num_entities))

    clusters = np.concatenate([np.arange(c), rng.integers(0, c, size=n - c)])
    rng.shuffle(clusters)
    members = [np.flatnonzero(clusters == k) for k in range(c)]
    cluster_map = rng.integers(0, c, size=(spec.num_relations, c))

    seen: set[tuple[int, int, int]] = set()
    triples = []
    attempts = 0
    while len(triples) < spec.num_triples and attempts < 20 * spec.num_triples:
        attempts += 1
        h = int(rng.integers(n))
        r = int(rng.integers(spec.num_relations))
        pool = members[cluster_map[r, clusters[h]]]
        t = int(pool[rng.integers(len(pool))])
        if (h, r, t) in seen:
            continue
        seen.add((h, r, t))
        triples.append((h, r, t))
    triples = np.array(triples, dtype=np.int64).reshape(-1, 3)
    order = rng.permutation(len(triples))
    n_valid = int(round(spec.valid_ratio * len(triples)))
    n_test = int(round(spec.test_ratio * len(triples)))
    valid = triples[order[:n_valid]]
    test = triples[order[n_valid:n_valid + n_test]]
    train = triples[order[n_valid + n_test:]]

    relations = [f"rel{j}" for j in range(spec.num_relations)]
    kg1 = KnowledgeGraph([f"a:{i}" for i in range(n)], relations, train, valid, test)

    def view(dim: int) -> np.ndarray:
        centroids = rng.normal(scale=spec.cluster_scale, size=(c, dim))
        return centroids[clusters] + rng.normal(scale=spec.entity_scale, size=(n, dim))

    visual = view(spec.visual_dim)
    surface = view(spec.surface_dim)

    attrs1 = []
    k_attr = min(spec.attributes_per_entity, spec.num_attributes)
    attr_pref = rng.dirichlet(np.ones(max(spec.num_attributes, 1)), size=c) if spec.num_attributes else None
    if k_attr:
        for e in range(n):
            keys = rng.choice(spec.num_attributes, size=k_attr, replace=False, p=attr_pref[clusters[e]])
            attrs1.extend((e, f"attr{int(k)}", "") for k in sorted(keys))

    perm = rng.permutation(n)  # G1 entity i is G2 entity perm[i]
    inv = np.argsort(perm)
    remap = lambda t: np.stack([perm[t[:, 0]], t[:, 1], perm[t[:, 2]]], axis=1) if len(t) else t
    kg2 = KnowledgeGraph([f"b:{j}" for j in range(n)], list(relations),
                         remap(train), remap(valid), remap(test))
    attrs2 = sorted((int(perm[e]), key, value) for e, key, value in attrs1)

    def jittered(x: np.ndarray) -> np.ndarray:
        moved = x[inv]
        if spec.jitter > 0:
            moved = moved + rng.normal(scale=spec.jitter, size=moved.shape)
        return moved

    present1 = _presence(rng, n, spec.img_ratio)
    present2 = _presence(rng, n, spec.img_ratio)
    feats1 = {"v": ModalityFeatureStore("v", np.where(present1[:, None], visual, 0.0), present1),
              "s": ModalityFeatureStore("s", surface)}
    visual2 = jittered(visual)
    feats2 = {"v": ModalityFeatureStore("v", np.where(present2[:, None], visual2, 0.0), present2),
              "s": ModalityFeatureStore("s", jittered(surface))}

    pairs = np.stack([np.arange(n), perm], axis=1)
    alignment = split_alignment(pairs, spec.seed_ratio, rng)
    return SyntheticDataset(kg1, kg2, alignment, feats1, feats2, attrs1, attrs2, clusters)
