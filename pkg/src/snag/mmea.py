"""Entity alignment head: joint embeddings, contrastive objectives and probation training."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .encoders import ModalityProjector, StructureEncoder, impute_missing
from .evaluation import RankResult, eval_ea, similarity_matrix
from .fusion import FusionWeights, fuse
from .gmnm import NoiseConfig, apply_dropout, noise_rng, sample_gmnm
from .graphdata import (
    AlignmentSet,
    KnowledgeGraph,
    ModalityFeatureStore,
    Vocab,
    build_bow_features,
)
from .kgc import TrainingDiverged
from .numkit import Tape, Tensor

EA_MODALITIES = ("g", "r", "a", "v", "s")
_LOG2 = math.log(2.0)


@dataclass
class MmeaConfig:
    dim: int = 300
    heads: int = 1
    ffn_dim: int | None = None
    gat_heads: int = 2
    gat_layers: int = 2
    modalities: tuple[str, ...] = EA_MODALITIES
    tau: float = 0.1
    normalize: bool = True
    batch_size: int = 3500
    lr: float = 5e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    warmup_frac: float = 0.15
    epochs: int = 500
    iterative_epochs: int = 500
    probe_every: int = 5
    promote_after: int = 10
    val_ratio: float = 0.0
    patience: int = 5
    eval_every: int = 10
    detach_confidence: bool = False
    losses: tuple[str, ...] = ("gmi", "ecia", "iir")
    d_r: int = 1000
    d_a: int = 1000
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        self.modalities = tuple(self.modalities)
        self.losses = tuple(self.losses)
        if "g" not in self.modalities:
            raise ValueError("the structure modality 'g' is required for alignment")
        unknown = set(self.losses) - {"gmi", "ecia", "iir"}
        if unknown or not self.losses:
            raise ValueError(f"losses must be a non-empty subset of gmi, ecia, iir; got {self.losses}")
        if not 0.0 <= self.val_ratio < 1.0:
            raise ValueError("val_ratio must lie in [0, 1)")
        if self.probe_every < 1 or self.promote_after < 1:
            raise ValueError("probe_every and promote_after must be positive")


# joint embedding and losses


class GmiWeights:
    """Global per-modality weights, softmax-normalized logits shared by both graphs."""

    def __init__(self, modalities):
        self.modalities = tuple(modalities)
        self.logits = nk.parameter(np.zeros(len(self.modalities)), name="gmi.logits")

    def parameters(self) -> dict[str, Tensor]:
        return {self.logits.name: self.logits}

    def weights(self) -> Tensor:
        return nk.softmax(self.logits)


def gmi_embed(h, weights) -> Tensor:
    """Concatenate ``w_m * h^m`` across modalities into one joint vector per entity."""
    if isinstance(weights, GmiWeights):
        weights = weights.weights()
    weights = nk.as_tensor(weights)
    if len(h) != weights.shape[0]:
        raise ValueError(f"gmi_embed: {len(h)} modality blocks but {weights.shape[0]} weights")
    return nk.concat([nk.as_tensor(block) * weights[m] for m, block in enumerate(h)], axis=-1)


def _pair_log_probs(a: Tensor, b: Tensor, tau: float) -> Tensor:
    """log p(a_i -> b_i) against in-batch negatives {b_j} u {a_j}, j != i."""
    n = a.shape[0]
    off_self = np.where(np.eye(n, dtype=bool), -1e30, 0.0)
    cross = (a @ nk.transpose(b)) / tau
    own = (a @ nk.transpose(a)) / tau + off_self
    logits = nk.concat([cross, own], axis=-1)
    positive = nk.tsum(cross * np.eye(n), axis=-1)
    return positive - nk.logsumexp(logits, axis=-1)


def contrastive_loss(emb1, emb2, tau: float = 0.1, normalize: bool = True, phi=None) -> Tensor:
    """Bidirectional in-batch alignment loss over row-aligned pairs ``(emb1[i], emb2[i])``.

    Returns ``-mean_i log(phi_i * (p(1->2) + p(2->1)) / 2)``; ``phi`` defaults to 1.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    a, b = nk.as_tensor(emb1), nk.as_tensor(emb2)
    if a.shape != b.shape:
        raise ValueError(f"contrastive_loss: embedding shapes differ {a.shape} vs {b.shape}")
    if normalize:
        a, b = nk.normalize(a), nk.normalize(b)
    both = nk.stack([_pair_log_probs(a, b, tau), _pair_log_probs(b, a, tau)], axis=-1)
    log_mix = nk.logsumexp(both, axis=-1) - _LOG2
    if phi is not None:
        log_mix = log_mix + nk.log(phi)
    return -nk.mean(log_mix)


def pair_confidence(conf1, conf2) -> Tensor:
    """Elementwise minimum of the two entities' confidences."""
    return nk.minimum(conf1, conf2)


def ecia_loss(h1, h2, conf1, conf2, tau: float = 0.1, normalize: bool = True,
              detach: bool = False) -> Tensor:
    """Sum over modalities of the contrastive loss scaled inside the log by min confidence.

    ``h1``/``h2`` are lists of B x d blocks; ``conf1``/``conf2`` are B x |M|.
    """
    conf1, conf2 = nk.as_tensor(conf1), nk.as_tensor(conf2)
    if detach:
        conf1, conf2 = conf1.detach(), conf2.detach()
    phi = pair_confidence(conf1, conf2)
    total = None
    for m, (a, b) in enumerate(zip(h1, h2)):
        term = contrastive_loss(a, b, tau, normalize, phi[:, m])
        total = term if total is None else total + term
    return total


def iir_loss(hbar1, hbar2, tau: float = 0.1, normalize: bool = True) -> Tensor:
    """Sum over modalities of the contrastive loss on fused outputs (B x |M| x d each)."""
    hbar1, hbar2 = nk.as_tensor(hbar1), nk.as_tensor(hbar2)
    total = None
    for m in range(hbar1.shape[1]):
        term = contrastive_loss(hbar1[:, m, :], hbar2[:, m, :], tau, normalize)
        total = term if total is None else total + term
    return total


# data


@dataclass
class AlignmentProblem:
    """Two graphs merged into one id space: KG1 entities first, then KG2."""

    n1: int
    n2: int
    adjacency: np.ndarray
    stores: dict[str, ModalityFeatureStore]
    alignment: AlignmentSet

    @property
    def size(self) -> int:
        return self.n1 + self.n2


def union_graph(kg1: KnowledgeGraph, kg2: KnowledgeGraph) -> KnowledgeGraph:
    """Disjoint union with relations merged by name."""
    rels = Vocab(kg1.relations)
    remap = np.array([rels.add(r) for r in kg2.relations], dtype=np.int64)
    n1 = kg1.num_entities
    shifted = kg2.train.copy()
    if len(shifted):
        shifted[:, 0] += n1
        shifted[:, 2] += n1
        shifted[:, 1] = remap[shifted[:, 1]]
    entities = [f"1\t{e}" for e in kg1.entities] + [f"2\t{e}" for e in kg2.entities]
    return KnowledgeGraph(entities, list(rels.names), np.concatenate([kg1.train, shifted]))


def _stack_stores(m: str, s1: ModalityFeatureStore, s2: ModalityFeatureStore) -> ModalityFeatureStore:
    if s1.dim != s2.dim:
        raise ValueError(f"modality {m!r} has dim {s1.dim} in KG1 but {s2.dim} in KG2")
    return ModalityFeatureStore(m, np.concatenate([s1.matrix, s2.matrix]),
                                np.concatenate([s1.present, s2.present]))


def alignment_problem(kg1: KnowledgeGraph, kg2: KnowledgeGraph, alignment: AlignmentSet,
                      features1: dict[str, ModalityFeatureStore],
                      features2: dict[str, ModalityFeatureStore],
                      attributes1=(), attributes2=(), d_r: int = 1000, d_a: int = 1000,
                      modalities=EA_MODALITIES, seed: int = 0) -> AlignmentProblem:
    """Merge both graphs, build relation/attribute bag-of-words and impute absent rows."""
    if set(features1) != set(features2):
        raise ValueError(f"modality sets differ between graphs: {sorted(features1)} vs "
                         f"{sorted(features2)}")
    union = union_graph(kg1, kg2)
    n1 = kg1.num_entities
    stores: dict[str, ModalityFeatureStore] = {}
    if "r" in modalities or "a" in modalities:
        attrs = list(attributes1) + [(e + n1, k, v) for e, k, v in attributes2]
        stores["r"], stores["a"] = build_bow_features(union, attrs, d_r, d_a)
    for m in modalities:
        if m in ("g", "r", "a"):
            continue
        if m not in features1:
            raise ValueError(f"no features for modality {m!r}")
        stores[m] = _stack_stores(m, features1[m], features2[m])
    stores = {m: stores[m] for m in modalities if m != "g"}
    for m, store in stores.items():
        if not store.present.all():
            stores[m] = impute_missing(store, seed)
    return AlignmentProblem(n1, kg2.num_entities, union.dense_adjacency(), stores, alignment)


# model


class MmeaModel:
    def __init__(self, problem: AlignmentProblem, cfg: MmeaConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.problem = problem
        self.modalities = cfg.modalities
        self.features = {m: problem.stores[m].matrix for m in self.modalities[1:]}
        self.stats = {m: (problem.stores[m].mean, problem.stores[m].std) for m in self.modalities[1:]}
        self.structure = StructureEncoder(problem.size, cfg.dim, "mmea", rng, heads=cfg.gat_heads,
                                          layers=cfg.gat_layers)
        self.projectors = {m: ModalityProjector(self.features[m].shape[1], cfg.dim, rng, name=f"fc_{m}")
                           for m in self.modalities[1:]}
        self.fusion = FusionWeights(cfg.dim, cfg.heads, rng, cfg.ffn_dim)
        self.gmi = GmiWeights(self.modalities)
        self._noise: dict[str, object] = {}

    def parameters(self) -> dict[str, Tensor]:
        params = dict(self.structure.parameters())
        for proj in self.projectors.values():
            params.update(proj.parameters())
        params.update(self.fusion.parameters())
        params.update(self.gmi.parameters())
        return params

    def begin_epoch(self, noise: NoiseConfig, seed: int, epoch: int) -> None:
        self._noise = {}
        for m in self.modalities:
            if not noise.applies_to(m):
                continue
            rng = noise_rng(seed, epoch, m)
            x = self.structure.table.data if m == "g" else self.features[m]
            if noise.mode == "dropout":
                mult = apply_dropout(np.ones_like(x), noise.dropout, rng, noise.dropout_rescale)
                offset = np.zeros_like(x)
            else:
                mean, std = (x.mean(0), x.std(0)) if m == "g" else self.stats[m]
                scale, offset = sample_gmnm(len(x), mean, std, noise.rho, noise.epsilon, rng)
                mult = scale[:, None]
            self._noise[m] = (mult, offset) if m == "g" else mult * x + offset

    def end_epoch(self) -> None:
        self._noise = {}

    def modality_embeddings(self, ids: np.ndarray) -> list[Tensor]:
        """h^m for the given (joint) entity ids; structure runs the GAT over the whole graph."""
        x = self.structure.table
        if "g" in self._noise:
            mult, offset = self._noise["g"]
            x = x * mult + offset
        h_g = self.structure(x, self.problem.adjacency)
        out = [nk.gather(h_g, ids)]
        for m in self.modalities[1:]:
            feats = self._noise.get(m, self.features[m])[ids]
            out.append(self.projectors[m](feats))
        return out

    def joint(self, h: list[Tensor]) -> Tensor:
        blocks = [nk.normalize(b) for b in h] if self.cfg.normalize else h
        return gmi_embed(blocks, self.gmi)

    def losses(self, pairs: np.ndarray) -> dict[str, Tensor]:
        b = len(pairs)
        ids = np.concatenate([pairs[:, 0], pairs[:, 1] + self.problem.n1])
        h = self.modality_embeddings(ids)
        cfg = self.cfg
        out: dict[str, Tensor] = {}
        if "gmi" in cfg.losses:
            joint = self.joint(h)
            out["gmi"] = contrastive_loss(joint[:b], joint[b:], cfg.tau, cfg.normalize)
        if "ecia" in cfg.losses or "iir" in cfg.losses:
            fused = fuse(nk.stack(h, axis=1), self.fusion)
            if "ecia" in cfg.losses:
                out["ecia"] = ecia_loss([x[:b] for x in h], [x[b:] for x in h],
                                        fused.confidence[:b], fused.confidence[b:], cfg.tau,
                                        cfg.normalize, cfg.detach_confidence)
            if "iir" in cfg.losses:
                out["iir"] = iir_loss(fused.hidden[:b], fused.hidden[b:], cfg.tau, cfg.normalize)
        return out

    def embeddings(self) -> tuple[np.ndarray, np.ndarray]:
        """Joint inference embeddings (noise-free) for KG1 and KG2 entities."""
        ids = np.arange(self.problem.size)
        joint = self.joint(self.modality_embeddings(ids)).data
        return joint[:self.problem.n1], joint[self.problem.n1:]


# probation


@dataclass
class ProbationCache:
    """Candidate pairs and how many consecutive checks each has stayed mutual nearest neighbours."""

    probe_every: int = 5
    promote_after: int = 10
    counters: dict[tuple[int, int], int] = field(default_factory=dict)
    promoted: list[tuple[int, int]] = field(default_factory=list)
    audit: list[tuple[int, int, int]] = field(default_factory=list)

    def promoted_entities(self) -> tuple[set[int], set[int]]:
        return {a for a, _ in self.promoted}, {b for _, b in self.promoted}


def mutual_nearest(emb1: np.ndarray, emb2: np.ndarray, left: np.ndarray, right: np.ndarray,
                   normalize: bool = True) -> list[tuple[int, int]]:
    """Mutual nearest-neighbour pairs between ``left`` KG1 ids and ``right`` KG2 ids."""
    if not len(left) or not len(right):
        return []
    sim = similarity_matrix(emb1[left], emb2[right], normalize)
    best_right = sim.argmax(axis=1)
    best_left = sim.argmax(axis=0)
    return [(int(left[i]), int(right[j])) for i, j in enumerate(best_right) if best_left[j] == i]


def update_probation(cache: ProbationCache, mutual, epoch: int) -> list[tuple[int, int]]:
    """Advance the cache with this check's mutual pairs; return the newly promoted pairs.

    Mutual pairs enter or increment; cached pairs missing from ``mutual`` are dropped
    (their streak restarts from zero if seen again); a streak of ``promote_after``
    promotes the pair.
    """
    done1, done2 = cache.promoted_entities()
    mutual = {(a, b) for a, b in mutual if a not in done1 and b not in done2}
    cache.counters = {p: c for p, c in cache.counters.items() if p in mutual}
    newly = []
    for pair in sorted(mutual):
        count = cache.counters.get(pair, 0) + 1
        if count >= cache.promote_after:
            cache.counters.pop(pair, None)
            cache.promoted.append(pair)
            cache.audit.append((epoch, *pair))
            newly.append(pair)
        else:
            cache.counters[pair] = count
    return newly


def probe_and_promote(cache: ProbationCache, emb1: np.ndarray, emb2: np.ndarray, epoch: int,
                      left: np.ndarray, right: np.ndarray, normalize: bool = True) -> list[tuple[int, int]]:
    """One probation check over the not-yet-promoted ``left``/``right`` candidates."""
    if epoch % cache.probe_every:
        raise ValueError(f"probation checks run every {cache.probe_every} epochs, not at {epoch}")
    done1, done2 = cache.promoted_entities()
    left = np.array([e for e in left if e not in done1], dtype=np.int64)
    right = np.array([e for e in right if e not in done2], dtype=np.int64)
    return update_probation(cache, mutual_nearest(emb1, emb2, left, right, normalize), epoch)


# training

TRACE_COLUMNS = ("epoch", "loss", "gmi", "ecia", "iir", "valid_hits1", "test_hits1", "test_mrr",
                 "promoted")


@dataclass
class MmeaTrace:
    rows: list[dict] = field(default_factory=list)

    def column(self, name: str) -> list:
        return [row[name] for row in self.rows]


def _split_validation(seed_pairs: np.ndarray, ratio: float, rng: np.random.Generator):
    if ratio <= 0:
        return seed_pairs, seed_pairs[:0]
    order = rng.permutation(len(seed_pairs))
    n_val = max(1, int(round(ratio * len(seed_pairs))))
    return seed_pairs[order[n_val:]], seed_pairs[order[:n_val]]


def evaluate_alignment(model: MmeaModel, pairs: np.ndarray) -> RankResult:
    emb1, emb2 = model.embeddings()
    return eval_ea(emb1, emb2, pairs, normalize=model.cfg.normalize)


def train_mmea(problem: AlignmentProblem, cfg: MmeaConfig, seed: int, iterative: bool = False,
               log=None) -> tuple[MmeaModel, MmeaTrace, ProbationCache]:
    """Optimize the summed alignment objectives; optionally grow the seeds by probation."""
    model = MmeaModel(problem, cfg, np.random.default_rng([seed, 0]))
    named = model.parameters()
    params = list(named.values())
    opt = nk.Adam(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay, decoupled=True)
    sampler = np.random.default_rng([seed, 1])
    train_pairs, val_pairs = _split_validation(problem.alignment.seed, cfg.val_ratio, sampler)
    test_pairs = problem.alignment.test
    if not len(train_pairs):
        raise ValueError("no seed alignment pairs to train on")
    cache = ProbationCache(cfg.probe_every, cfg.promote_after)
    total_epochs = cfg.epochs + (cfg.iterative_epochs if iterative else 0)
    steps_per_epoch = lambda n: max(1, math.ceil(n / cfg.batch_size))
    total_steps = total_epochs * steps_per_epoch(len(train_pairs))
    step = 0
    best, best_state, stale = -1.0, None, 0
    trace = MmeaTrace()
    for epoch in range(total_epochs):
        pool = train_pairs
        if cache.promoted:
            pool = np.concatenate([train_pairs, np.array(cache.promoted, dtype=np.int64)])
        model.begin_epoch(cfg.noise, seed, epoch)
        order = sampler.permutation(len(pool))
        sums = {"loss": 0.0, "gmi": 0.0, "ecia": 0.0, "iir": 0.0}
        for start in range(0, len(order), cfg.batch_size):
            batch = pool[order[start:start + cfg.batch_size]]
            opt.zero_grad()
            with Tape() as tape:
                parts = model.losses(batch)
                loss = _total(parts)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"alignment loss became {value} at epoch {epoch}")
            tape.backward(loss, params)
            opt.step(lr=nk.cosine_warmup_lr(min(step, total_steps - 1), total_steps, cfg.lr,
                                            cfg.warmup_frac))
            step += 1
            weight = len(batch) / len(pool)
            sums["loss"] += value * weight
            for name, part in parts.items():
                sums[name] += part.item() * weight
        model.end_epoch()

        row = dict(epoch=epoch, **sums, valid_hits1=float("nan"), test_hits1=float("nan"),
                   test_mrr=float("nan"), promoted=len(cache.promoted))
        if iterative and epoch >= cfg.epochs and (epoch - cfg.epochs) % cfg.probe_every == 0:
            emb1, emb2 = model.embeddings()
            probe_and_promote(cache, emb1, emb2, epoch - cfg.epochs, test_pairs[:, 0], test_pairs[:, 1],
                              cfg.normalize)
            row["promoted"] = len(cache.promoted)
        last = epoch + 1 == total_epochs
        if (epoch + 1) % cfg.eval_every == 0 or last:
            if len(test_pairs):
                res = evaluate_alignment(model, test_pairs)
                row["test_hits1"], row["test_mrr"] = res.hits(1), res.mrr
            if len(val_pairs):
                row["valid_hits1"] = evaluate_alignment(model, val_pairs).hits(1)
                if row["valid_hits1"] > best:
                    best, stale = row["valid_hits1"], 0
                    best_state = {k: p.data.copy() for k, p in named.items()}
                else:
                    stale += 1
        trace.rows.append(row)
        if log is not None:
            log(row)
        if len(val_pairs) and stale >= cfg.patience:
            break
    if best_state is not None:
        for k, p in named.items():
            p.data[...] = best_state[k]
    return model, trace, cache


def _total(parts: dict[str, Tensor]) -> Tensor:
    total = None
    for part in parts.values():
        total = part if total is None else total + part
    return total
