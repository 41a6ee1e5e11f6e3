"""Knowledge-graph completion head: rotation scoring over fused entity representations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .encoders import ModalityProjector, RelationEmbedding, StructureEncoder, impute_missing
from .fusion import FusionWeights, VariantParams, fuse, fuse_variant
from .gmnm import NoiseConfig, apply_dropout, noise_rng, sample_gmnm
from .graphdata import KnowledgeGraph, ModalityFeatureStore
from .numkit import Tape, Tensor

ENTITY_MODES = ("structure_fused", "mean_fused")
KGC_VARIANTS = ("transformer", "FC", "WS", "AT", "TS", "only_g")
ADVERSARIAL = ("hard", "distance")


def _kgc_noise() -> NoiseConfig:
    return NoiseConfig(modalities=("v", "s"))


@dataclass
class KgcConfig:
    dim: int = 256
    heads: int = 2
    ffn_dim: int | None = None
    margin: float = 12.0
    negatives: int = 32
    temperature: float = 2.0
    batch_size: int = 1024
    lr: float = 1e-4
    epochs: int = 200
    entity_mode: str = "structure_fused"
    variant: str = "transformer"
    norm: str = "l1"
    modalities: tuple[str, ...] = ("g", "v", "s")
    detach_adversarial: bool = True
    adversarial: str = "hard"
    eval_every: int = 10
    noise: NoiseConfig = field(default_factory=_kgc_noise)

    def __post_init__(self):
        if self.negatives < 1:
            raise ValueError("negatives must be at least 1")
        if self.margin <= 0 or self.temperature <= 0:
            raise ValueError("margin and temperature must be positive")
        if self.dim % 2:
            raise ValueError(f"entity dimension must be even, got {self.dim}")
        if self.entity_mode not in ENTITY_MODES:
            raise ValueError(f"unknown entity mode {self.entity_mode!r}")
        if self.variant not in KGC_VARIANTS:
            raise ValueError(f"unknown fusion variant {self.variant!r}")
        if self.norm not in ("l1", "l2"):
            raise ValueError(f"norm must be 'l1' or 'l2', got {self.norm!r}")
        if self.adversarial not in ADVERSARIAL:
            raise ValueError(f"unknown adversarial emphasis {self.adversarial!r}")
        self.modalities = tuple(self.modalities)
        if "g" not in self.modalities:
            raise ValueError("the structure modality 'g' is required for completion")


# scoring and loss


def rotate_score(head, phase, tail, norm: str = "l1") -> Tensor:
    """||head o e^{i phase} - tail|| over the last axis, entities as (real | imag) halves."""
    head, phase, tail = nk.as_tensor(head), nk.as_tensor(phase), nk.as_tensor(tail)
    d = head.shape[-1]
    if d % 2:
        raise ValueError(f"rotate_score needs an even entity dimension, got {d}")
    half = d // 2
    re_h, im_h = head[..., :half], head[..., half:]
    re_t, im_t = tail[..., :half], tail[..., half:]
    c, s = nk.cos(phase), nk.sin(phase)
    re = re_h * c - im_h * s - re_t
    im = re_h * s + im_h * c - im_t
    if norm == "l1":
        return nk.tsum(nk.modulus(re, im), axis=-1)
    return nk.l2_norm(nk.concat([re, im], axis=-1), axis=-1)


def adversarial_weights(neg_scores, temperature: float, detach: bool = True,
                        emphasis: str = "hard") -> Tensor:
    """Softmax weights over each row of negative distances.

    ``"hard"`` favours the most plausible (smallest-distance) negatives,
    softmax(-t * F); ``"distance"`` is softmax(+t * F), favouring the far ones.
    """
    if emphasis not in ADVERSARIAL:
        raise ValueError(f"unknown adversarial emphasis {emphasis!r}")
    neg_scores = nk.as_tensor(neg_scores)
    if detach:
        neg_scores = neg_scores.detach()
    sign = -1.0 if emphasis == "hard" else 1.0
    return nk.softmax(neg_scores * (sign * temperature), axis=-1)


def kgc_loss(pos_scores, neg_scores, margin: float = 12.0, temperature: float = 2.0,
             detach: bool = True, emphasis: str = "hard") -> Tensor:
    """Sigmoid margin loss with self-adversarial negative weights, averaged over triples.

    ``pos_scores`` has shape (B,) and ``neg_scores`` (B, K).
    """
    pos, neg = nk.as_tensor(pos_scores), nk.as_tensor(neg_scores)
    if pos.ndim == 0:
        pos, neg = pos.reshape(1), neg.reshape(1, -1)
    upsilon = adversarial_weights(neg, temperature, detach, emphasis)
    pos_term = -nk.log_sigmoid(margin - pos)
    neg_term = -nk.tsum(upsilon * nk.log_sigmoid(neg - margin), axis=-1)
    return nk.mean(pos_term + neg_term)


def _triple_keys(triples: np.ndarray, num_entities: int, num_relations: int) -> np.ndarray:
    t = np.asarray(triples, dtype=np.int64)
    return (t[..., 0] * num_relations + t[..., 1]) * num_entities + t[..., 2]


def sample_negatives(triples, k: int, num_entities: int, rng: np.random.Generator,
                     known: np.ndarray | None = None, num_relations: int | None = None,
                     max_rounds: int = 10) -> np.ndarray:
    """B x K x 3 corruptions of ``triples``.

    Each negative replaces the head or the tail (fair coin) by a different,
    uniformly drawn entity. Draws hitting a ``known`` triple are redrawn up to
    ``max_rounds`` times and then kept.
    """
    if num_entities < 2:
        raise ValueError("negative sampling needs at least two entities")
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    b = len(triples)
    out = np.repeat(triples[:, None, :], k, axis=1)
    corrupt_head = rng.random((b, k)) < 0.5
    col = np.where(corrupt_head, 0, 2)

    def draw(mask):
        original = np.take_along_axis(out, col[..., None], axis=2)[..., 0][mask]
        repl = rng.integers(0, num_entities - 1, size=int(mask.sum()))
        repl += repl >= original
        rows, negs = np.nonzero(mask)
        out[rows, negs, col[mask]] = repl

    # reset the corrupted slot to the positive's entity before each redraw
    draw(np.ones((b, k), dtype=bool))
    if known is None or not len(known):
        return out
    num_relations = num_relations or int(np.max(known[:, 1])) + 1
    known_keys = np.unique(_triple_keys(known, num_entities, num_relations))
    for _ in range(max_rounds):
        clash = np.isin(_triple_keys(out, num_entities, num_relations), known_keys)
        if not clash.any():
            break
        rows, negs = np.nonzero(clash)
        out[rows, negs, col[clash]] = triples[rows, col[clash]]
        draw(clash)
    return out


# model


class KgcModel:
    """Structure table + frozen modality features -> fused entity vectors -> rotation scores."""

    def __init__(self, kg: KnowledgeGraph, stores: dict[str, ModalityFeatureStore], cfg: KgcConfig,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.norm = cfg.norm
        self.num_entities = kg.num_entities
        self.num_relations = kg.num_relations
        self.modalities = cfg.modalities if cfg.variant != "only_g" else ("g",)
        self.features: dict[str, np.ndarray] = {}
        self.stats: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for m in self.modalities[1:]:
            if m not in stores:
                raise ValueError(f"no feature store for modality {m!r}")
            store = stores[m]
            if store.num_rows != kg.num_entities:
                raise ValueError(f"modality {m!r} has {store.num_rows} rows but the graph has "
                                 f"{kg.num_entities} entities")
            self.features[m] = store.matrix
            self.stats[m] = (store.mean, store.std)

        self.structure = StructureEncoder(kg.num_entities, cfg.dim, "kgc", rng)
        self.projectors = {m: ModalityProjector(self.features[m].shape[1], cfg.dim, rng, name=f"fc_{m}")
                           for m in self.modalities[1:]}
        self.relations = RelationEmbedding(kg.num_relations, cfg.dim, rng)
        self.fusion = None
        self.variant = None
        if cfg.variant == "transformer":
            self.fusion = FusionWeights(cfg.dim, cfg.heads, rng, cfg.ffn_dim)
        elif cfg.variant != "only_g":
            self.variant = VariantParams(cfg.variant, len(self.modalities), cfg.dim, rng,
                                         heads=cfg.heads, ffn_dim=cfg.ffn_dim)
        self._noise: dict[str, tuple] = {}

    def parameters(self) -> dict[str, Tensor]:
        params = dict(self.structure.parameters())
        for proj in self.projectors.values():
            params.update(proj.parameters())
        params.update(self.relations.parameters())
        if self.fusion is not None:
            params.update(self.fusion.parameters())
        if self.variant is not None:
            params.update(self.variant.parameters())
        return params

    # noise is drawn once per epoch and replayed on every batch of that epoch

    def begin_epoch(self, noise: NoiseConfig, seed: int, epoch: int) -> None:
        self._noise = {}
        for m in self.modalities:
            if not noise.applies_to(m):
                continue
            rng = noise_rng(seed, epoch, m)
            if m == "g":
                x = self.structure.table.data
                if noise.mode == "dropout":
                    mult = apply_dropout(np.ones_like(x), noise.dropout, rng, noise.dropout_rescale)
                    self._noise[m] = (mult, np.zeros_like(x))
                else:
                    scale, offset = sample_gmnm(len(x), x.mean(0), x.std(0), noise.rho,
                                                noise.epsilon, rng)
                    self._noise[m] = (scale[:, None], offset)
            else:
                x = self.features[m]
                if noise.mode == "dropout":
                    noisy = apply_dropout(x, noise.dropout, rng, noise.dropout_rescale)
                else:
                    mean, std = self.stats[m]
                    scale, offset = sample_gmnm(len(x), mean, std, noise.rho, noise.epsilon, rng)
                    noisy = scale[:, None] * x + offset
                self._noise[m] = noisy

    def end_epoch(self) -> None:
        self._noise = {}

    def modality_embeddings(self, ids: np.ndarray) -> list[Tensor]:
        """h^m for the given entities, one |ids| x d tensor per modality."""
        x = nk.gather(self.structure.table, ids)
        if "g" in self._noise:
            mult, offset = self._noise["g"]
            x = x * mult[ids] + offset[ids]
        out = [self.structure.fc(x)]
        for m in self.modalities[1:]:
            feats = self._noise.get(m, self.features[m])[ids]
            out.append(self.projectors[m](feats))
        return out

    def represent(self, ids: np.ndarray) -> Tensor:
        """Entity vectors used by the scorer."""
        h = self.modality_embeddings(ids)
        if self.cfg.variant == "only_g":
            return h[0]
        stacked = nk.stack(h, axis=1)           # B x M x d
        if self.variant is not None:
            return fuse_variant(stacked, self.cfg.variant, self.variant)
        hidden = fuse(stacked, self.fusion).hidden
        if self.cfg.entity_mode == "structure_fused":
            return hidden[:, 0, :]
        return nk.mean(hidden, axis=1)

    def entity_matrix(self, chunk: int = 4096) -> np.ndarray:
        ids = np.arange(self.num_entities)
        return np.concatenate([self.represent(ids[i:i + chunk]).data
                               for i in range(0, len(ids), chunk)], axis=0)

    def phase_matrix(self) -> np.ndarray:
        return self.relations.phases.data.copy()

    def batch_loss(self, pos: np.ndarray, neg: np.ndarray) -> Tensor:
        ids, inverse = np.unique(np.concatenate([pos[:, [0, 2]].ravel(), neg[..., [0, 2]].ravel()]),
                                 return_inverse=True)
        reps = self.represent(ids)
        b, k = neg.shape[:2]
        pos_idx = inverse[:2 * b].reshape(b, 2)
        neg_idx = inverse[2 * b:].reshape(b, k, 2)
        phases = self.relations.phases
        pos_score = rotate_score(nk.gather(reps, pos_idx[:, 0]), nk.gather(phases, pos[:, 1]),
                                 nk.gather(reps, pos_idx[:, 1]), self.norm)
        flat = neg_idx.reshape(-1, 2)
        neg_score = rotate_score(nk.gather(reps, flat[:, 0]), nk.gather(phases, neg[..., 1].ravel()),
                                 nk.gather(reps, flat[:, 1]), self.norm).reshape(b, k)
        return kgc_loss(pos_score, neg_score, self.cfg.margin, self.cfg.temperature,
                        self.cfg.detach_adversarial, self.cfg.adversarial)


# training


@dataclass
class KgcTrace:
    epoch: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    valid_mrr: list[float] = field(default_factory=list)

    def rows(self):
        return zip(self.epoch, self.loss, self.valid_mrr)


class TrainingDiverged(RuntimeError):
    pass


def prepare_stores(stores: dict[str, ModalityFeatureStore], seed: int) -> dict[str, ModalityFeatureStore]:
    """Impute absent rows once, before training."""
    return {m: impute_missing(s, seed) if not s.present.all() else s for m, s in stores.items()}


def train_kgc(kg: KnowledgeGraph, stores: dict[str, ModalityFeatureStore], cfg: KgcConfig,
              seed: int, log=None) -> tuple[KgcModel, KgcTrace]:
    """Fit a completion model; returns the model and per-epoch loss / validation MRR."""
    from .evaluation import eval_kgc

    if not len(kg.train):
        raise ValueError("the training split is empty")
    stores = prepare_stores(stores, seed)
    model = KgcModel(kg, stores, cfg, np.random.default_rng([seed, 0]))
    params = list(model.parameters().values())
    opt = nk.Adam(params, lr=cfg.lr)
    sampler = np.random.default_rng([seed, 1])
    known = kg.train
    trace = KgcTrace()
    has_valid = len(kg.valid) > 0
    for epoch in range(cfg.epochs):
        model.begin_epoch(cfg.noise, seed, epoch)
        order = sampler.permutation(len(kg.train))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            pos = kg.train[order[start:start + cfg.batch_size]]
            neg = sample_negatives(pos, cfg.negatives, kg.num_entities, sampler, known,
                                   kg.num_relations)
            opt.zero_grad()
            with Tape() as tape:
                loss = model.batch_loss(pos, neg)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch}, batch starting at "
                                       f"{start}; try a smaller learning rate")
            tape.backward(loss, params)
            opt.step()
            total += value * len(pos)
            count += len(pos)
        model.end_epoch()
        mrr = float("nan")
        if has_valid and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
            mrr = eval_kgc(model, kg, "valid").mrr
        trace.epoch.append(epoch)
        trace.loss.append(total / count)
        trace.valid_mrr.append(mrr)
        if log is not None:
            log(epoch, total / count, mrr)
    return model, trace
