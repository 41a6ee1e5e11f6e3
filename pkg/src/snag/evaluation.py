"""Rank-based metrics (MRR, Hits@N) for completion and alignment."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graphdata import KnowledgeGraph

HITS = (1, 3, 10)


@dataclass
class RankResult:
    ranks: np.ndarray
    directions: np.ndarray | None = None
    hits_at: tuple[int, ...] = HITS
    metrics: dict[str, float] = field(init=False)

    def __post_init__(self):
        self.ranks = np.asarray(self.ranks, dtype=np.float64)
        if len(self.ranks) and self.ranks.min() < 1:
            raise ValueError("ranks are 1-based")
        self.metrics = {"mrr": self.mrr}
        self.metrics.update({f"hits@{n}": self.hits(n) for n in self.hits_at})

    @property
    def mrr(self) -> float:
        return float(np.mean(1.0 / self.ranks)) if len(self.ranks) else 0.0

    def hits(self, n: int) -> float:
        return float(np.mean(self.ranks <= n)) if len(self.ranks) else 0.0

    def table(self) -> str:
        keys = list(self.metrics)
        head = "  ".join(f"{k:>8}" for k in keys)
        row = "  ".join(f"{self.metrics[k]:8.4f}" for k in keys)
        return f"{head}\n{row}"


def tie_aware_rank(better: np.ndarray, ties: np.ndarray) -> np.ndarray:
    """Rank of the target when tied candidates (``ties`` includes the target) share the mean slot."""
    return better + (ties + 1) / 2.0


def brute_force_oracle(scores, targets, lower_is_better: bool = True, exclude=None) -> np.ndarray:
    """Reference ranks by fully sorting every row's surviving candidates.

    ``scores`` is Q x C, ``targets`` the correct column per row and ``exclude``
    an optional per-row collection of columns to drop before ranking (the
    target itself is never dropped). Tied groups share their mean position.
    """
    scores = np.asarray(scores, dtype=np.float64)
    ranks = []
    for q, target in enumerate(np.asarray(targets).tolist()):
        dropped = set() if exclude is None else set(exclude[q]) - {target}
        cands = [(float(s) if lower_is_better else -float(s), c)
                 for c, s in enumerate(scores[q].tolist()) if c not in dropped]
        cands.sort()
        key = dict((c, k) for k, c in cands)[target]
        positions = [pos for pos, (k, _) in enumerate(cands, 1) if k == key]
        ranks.append(sum(positions) / len(positions))
    return np.array(ranks)


# completion


def rotate_distances(anchor: np.ndarray, phase: np.ndarray, candidates: np.ndarray,
                     side: str, norm: str = "l1") -> np.ndarray:
    """Distances for all candidates of one query; ``side`` is the predicted slot.

    For ``side="tail"`` the score of candidate e is ||anchor o r - e||, for
    ``side="head"`` it is ||e o r - anchor||.
    """
    half = anchor.shape[-1] // 2
    cr, ci = np.cos(phase), np.sin(phase)
    if side == "tail":
        re = anchor[:half] * cr - anchor[half:] * ci - candidates[:, :half]
        im = anchor[:half] * ci + anchor[half:] * cr - candidates[:, half:]
    else:
        re = candidates[:, :half] * cr - candidates[:, half:] * ci - anchor[:half]
        im = candidates[:, :half] * ci + candidates[:, half:] * cr - anchor[half:]
    mod = np.hypot(re, im)
    return mod.sum(axis=-1) if norm == "l1" else np.sqrt((mod ** 2).sum(axis=-1))


def known_index(triples: np.ndarray) -> tuple[dict, dict]:
    """Maps (h, r) -> set of tails and (r, t) -> set of heads."""
    tails: dict[tuple[int, int], set[int]] = {}
    heads: dict[tuple[int, int], set[int]] = {}
    for h, r, t in np.asarray(triples).tolist():
        tails.setdefault((h, r), set()).add(t)
        heads.setdefault((r, t), set()).add(h)
    return tails, heads


def kgc_score_matrix(ent: np.ndarray, phases: np.ndarray, triples: np.ndarray, side: str,
                     norm: str = "l1") -> np.ndarray:
    """Q x |E| distances for predicting ``side`` of each triple."""
    triples = np.asarray(triples).reshape(-1, 3)
    out = np.empty((len(triples), len(ent)))
    for q, (h, r, t) in enumerate(triples.tolist()):
        anchor = ent[h] if side == "tail" else ent[t]
        out[q] = rotate_distances(anchor, phases[r], ent, side, norm)
    return out


def rank_kgc(ent: np.ndarray, phases: np.ndarray, triples: np.ndarray,
             known: np.ndarray | None = None, norm: str = "l1") -> RankResult:
    """Head and tail ranks of ``triples`` (ascending distance, mean-rank ties).

    With ``known`` given (filtered setting) every other true triple is removed
    from the candidate list first.
    """
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    tails_of, heads_of = known_index(known) if known is not None else ({}, {})
    ranks, dirs = [], []
    for h, r, t in triples.tolist():
        for side in ("head", "tail"):
            if side == "tail":
                scores = rotate_distances(ent[h], phases[r], ent, "tail", norm)
                target, others = t, tails_of.get((h, r), ())
            else:
                scores = rotate_distances(ent[t], phases[r], ent, "head", norm)
                target, others = h, heads_of.get((r, t), ())
            keep = np.ones(len(ent), dtype=bool)
            if others:
                keep[list(others)] = False
                keep[target] = True
            s, ts = scores[keep], scores[target]
            ranks.append(tie_aware_rank((s < ts).sum(), (s == ts).sum()))
            dirs.append(side)
    return RankResult(np.array(ranks), np.array(dirs))


def eval_kgc(model, kg: KnowledgeGraph, split: str = "test", filtered: bool = True) -> RankResult:
    """Rank a split with a trained completion model (see ``kgc.KgcModel``)."""
    ent = model.entity_matrix()
    phases = model.phase_matrix()
    known = kg.all_triples() if filtered else None
    return rank_kgc(ent, phases, kg.split(split), known, getattr(model, "norm", "l1"))


# alignment


def similarity_matrix(emb1: np.ndarray, emb2: np.ndarray, normalize: bool = True) -> np.ndarray:
    a, b = np.asarray(emb1, dtype=np.float64), np.asarray(emb2, dtype=np.float64)
    if normalize:
        a = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
        b = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    return a @ b.T


def eval_ea(emb1: np.ndarray, emb2: np.ndarray, test_pairs, pool: str = "test",
            normalize: bool = True) -> RankResult:
    """Rank each source test entity's counterpart among target candidates by similarity.

    ``pool="test"`` restricts candidates to the target side of ``test_pairs``;
    ``pool="full"`` uses every target-KG entity.
    """
    pairs = np.asarray(test_pairs, dtype=np.int64).reshape(-1, 2)
    if not len(pairs):
        raise ValueError("eval_ea needs at least one test pair")
    if pool == "test":
        cand = pairs[:, 1]
        targets = np.arange(len(pairs))
    elif pool == "full":
        cand = np.arange(len(emb2))
        targets = pairs[:, 1]
    else:
        raise ValueError(f"unknown candidate pool {pool!r}")
    sim = similarity_matrix(emb1[pairs[:, 0]], emb2[cand], normalize)
    target_sim = sim[np.arange(len(pairs)), targets][:, None]
    ranks = tie_aware_rank((sim > target_sim).sum(1), (sim == target_sim).sum(1))
    return RankResult(ranks)
