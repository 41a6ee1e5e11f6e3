"""Per-modality entity encoders: FC projections, structure encoders, relation phases."""

from __future__ import annotations

import numpy as np

from . import numkit as nk
from .graphdata import KnowledgeGraph, ModalityFeatureStore
from .numkit import Tensor
from .numkit.init import fan_in_uniform, xavier_uniform


class ModalityProjector:
    """``h = x W + b`` mapping a d_m-dimensional feature into the shared space."""

    def __init__(self, in_dim: int, dim: int, rng: np.random.Generator, name: str = "fc"):
        self.in_dim, self.dim = in_dim, dim
        self.weight = nk.parameter(xavier_uniform(rng, in_dim, dim), name=f"{name}.weight")
        self.bias = nk.parameter(np.zeros(dim), name=f"{name}.bias")

    def parameters(self) -> dict[str, Tensor]:
        return {self.weight.name: self.weight, self.bias.name: self.bias}

    def __call__(self, x) -> Tensor:
        return embed_modality(x, self)


def embed_modality(x, projector: ModalityProjector) -> Tensor:
    """Project raw features (array, Tensor or imputed store) to |E| x d."""
    if isinstance(x, ModalityFeatureStore):
        x = x.matrix
    x = nk.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != projector.in_dim:
        raise ValueError(f"embed_modality: features of shape {x.shape} do not match "
                         f"projector input dim {projector.in_dim}")
    return x @ projector.weight + projector.bias


def impute_missing(store: ModalityFeatureStore, seed: int) -> ModalityFeatureStore:
    """Fill absent rows with draws from N(mean, std^2) of the present rows.

    The presence mask of the returned store still records the original absence.
    """
    if not store.present.any():
        raise ValueError(f"cannot impute {store.modality!r}: no present rows")
    out = store.copy()
    missing = ~store.present
    if missing.any():
        rng = np.random.default_rng(seed)
        fill = rng.normal(size=(int(missing.sum()), store.dim)) * store.std + store.mean
        matrix = out.matrix.copy()
        matrix[missing] = fill
        out.matrix = matrix
    return out


class RelationEmbedding:
    """Relation phases in radians; the entity dimension must be twice this width."""

    def __init__(self, num_relations: int, entity_dim: int, rng: np.random.Generator):
        if entity_dim % 2:
            raise ValueError(f"entity dimension must be even, got {entity_dim}")
        self.phases = nk.parameter(rng.uniform(-np.pi, np.pi, size=(num_relations, entity_dim // 2)),
                                   name="relation.phase")

    def parameters(self) -> dict[str, Tensor]:
        return {self.phases.name: self.phases}


class GATLayer:
    """Multi-head graph attention with a shared diagonal linear map.

    Heads differ only in their attention vectors and are averaged.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, name: str,
                 slope: float = 0.2):
        self.heads, self.slope = heads, slope
        self.diag = nk.parameter(np.ones(dim), name=f"{name}.diag")
        self.att_src = nk.parameter(fan_in_uniform(rng, dim, (heads, dim)), name=f"{name}.att_src")
        self.att_dst = nk.parameter(fan_in_uniform(rng, dim, (heads, dim)), name=f"{name}.att_dst")

    def parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in (self.diag, self.att_src, self.att_dst)}

    def attention(self, x, adj_mask: np.ndarray) -> tuple[Tensor, Tensor]:
        """Return (transformed nodes z, attention heads x N x N)."""
        z = nk.as_tensor(x) * self.diag
        src = nk.matmul(self.att_src, nk.transpose(z))            # heads x N
        dst = nk.matmul(self.att_dst, nk.transpose(z))
        logits = nk.leaky_relu(src.reshape(self.heads, -1, 1) + dst.reshape(self.heads, 1, -1),
                               self.slope)
        logits = logits + np.where(adj_mask, 0.0, -1e30)
        return z, nk.softmax(logits, axis=-1)

    def __call__(self, x, adj_mask: np.ndarray) -> Tensor:
        z, alpha = self.attention(x, adj_mask)
        return nk.mean(nk.matmul(alpha, z), axis=0)


class StructureEncoder:
    """Learnable structure embedding x^g followed by FC (KGC) or a 2-layer GAT (EA)."""

    def __init__(self, num_entities: int, dim: int, mode: str, rng: np.random.Generator,
                 heads: int = 2, layers: int = 2, inter_activation: bool = True):
        if mode not in ("kgc", "mmea"):
            raise ValueError(f"unknown structure mode {mode!r}")
        self.mode = mode
        self.inter_activation = inter_activation
        self.table = nk.parameter(rng.normal(scale=1.0 / np.sqrt(dim), size=(num_entities, dim)),
                                  name="struct.x")
        if mode == "kgc":
            self.fc = ModalityProjector(dim, dim, rng, name="struct.fc")
            self.layers: list[GATLayer] = []
        else:
            self.fc = None
            self.layers = [GATLayer(dim, heads, rng, name=f"struct.gat{i}") for i in range(layers)]

    def parameters(self) -> dict[str, Tensor]:
        params = {self.table.name: self.table}
        if self.fc is not None:
            params.update(self.fc.parameters())
        for layer in self.layers:
            params.update(layer.parameters())
        return params

    def __call__(self, x=None, adj_mask: np.ndarray | None = None) -> Tensor:
        return encode_structure(self, x, adj_mask)


def encode_structure(encoder: StructureEncoder, x=None, adj_mask: np.ndarray | None = None,
                     kg: KnowledgeGraph | None = None) -> Tensor:
    """h^g from the (possibly noise-masked) structure table ``x``.

    KGC mode is an affine map of x; MMEA mode needs ``adj_mask`` (or ``kg``), a
    boolean |E| x |E| neighbor mask, to which self-loops are always added.
    """
    x = encoder.table if x is None else x
    if encoder.mode == "kgc":
        return embed_modality(x, encoder.fc)
    if adj_mask is None:
        if kg is None:
            raise ValueError("MMEA structure encoding needs an adjacency mask or a graph")
        adj_mask = kg.dense_adjacency()
    adj_mask = np.asarray(adj_mask, dtype=bool) | np.eye(len(adj_mask), dtype=bool)
    h = nk.as_tensor(x)
    for i, layer in enumerate(encoder.layers):
        h = layer(h, adj_mask)
        if encoder.inter_activation and i + 1 < len(encoder.layers):
            h = nk.elu(h)
    return h
