"""Prototypical network with an optional softmax feature-selection layer and an
optional support-sample weighting net.

Four variants share one code path:

=========  ================  ==============
variant    feature selector  sample weights
=========  ================  ==============
protonet   no                no
selectf    yes               no
selects    no                yes
select     yes               yes
=========  ================  ==============
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ContractError, DimensionError

if TYPE_CHECKING:
    from .data import Episode

VARIANTS = ("protonet", "selectf", "selects", "select")
DISTANCES = ("sqeuclidean", "euclidean")

# keeps the gradient of sqrt finite when a query sits exactly on a prototype
EUCLIDEAN_FLOOR = 1e-12


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class FeatureSelector:
    """Learnable ``theta`` whose softmax ``beta`` rescales every input feature."""

    def __init__(self, theta):
        self.theta = Tensor(theta, requires_grad=True, name="theta")
        if self.theta.values.ndim != 1:
            raise DimensionError(f"theta must be a vector, got shape {self.theta.shape}")

    @classmethod
    def uniform(cls, p: int) -> FeatureSelector:
        return cls(np.zeros(p))

    @property
    def dim(self) -> int:
        return self.theta.shape[0]

    def beta(self) -> Tensor:
        return dc.softmax(self.theta)

    def parameters(self) -> list[Tensor]:
        return [self.theta]


@dataclass
class Layer:
    weight: Tensor
    bias: Tensor
    activation: str | None = "relu"


class EmbeddingNet:
    """Fully connected ReLU network with a linear output layer.

    ``input_gain`` is a fixed (not learned) factor applied to the input. Models
    with a feature selector use ``input_gain = p`` so that the uniform initial
    selection ``beta = 1/p`` presents inputs at their natural scale; the
    constant folds into the first linear layer, so the family of functions
    is unchanged.
    """

    def __init__(self, layers: Sequence[Layer], input_gain: float = 1.0):
        if not layers:
            raise ContractError("EmbeddingNet needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise DimensionError(
                    f"layer dims do not chain: {prev.weight.shape} then {nxt.weight.shape}"
                )
        if layers[-1].activation is not None:
            raise ContractError("the output layer of the embedding net must be linear")
        self.layers = list(layers)
        self.input_gain = float(input_gain)

    @classmethod
    def init(cls, input_dim: int, hidden: Sequence[int] = (64, 32), embedding_dim: int = 16,
             rng: np.random.Generator | None = None, input_gain: float = 1.0) -> EmbeddingNet:
        rng = rng if rng is not None else np.random.default_rng(0)
        dims = [input_dim, *hidden, embedding_dim]
        layers = []
        for i, (fi, fo) in enumerate(zip(dims, dims[1:])):
            last = i == len(dims) - 2
            layers.append(Layer(
                Tensor(glorot(rng, fi, fo), requires_grad=True, name=f"embed.{i}.weight"),
                Tensor(np.zeros(fo), requires_grad=True, name=f"embed.{i}.bias"),
                None if last else "relu",
            ))
        return cls(layers, input_gain)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        h = x * self.input_gain if self.input_gain != 1.0 else x
        for layer in self.layers:
            h = h @ layer.weight + layer.bias
            if layer.activation == "relu":
                h = dc.relu(h)
        return h

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.layers for t in (layer.weight, layer.bias)]


class WeightNet:
    """One-hidden-layer MLP mapping an embedding to a confidence weight in (0, 1)."""

    def __init__(self, w1, b1, w2, b2):
        self.w1 = Tensor(w1, requires_grad=True, name="weight.w1")
        self.b1 = Tensor(b1, requires_grad=True, name="weight.b1")
        self.w2 = Tensor(w2, requires_grad=True, name="weight.w2")
        self.b2 = Tensor(b2, requires_grad=True, name="weight.b2")
        e, h = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape != (h, 1) or self.b2.shape != (1,):
            raise DimensionError(
                f"WeightNet shapes inconsistent: w1 {self.w1.shape}, b1 {self.b1.shape}, "
                f"w2 {self.w2.shape}, b2 {self.b2.shape}"
            )

    @classmethod
    def init(cls, embedding_dim: int, hidden: int = 100,
             rng: np.random.Generator | None = None) -> WeightNet:
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(glorot(rng, embedding_dim, hidden), np.zeros(hidden),
                   glorot(rng, hidden, 1), np.zeros(1))

    @classmethod
    def zeros(cls, embedding_dim: int, hidden: int = 100) -> WeightNet:
        return cls(np.zeros((embedding_dim, hidden)), np.zeros(hidden), np.zeros((hidden, 1)), np.zeros(1))

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    def __call__(self, z: Tensor) -> Tensor:
        """Weights for the rows of ``z`` (m, e); returns shape (m,)."""
        if z.values.ndim != 2 or z.shape[1] != self.input_dim:
            raise DimensionError(f"WeightNet expects (m, {self.input_dim}) embeddings, got {z.shape}")
        hidden = dc.relu(z @ self.w1 + self.b1)
        out = dc.sigmoid(hidden @ self.w2 + self.b2)
        return dc.reshape(out, (z.shape[0],))

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class ModelBundle:
    embedder: EmbeddingNet
    selector: FeatureSelector | None = None
    weighter: WeightNet | None = None
    variant: str = "protonet"
    distance: str = "sqeuclidean"
    normalize_weights: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.distance not in DISTANCES:
            raise ContractError(f"unknown distance {self.distance!r}; expected one of {DISTANCES}")
        want_sel = self.variant in ("selectf", "select")
        want_wt = self.variant in ("selects", "select")
        if want_sel != (self.selector is not None) or want_wt != (self.weighter is not None):
            raise ContractError(
                f"variant {self.variant!r} requires selector={want_sel}, weighter={want_wt}"
            )
        if self.selector is not None and self.selector.dim != self.embedder.input_dim:
            raise DimensionError(
                f"selector dim {self.selector.dim} != embedder input dim {self.embedder.input_dim}"
            )
        if self.weighter is not None and self.weighter.input_dim != self.embedder.embedding_dim:
            raise DimensionError(
                f"weighter input {self.weighter.input_dim} != embedding dim {self.embedder.embedding_dim}"
            )

    @classmethod
    def build(cls, variant: str, input_dim: int, *, hidden: Sequence[int] = (64, 32),
              embedding_dim: int = 16, weight_hidden: int = 100, distance: str = "sqeuclidean",
              normalize_weights: bool = False, seed: int | np.random.Generator = 0) -> ModelBundle:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        has_selector = variant in ("selectf", "select")
        embedder = EmbeddingNet.init(input_dim, hidden, embedding_dim, rng,
                                     input_gain=float(input_dim) if has_selector else 1.0)
        selector = FeatureSelector.uniform(input_dim) if has_selector else None
        weighter = (WeightNet.init(embedding_dim, weight_hidden, rng)
                    if variant in ("selects", "select") else None)
        return cls(embedder, selector, weighter, variant, distance, normalize_weights,
                   {"hidden": list(hidden), "embedding_dim": embedding_dim,
                    "weight_hidden": weight_hidden})

    @property
    def input_dim(self) -> int:
        return self.embedder.input_dim

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.selector is not None:
            out["theta"] = self.selector.theta
        for i, layer in enumerate(self.embedder.layers):
            out[f"embed.{i}.weight"] = layer.weight
            out[f"embed.{i}.bias"] = layer.bias
        if self.weighter is not None:
            for name in ("w1", "b1", "w2", "b2"):
                out[f"weight.{name}"] = getattr(self.weighter, name)
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def _as_rows(x) -> tuple[Tensor, bool]:
    t = dc.as_tensor(x)
    if t.values.ndim == 1:
        return dc.reshape(t, (1, t.shape[0])), True
    return t, False


def select_features(selector: FeatureSelector | None, x) -> Tensor:
    """``softmax(theta) * x`` (rows of a matrix or a single vector); identity without a selector."""
    x = dc.as_tensor(x)
    if selector is None:
        return x
    if x.shape[-1] != selector.dim:
        raise ContractError(f"input has {x.shape[-1]} features, selector expects {selector.dim}")
    return selector.beta() * x


def embed(bundle: ModelBundle, x) -> Tensor:
    rows, single = _as_rows(x)
    if rows.shape[1] != bundle.input_dim:
        raise ContractError(f"input has {rows.shape[1]} features, model expects {bundle.input_dim}")
    z = bundle.embedder(select_features(bundle.selector, rows))
    return dc.reshape(z, (z.shape[1],)) if single else z


def sample_weight(weighter: WeightNet | None, z) -> Tensor:
    """Weight in (0, 1) per embedding; exactly 1 when the variant has no weighting net."""
    rows, single = _as_rows(z)
    if weighter is None:
        w = Tensor(np.ones(rows.shape[0]))
    else:
        if rows.shape[1] != weighter.input_dim:
            raise ContractError(f"embedding dim {rows.shape[1]} != weighter input {weighter.input_dim}")
        w = weighter(rows)
    return dc.reshape(w, ()) if single else w


def weighted_prototypes(embeddings, weights, labels, n: int, normalize: bool = False) -> Tensor:
    """Class prototypes ``c_n = (1/|S_n|) sum_{i in S_n} v_i z_i``; returns (n, e).

    ``embeddings`` is an (m, e) tensor or a list of e-vectors; ``weights`` an
    m-vector or list of scalars. With ``normalize=True`` the divisor is
    ``sum v_i`` instead of the count.
    """
    z = dc.stack(embeddings) if isinstance(embeddings, (list, tuple)) else dc.as_tensor(embeddings)
    w = dc.stack(weights) if isinstance(weights, (list, tuple)) and weights and isinstance(weights[0], Tensor) \
        else dc.as_tensor(weights)
    if z.values.ndim == 1:
        raise DimensionError("embeddings must be a matrix or a list of vectors")
    lab = np.asarray(labels, dtype=np.int64)
    if len(lab) != z.shape[0] or w.shape != (z.shape[0],):
        raise ContractError(
            f"{z.shape[0]} embeddings, {w.shape} weights and {len(lab)} labels must agree"
        )
    return dc.segment_weighted_mean(z, w, lab, n, normalize)


def distances(z: Tensor, prototypes: Tensor, distance: str = "sqeuclidean") -> Tensor:
    d = dc.pairwise_sqdist(z, prototypes)
    if distance == "euclidean":
        d = dc.sqrt(d + EUCLIDEAN_FLOOR)
    return d


def classify(prototypes, z, distance: str = "sqeuclidean") -> Tensor:
    """Class posterior ``softmax(-d(z, c_n))`` for one embedding (n,) or rows of embeddings (m, n)."""
    protos = dc.stack(prototypes) if isinstance(prototypes, (list, tuple)) else dc.as_tensor(prototypes)
    rows, single = _as_rows(z)
    if protos.values.ndim != 2 or protos.shape[1] != rows.shape[1]:
        raise DimensionError(f"prototypes {protos.shape} vs embedding {rows.shape}")
    probs = dc.softmax(-distances(rows, protos, distance), axis=-1)
    return dc.reshape(probs, (protos.shape[0],)) if single else probs


def _episode_distances(bundle: ModelBundle, ep: Episode) -> tuple[Tensor, Tensor | None]:
    if ep.support_x.shape[1] != bundle.input_dim:
        raise ContractError(
            f"episode has {ep.support_x.shape[1]} features, model expects {bundle.input_dim}"
        )
    m_s = ep.support_x.shape[0]
    x = Tensor(np.vstack([ep.support_x, ep.query_x]))
    z = bundle.embedder(select_features(bundle.selector, x))
    zs = dc.take(z, slice(0, m_s))
    zq = dc.take(z, slice(m_s, None))
    v = sample_weight(bundle.weighter, zs)
    protos = weighted_prototypes(zs, v, ep.support_y, ep.n, bundle.normalize_weights)
    return distances(zq, protos, bundle.distance), (v if bundle.weighter is not None else None)


def episode_loss(bundle: ModelBundle, ep: Episode) -> Tensor:
    """Mean over queries of ``d(z, c_y) + log sum_n' exp(-d(z, c_n'))``."""
    d, _ = _episode_distances(bundle, ep)
    return dc.proto_cross_entropy(d, ep.query_y)


def episode_forward(bundle: ModelBundle, ep: Episode) -> tuple[Tensor, np.ndarray]:
    """Loss plus predicted query labels from one forward pass."""
    d, _ = _episode_distances(bundle, ep)
    return dc.proto_cross_entropy(d, ep.query_y), np.argmin(d.values, axis=1)


def predict(bundle: ModelBundle, ep: Episode) -> np.ndarray:
    """Nearest-prototype label per query; ties go to the lowest class index."""
    d, _ = _episode_distances(bundle, ep)
    return np.argmin(d.values, axis=1)


def support_weights(bundle: ModelBundle, ep: Episode) -> np.ndarray:
    if bundle.weighter is None:
        raise ContractError(f"variant {bundle.variant!r} has no sample weighting net")
    z = embed(bundle, ep.support_x)
    return bundle.weighter(z).values.copy()
