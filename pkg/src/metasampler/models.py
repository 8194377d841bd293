"""The embedding model (MLP backbone + classifier head) and the sampler's
energy networks.

The backbone is a 2-layer MLP over precomputed feature vectors; the sampler
maps embeddings (or candidate/anchor embedding pairs) to scalar energies whose
softmax defines selection probabilities.  Energy nets are affine by default,
with an optional single hidden layer (``sampler_hidden``).

Sampler inputs are always detached embeddings: within one training iteration
the model weights do not depend on the sampler, so the only sampler-gradient
path is through the energy map itself.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden_dim: int
    embed_dim: int
    num_identities: int
    sampler_hidden: int | None = None

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "embed_dim", "num_identities"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1")
        if self.sampler_hidden is not None and self.sampler_hidden < 1:
            raise ValueError("ModelConfig.sampler_hidden must be >= 1 or None")


@dataclass
class ModelParams:
    """Backbone + classifier weights, all float64 leaf tensors."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    wc: Tensor
    bc: Tensor

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        def leaf(data):
            return Tensor(data, requires_grad=True)

        def he(fan_in, shape):
            return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)

        return cls(
            w1=leaf(he(config.input_dim, (config.input_dim, config.hidden_dim))),
            b1=leaf(np.zeros(config.hidden_dim)),
            w2=leaf(he(config.hidden_dim, (config.hidden_dim, config.embed_dim))),
            b2=leaf(np.zeros(config.embed_dim)),
            wc=leaf(he(config.embed_dim, (config.embed_dim, config.num_identities))),
            bc=leaf(np.zeros(config.num_identities)),
        )

    def tensors(self) -> tuple[Tensor, ...]:
        return (self.w1, self.b1, self.w2, self.b2, self.wc, self.bc)

    def num_params(self) -> int:
        return sum(t.data.size for t in self.tensors())

    def to_vector(self) -> np.ndarray:
        return ad.flatten_arrays([t.data for t in self.tensors()])

    @classmethod
    def from_vector(cls, vec: np.ndarray, like: "ModelParams") -> "ModelParams":
        parts = _split_like(vec, like.tensors())
        return cls(*parts)

    def copy(self) -> "ModelParams":
        return ModelParams(*(Tensor(t.data.copy(), requires_grad=True) for t in self.tensors()))


@dataclass
class EnergyParams:
    """Scalar-valued energy map: affine, or one hidden ReLU layer."""

    w_hidden: Tensor | None
    b_hidden: Tensor | None
    w_out: Tensor
    b_out: Tensor

    @classmethod
    def init(
        cls, in_dim: int, hidden: int | None, rng: np.random.Generator | None = None
    ) -> "EnergyParams":
        # Output weights start at zero so the initial policy is exactly uniform;
        # hidden weights (if any) are random so their gradient path is live.
        if hidden is None:
            return cls(
                w_hidden=None,
                b_hidden=None,
                w_out=Tensor(np.zeros(in_dim), requires_grad=True),
                b_out=Tensor(0.0, requires_grad=True),
            )
        if rng is None:
            raise ValueError("EnergyParams.init: hidden layer requires an rng")
        return cls(
            w_hidden=Tensor(
                rng.normal(0.0, np.sqrt(2.0 / in_dim), (in_dim, hidden)),
                requires_grad=True,
            ),
            b_hidden=Tensor(np.zeros(hidden), requires_grad=True),
            w_out=Tensor(np.zeros(hidden), requires_grad=True),
            b_out=Tensor(0.0, requires_grad=True),
        )

    def tensors(self) -> tuple[Tensor, ...]:
        if self.w_hidden is None:
            return (self.w_out, self.b_out)
        return (self.w_hidden, self.b_hidden, self.w_out, self.b_out)

    def apply(self, x: Tensor) -> Tensor:
        """Energy of a single input vector or of each row of a matrix."""
        if self.w_hidden is not None:
            x = ad.relu(ad.matmul(x, self.w_hidden) + self.b_hidden)
        return ad.matmul(x, self.w_out) + self.b_out

    def copy(self) -> "EnergyParams":
        def cp(t):
            return None if t is None else Tensor(t.data.copy(), requires_grad=True)

        return EnergyParams(cp(self.w_hidden), cp(self.b_hidden), cp(self.w_out), cp(self.b_out))


@dataclass
class SamplerParams:
    """Energy nets of the sampler: one over embeddings, one over pairs.

    The pairwise net consumes the concatenation [candidate, anchor], in that
    order, so its input width is exactly twice the embedding width.
    """

    single: EnergyParams
    pair: EnergyParams

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator | None = None) -> "SamplerParams":
        return cls(
            single=EnergyParams.init(config.embed_dim, config.sampler_hidden, rng),
            pair=EnergyParams.init(2 * config.embed_dim, config.sampler_hidden, rng),
        )

    def tensors(self) -> tuple[Tensor, ...]:
        return self.single.tensors() + self.pair.tensors()

    def num_params(self) -> int:
        return sum(t.data.size for t in self.tensors())

    def to_vector(self) -> np.ndarray:
        return ad.flatten_arrays([t.data for t in self.tensors()])

    @classmethod
    def from_vector(cls, vec: np.ndarray, like: "SamplerParams") -> "SamplerParams":
        parts = _split_like(vec, like.tensors())
        n = len(like.single.tensors())
        single = _energy_from_tensors(parts[:n], like.single)
        pair = _energy_from_tensors(parts[n:], like.pair)
        return cls(single=single, pair=pair)

    def copy(self) -> "SamplerParams":
        return SamplerParams(single=self.single.copy(), pair=self.pair.copy())


def _split_like(vec: np.ndarray, like: tuple[Tensor, ...]) -> list[Tensor]:
    vec = np.asarray(vec, dtype=np.float64)
    total = sum(t.data.size for t in like)
    if vec.shape != (total,):
        raise ShapeError(f"from_vector: expected {total} entries, got shape {vec.shape}")
    parts, offset = [], 0
    for t in like:
        n = t.data.size
        parts.append(Tensor(vec[offset : offset + n].reshape(t.data.shape).copy(), requires_grad=True))
        offset += n
    return parts


def _energy_from_tensors(parts: list[Tensor], like: EnergyParams) -> EnergyParams:
    if like.w_hidden is None:
        return EnergyParams(None, None, parts[0], parts[1])
    return EnergyParams(parts[0], parts[1], parts[2], parts[3])


def embed(x, params: ModelParams) -> Tensor:
    """Embedding of one feature vector or of each row of a feature matrix."""
    x = ad.as_tensor(x)
    if x.data.shape[-1] != params.w1.data.shape[0]:
        raise ShapeError(
            f"embed: input dim {x.data.shape[-1]} != expected {params.w1.data.shape[0]}"
        )
    h = ad.relu(ad.matmul(x, params.w1) + params.b1)
    return ad.matmul(h, params.w2) + params.b2


def classify(embedding, params: ModelParams) -> Tensor:
    """Identity logits for an embedding vector or matrix of embeddings."""
    e = ad.as_tensor(embedding)
    if e.data.shape[-1] != params.wc.data.shape[0]:
        raise ShapeError(
            f"classify: embed dim {e.data.shape[-1]} != expected {params.wc.data.shape[0]}"
        )
    return ad.matmul(e, params.wc) + params.bc


def embed_array(x: np.ndarray, params: ModelParams) -> np.ndarray:
    """Embedding values only (no graph); for policy refresh and evaluation."""
    return embed(Tensor(np.asarray(x, dtype=np.float64)), params).data


def energy_single(embedding, sampler: SamplerParams) -> Tensor:
    return sampler.single.apply(ad.as_tensor(embedding))


def energy_pair(embedding, anchor_embedding, sampler: SamplerParams) -> Tensor:
    """Pairwise energy; candidate rows may be batched against one anchor."""
    e = ad.as_tensor(embedding)
    a = ad.as_tensor(anchor_embedding)
    if e.data.ndim == 1 and a.data.ndim == 1:
        if e.shape != a.shape:
            raise ShapeError(f"energy_pair: shapes {e.shape} and {a.shape} differ")
        return sampler.pair.apply(ad.concat([e, a]))
    if e.data.ndim == 2 and a.data.ndim == 1:
        if e.data.shape[1] != a.data.shape[0]:
            raise ShapeError(f"energy_pair: shapes {e.shape} and {a.shape} differ")
        tiled = ad.tile_rows(a, e.data.shape[0])
        return sampler.pair.apply(ad.concat([e, tiled], axis=1))
    raise ShapeError(f"energy_pair: unsupported shapes {e.shape} and {a.shape}")


def save_checkpoint(
    path,
    config: ModelConfig,
    model: ModelParams | None = None,
    sampler: SamplerParams | None = None,
) -> None:
    """Write a key->array checkpoint; round trips are bit-exact."""
    arrays: dict[str, np.ndarray] = {"config_json": np.array(json.dumps(asdict(config)))}
    if model is not None:
        for name, t in zip(_MODEL_KEYS, model.tensors()):
            arrays[f"model.{name}"] = t.data
    if sampler is not None:
        for name, t in _sampler_items(sampler):
            arrays[f"sampler.{name}"] = t.data
    np.savez(path, **arrays)


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams | None, SamplerParams | None]:
    with np.load(path, allow_pickle=False) as payload:
        config = ModelConfig(**json.loads(str(payload["config_json"])))
        model = None
        if "model.w1" in payload:
            model = ModelParams(
                *(Tensor(payload[f"model.{k}"], requires_grad=True) for k in _MODEL_KEYS)
            )
        sampler = None
        if "sampler.single.w_out" in payload:
            sampler = SamplerParams(
                single=_load_energy(payload, "sampler.single"),
                pair=_load_energy(payload, "sampler.pair"),
            )
    return config, model, sampler


_MODEL_KEYS = ("w1", "b1", "w2", "b2", "wc", "bc")


def _sampler_items(sampler: SamplerParams):
    for prefix, net in (("single", sampler.single), ("pair", sampler.pair)):
        if net.w_hidden is not None:
            yield f"{prefix}.w_hidden", net.w_hidden
            yield f"{prefix}.b_hidden", net.b_hidden
        yield f"{prefix}.w_out", net.w_out
        yield f"{prefix}.b_out", net.b_out


def _load_energy(payload, prefix: str) -> EnergyParams:
    def leaf(key):
        return Tensor(payload[key], requires_grad=True)

    hidden_key = f"{prefix}.w_hidden"
    return EnergyParams(
        w_hidden=leaf(hidden_key) if hidden_key in payload else None,
        b_hidden=leaf(f"{prefix}.b_hidden") if hidden_key in payload else None,
        w_out=leaf(f"{prefix}.w_out"),
        b_out=leaf(f"{prefix}.b_out"),
    )
