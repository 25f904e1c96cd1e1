"""Missing-aware multimodal transformer plus early/late fusion baselines.

Intermediate fusion (``Maria``): one encoder stack per modality, the token
representations are concatenated and passed through a shared stack, then a
linear head reads the flattened tokens. Early fusion (``NAIM`` over the
concatenated feature list) and late fusion (``LateFusion``, averaged
per-modality probability profiles) share the same building blocks.
"""
from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .data import Batch, FeatureSchema, MultimodalDataset
from .masking import build_mask
from .numerics import Tensor

INTERMEDIATE, EARLY, LATE = "intermediate", "early", "late"
FUSION_MODES = (INTERMEDIATE, EARLY, LATE)
CHECKPOINT_VERSION = 1


class InferenceError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    d_e: int = 32
    heads: int = 4
    layers: int = 2
    shared_layers: int = 2
    ff_width: int = 64

    def __post_init__(self):
        if self.d_e < 1 or self.heads < 1 or self.d_e % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide d_e ({self.d_e})")
        if self.layers < 0 or self.shared_layers < 0 or self.ff_width < 1:
            raise ValueError("layer counts must be >= 0 and ff_width >= 1")

    @property
    def d_h(self) -> int:
        return self.d_e // self.heads


class Module:
    """Minimal parameter container with dotted, ordered names."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def param(self, name: str, values) -> Tensor:
        t = Tensor(values, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self._params.items():
            yield prefix + name, t
        for name, mod in self._children.items():
            yield from mod.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(t.values.size for t in self.parameters()))

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.values.copy() for k, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        if set(own) != set(state):
            raise KeyError(f"parameter names differ: {sorted(set(own) ^ set(state))[:5]}")
        for k, t in own.items():
            if t.values.shape != state[k].shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {t.values.shape}")
            t.values = np.array(state[k], dtype=np.float64)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = self.param("weight", _uniform(rng, d_in, (d_in, d_out)))
        self.bias = self.param("bias", _uniform(rng, d_in, (d_out,))) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = nx.matmul(x, self.weight)
        return y if self.bias is None else nx.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = self.param("gain", np.ones(d))
        self.bias = self.param("bias", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gain, self.bias)


# ---------------------------------------------------------------------- embeddings


class EmbeddingTable(Module):
    """Per-feature lookup producing one ``d_e`` token per feature.

    Numerical value ``v`` embeds as ``v * direction + bias``; categorical
    features index a shared table whose row 0 is the frozen all-zero missing
    row, followed per feature by an "unknown category" row and one row per
    declared category. Missing cells always yield the zero row.
    """

    MISSING_ROW = 0

    def __init__(self, rng, schema: Sequence[FeatureSchema], d_e: int):
        super().__init__()
        self.schema = tuple(schema)
        self.d_e = d_e
        self.num_pos = np.array([j for j, f in enumerate(schema) if not f.is_categorical], dtype=np.intp)
        self.cat_pos = np.array([j for j, f in enumerate(schema) if f.is_categorical], dtype=np.intp)
        self.cat_sizes = np.array([len(schema[j].categories) for j in self.cat_pos], dtype=np.intp)
        # offset of each categorical feature's "unknown" row
        self.cat_offsets = 1 + np.concatenate([[0], np.cumsum(self.cat_sizes + 1)[:-1]]).astype(np.intp)
        self.unknown_rows = self.cat_offsets.copy()
        scale = 1.0 / math.sqrt(d_e)
        if self.num_pos.size:
            self.direction = self.param("direction", rng.normal(0, 1.0, (self.num_pos.size, d_e)))
            self.bias = self.param("bias", rng.normal(0, scale, (self.num_pos.size, d_e)))
        if self.cat_pos.size:
            rows = 1 + int((self.cat_sizes + 1).sum())
            table = rng.normal(0, 1.0, (rows, d_e))
            table[self.MISSING_ROW] = 0.0
            table[self.unknown_rows] = 0.0
            self.table = self.param("table", table)
        order = np.concatenate([self.num_pos, self.cat_pos])
        self.inverse = np.argsort(order)

    def indices(self, values: np.ndarray, observed: np.ndarray) -> np.ndarray:
        """Table rows for the categorical columns (missing cells -> row 0)."""
        obs = observed[:, self.cat_pos]
        codes = np.where(obs, values[:, self.cat_pos], 0.0)
        bad = obs & ((codes < -1) | (codes >= self.cat_sizes) | (codes != np.round(codes)))
        if bad.any():
            raise IndexError("category index outside the feature's vocabulary")
        return np.where(obs, self.cat_offsets + 1 + codes.astype(np.intp), self.MISSING_ROW)

    def __call__(self, values: np.ndarray, observed: np.ndarray) -> Tensor:
        parts = []
        if self.num_pos.size:
            v = np.where(observed[:, self.num_pos], values[:, self.num_pos], 0.0)
            parts.append(nx.add(nx.mul(Tensor(v[:, :, None]), self.direction), self.bias))
        if self.cat_pos.size:
            parts.append(nx.embedding_gather(self.table, self.indices(values, observed),
                                             frozen_rows=[self.MISSING_ROW]))
        x = parts[0] if len(parts) == 1 else nx.take(nx.concat(parts, axis=1), self.inverse, axis=1)
        return nx.mul(x, Tensor(observed[:, :, None].astype(np.float64)))


# ---------------------------------------------------------------------- attention


class MaskedSelfAttention(Module):
    """Multi-head ``ReLU(softmax(QK^T / sqrt(d_h) + M) + M^T) V``.

    Head ``k`` uses columns ``k*d_h:(k+1)*d_h`` of the Q/K/V weights; the
    concatenated heads go through a bias-free output projection, so rows of
    unobserved tokens stay exactly zero.
    """

    def __init__(self, rng, d_e: int, heads: int):
        super().__init__()
        self.d_e, self.heads, self.d_h = d_e, heads, d_e // heads
        self.w_q = self.param("w_q", _uniform(rng, d_e, (d_e, d_e)))
        self.w_k = self.param("w_k", _uniform(rng, d_e, (d_e, d_e)))
        self.w_v = self.param("w_v", _uniform(rng, d_e, (d_e, d_e)))
        self.w_o = self.param("w_o", _uniform(rng, d_e, (d_e, d_e)))

    def head_weights(self, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        cols = slice(k * self.d_h, (k + 1) * self.d_h)
        return self.w_q.values[:, cols], self.w_k.values[:, cols], self.w_v.values[:, cols]

    def _split(self, x: Tensor, b: int, t: int) -> Tensor:
        return nx.transpose(nx.reshape(x, (b, t, self.heads, self.d_h)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, observed: np.ndarray) -> Tensor:
        b, t, _ = x.shape
        mask = build_mask(observed)
        q = self._split(nx.matmul(x, self.w_q), b, t)
        k = self._split(nx.matmul(x, self.w_k), b, t)
        v = self._split(nx.matmul(x, self.w_v), b, t)
        logits = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(self.d_h))
        weights = nx.masked_softmax(logits, mask.additive[:, None])
        weights = nx.relu(nx.add(weights, Tensor(mask.T[:, None])))
        out = nx.matmul(weights, v)
        out = nx.reshape(nx.transpose(out, (0, 2, 1, 3)), (b, t, self.d_e))
        return nx.matmul(out, self.w_o)


class EncoderBlock(Module):
    """Attention, residual, norm, feed-forward, residual, norm, re-zero."""

    def __init__(self, rng, cfg: EncoderConfig):
        super().__init__()
        self.attn = self.child("attn", MaskedSelfAttention(rng, cfg.d_e, cfg.heads))
        self.norm1 = self.child("norm1", LayerNorm(cfg.d_e))
        self.ff1 = self.child("ff1", Linear(rng, cfg.d_e, cfg.ff_width))
        self.ff2 = self.child("ff2", Linear(rng, cfg.ff_width, cfg.d_e))
        self.norm2 = self.child("norm2", LayerNorm(cfg.d_e))

    def __call__(self, x: Tensor, observed: np.ndarray) -> Tensor:
        h = self.norm1(nx.add(x, self.attn(x, observed)))
        h = self.norm2(nx.add(h, self.ff2(nx.relu(self.ff1(h)))))
        # residual paths and norm biases would otherwise revive missing tokens
        return nx.mul(h, Tensor(observed[:, :, None].astype(np.float64)))


class EncoderStack(Module):
    def __init__(self, rng, cfg: EncoderConfig, n_layers: int):
        super().__init__()
        self.blocks = [self.child(str(i), EncoderBlock(rng, cfg)) for i in range(n_layers)]

    def __call__(self, x: Tensor, observed: np.ndarray, trace: list | None = None) -> Tensor:
        for block in self.blocks:
            x = block(x, observed)
            if trace is not None:
                trace.append((x.values, observed))
        return x


def _check_nonempty(observed: Sequence[np.ndarray]):
    counts = np.sum([o.sum(axis=1) for o in observed], axis=0)
    if (counts == 0).any():
        rows = np.flatnonzero(counts == 0)[:5].tolist()
        raise InferenceError(f"samples {rows} have no observed feature")


def _as_batch(data) -> Batch:
    return data.batch() if isinstance(data, MultimodalDataset) else data


class _Classifier(Module):
    fusion: str

    def forward(self, data, trace: list | None = None) -> Tensor:
        raise NotImplementedError

    def predict_proba(self, data) -> np.ndarray:
        with nx.no_grad():
            return nx.softmax(self.forward(data).values, axis=-1)


class NAIM(_Classifier):
    """Single masked-attention encoder over one feature list plus a linear head."""

    fusion = EARLY

    def __init__(self, schema: Sequence[FeatureSchema], n_classes: int,
                 cfg: EncoderConfig = EncoderConfig(), seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.schema, self.n_classes, self.cfg = tuple(schema), n_classes, cfg
        self.embed = self.child("embed", EmbeddingTable(rng, schema, cfg.d_e))
        self.encoder = self.child("encoder", EncoderStack(rng, cfg, cfg.layers))
        self.head = self.child("head", Linear(rng, len(schema) * cfg.d_e, n_classes))

    def forward(self, data, trace: list | None = None) -> Tensor:
        batch = _as_batch(data)
        if len(batch.values) != 1:
            values = np.concatenate(batch.values, axis=1)
            observed = np.concatenate(batch.observed, axis=1)
        else:
            values, observed = batch.values[0], batch.observed[0]
        _check_nonempty([observed])
        x = self.encoder(self.embed(values, observed), observed, trace)
        return self.head(nx.flatten(x))


class Maria(_Classifier):
    """Intermediate fusion: per-modality stacks, shared stack, linear head."""

    fusion = INTERMEDIATE

    def __init__(self, schemas: Sequence[Sequence[FeatureSchema]], n_classes: int,
                 cfg: EncoderConfig = EncoderConfig(), seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.schemas = [tuple(s) for s in schemas]
        self.n_classes, self.cfg = n_classes, cfg
        self.embeds = [self.child(f"embed{i}", EmbeddingTable(rng, s, cfg.d_e))
                       for i, s in enumerate(self.schemas)]
        self.encoders = [self.child(f"encoder{i}", EncoderStack(rng, cfg, cfg.layers))
                         for i in range(len(self.schemas))]
        self.shared = self.child("shared", EncoderStack(rng, cfg, cfg.shared_layers))
        n_tokens = sum(len(s) for s in self.schemas)
        self.head = self.child("head", Linear(rng, n_tokens * cfg.d_e, n_classes))

    def modality_representations(self, batch: Batch, trace: list | None = None) -> list[Tensor]:
        return [enc(emb(v, o), o, trace)
                for emb, enc, v, o in zip(self.embeds, self.encoders, batch.values, batch.observed)]

    def shared_forward(self, reps: Sequence[Tensor], observed: Sequence[np.ndarray],
                       trace: list | None = None) -> Tensor:
        r_sh = nx.concat(list(reps), axis=1)
        obs_sh = np.concatenate(observed, axis=1)
        return self.head(nx.flatten(self.shared(r_sh, obs_sh, trace)))

    def forward(self, data, trace: list | None = None) -> Tensor:
        batch = _as_batch(data)
        if len(batch.values) != len(self.schemas):
            raise InferenceError(f"expected {len(self.schemas)} modalities, got {len(batch.values)}")
        _check_nonempty(batch.observed)
        return self.shared_forward(self.modality_representations(batch, trace), batch.observed, trace)


class LateFusion(Module):
    """Independent per-modality NAIM members; probabilities averaged over present modalities."""

    fusion = LATE

    def __init__(self, schemas: Sequence[Sequence[FeatureSchema]], n_classes: int,
                 cfg: EncoderConfig = EncoderConfig(), seed: int = 0):
        super().__init__()
        self.schemas = [tuple(s) for s in schemas]
        self.n_classes, self.cfg = n_classes, cfg
        self.members = [self.child(f"members{i}", NAIM(s, n_classes, cfg, seed + 7919 * (i + 1)))
                        for i, s in enumerate(self.schemas)]

    def predict_proba(self, data) -> np.ndarray:
        return forward_late(self.members, _as_batch(data))


def forward_late(members: Sequence[NAIM], batch: Batch, trace: list | None = None) -> np.ndarray:
    present = np.column_stack([o.any(axis=1) for o in batch.observed])
    if not present.any(axis=1).all():
        raise InferenceError("sample with every modality missing")
    total = np.zeros((batch.size, members[0].n_classes))
    with nx.no_grad():
        for i, member in enumerate(members):
            rows = np.flatnonzero(present[:, i])
            if rows.size == 0:
                continue
            sub = Batch([batch.values[i][rows]], [batch.observed[i][rows]])
            total[rows] += nx.softmax(member.forward(sub, trace).values, axis=-1)
    return total / present.sum(axis=1, keepdims=True)


def build_model(fusion: str, schemas: Sequence[Sequence[FeatureSchema]], n_classes: int,
                cfg: EncoderConfig = EncoderConfig(), seed: int = 0):
    if fusion == INTERMEDIATE:
        return Maria(schemas, n_classes, cfg, seed)
    if fusion == EARLY:
        return NAIM([f for s in schemas for f in s], n_classes, cfg, seed)
    if fusion == LATE:
        return LateFusion(schemas, n_classes, cfg, seed)
    raise ValueError(f"unknown fusion mode {fusion!r}; expected one of {FUSION_MODES}")


# ---------------------------------------------------------------------- checkpoints


def save_model(model, path, extra: dict | None = None) -> Path:
    """Write an ``.npz`` holding named parameters and a JSON header."""
    schemas = model.schemas if hasattr(model, "schemas") else [model.schema]
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "fusion": model.fusion,
        "config": asdict(model.cfg),
        "n_classes": model.n_classes,
        "schemas": [[f.to_dict() for f in s] for s in schemas],
        "extra": extra or {},
    }
    path = Path(path)
    buf = io.BytesIO()
    np.savez(buf, **{f"param/{k}": v for k, v in model.state_dict().items()})
    with zipfile.ZipFile(buf, "a") as zf:
        zf.writestr("meta.json", json.dumps(meta, sort_keys=True, indent=2))
    path.write_bytes(buf.getvalue())
    return path


def load_model(path):
    """Inverse of :func:`save_model`; returns ``(model, extra)``."""
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
    schemas = [[FeatureSchema(f["name"], f["kind"], tuple(f.get("categories", ()))) for f in s]
               for s in meta["schemas"]]
    cfg = EncoderConfig(**meta["config"])
    fusion = meta["fusion"]
    if fusion == EARLY:
        model = NAIM(schemas[0], meta["n_classes"], cfg)
    else:
        model = build_model(fusion, schemas, meta["n_classes"], cfg)
    with np.load(path) as npz:
        state = {k[len("param/"):]: npz[k] for k in npz.files if k.startswith("param/")}
    model.load_state_dict(state)
    return model, meta["extra"]
