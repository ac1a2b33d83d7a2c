"""Base module (behavior attention + cross network) and the prediction towers.

The base module turns an impression's sparse features into ``h_s``, the
concatenation of an attention-pooled behavior vector and a cross-network
feature-interaction vector. Towers are plain ReLU encoders followed by a small
head ending in one sigmoid unit. A teacher tower additionally sees the
position embedding; a student tower never does.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, FeatureSchema
from .nn import (
    ContractError,
    ParamStore,
    Tensor,
    component_rng,
    concat,
    dense,
    embedding,
    masked_softmax,
    mul,
    relu,
    reshape,
    sigmoid,
    sum_,
    uniform_init,
)
from .nn.tensor import broadcast_to


@dataclass(frozen=True)
class TowerConfig:
    encoder_sizes: tuple[int, ...] = (64, 32)
    head_sizes: tuple[int, ...] = (16, 1)
    attention_hidden: int = 16
    num_cross_layers: int = 2
    normalize_attention: bool = True

    def __post_init__(self):
        object.__setattr__(self, "encoder_sizes", tuple(int(v) for v in self.encoder_sizes))
        object.__setattr__(self, "head_sizes", tuple(int(v) for v in self.head_sizes))
        if not self.encoder_sizes or any(v < 1 for v in self.encoder_sizes):
            raise ContractError(f"encoder_sizes must be non-empty positive, got {self.encoder_sizes}")
        if not self.head_sizes or self.head_sizes[-1] != 1 or any(v < 1 for v in self.head_sizes):
            raise ContractError(f"head_sizes must end in a single unit, got {self.head_sizes}")
        if self.attention_hidden < 1 or self.num_cross_layers < 0:
            raise ContractError("attention_hidden must be >= 1 and num_cross_layers >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    # derived widths
    def din_dim(self, schema: FeatureSchema) -> int:
        return schema.field_dim

    def dcn_dim(self, schema: FeatureSchema) -> int:
        return schema.num_fields * schema.field_dim

    def hs_dim(self, schema: FeatureSchema) -> int:
        return self.din_dim(schema) + self.dcn_dim(schema)

    def z_dim(self) -> int:
        return self.encoder_sizes[-1]


# -- functional pieces ------------------------------------------------------------
def attention_mlp(features: Tensor, layers: list[tuple[Tensor, Tensor]]) -> Tensor:
    h = features
    for i, (W, b) in enumerate(layers):
        h = dense(h, W, b)
        if i < len(layers) - 1:
            h = relu(h)
    return h


def din_pool(
    behavior_embs: Tensor,
    seq_len,
    target_emb: Tensor,
    attn_layers: list[tuple[Tensor, Tensor]],
    normalize: bool = True,
) -> Tensor:
    """Attention-weighted sum of behavior embeddings.

    Accepts a single example (``[L, d]``, ``[d]``) or a batch
    (``[B, L, d]``, ``[B, d]``). Rows at or beyond ``seq_len`` are padding.
    Each real item is scored by an MLP on ``[e_i, e_t, e_i*e_t, e_i-e_t]``;
    scores are softmax-normalised over real items unless ``normalize`` is
    false, in which case raw scores weight the items. An empty sequence
    pools to zeros.
    """
    single = behavior_embs.ndim == 2
    if single:
        behavior_embs = reshape(behavior_embs, (1,) + behavior_embs.shape)
        target_emb = reshape(target_emb, (1,) + target_emb.shape)
    B, L, d = behavior_embs.shape
    seq_len = np.broadcast_to(np.asarray(seq_len, dtype=np.int64), (B,))
    if (seq_len > L).any() or (seq_len < 0).any():
        raise ContractError(f"seq_len {seq_len.max()} outside [0, {L}]")
    mask = np.arange(L)[None, :] < seq_len[:, None]

    t = broadcast_to(reshape(target_emb, (B, 1, d)), (B, L, d))
    feats = concat([behavior_embs, t, behavior_embs * t, behavior_embs - t], axis=-1)
    scores = reshape(attention_mlp(reshape(feats, (B * L, 4 * d)), attn_layers), (B, L))
    if normalize:
        weights = masked_softmax(scores, mask)
    else:
        weights = scores * mask.astype(np.float64)
    pooled = sum_(mul(reshape(weights, (B, L, 1)), behavior_embs), axis=1)
    return reshape(pooled, (d,)) if single else pooled


def cross_layer(x0: Tensor, xl: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x0 * (w . xl) + b + xl`` on vectors or batches of row vectors."""
    n = x0.shape[-1]
    if xl.shape[-1] != n or w.shape != (n,) or b.shape != (n,) or x0.shape != xl.shape:
        raise ContractError(
            f"cross_layer dims differ: x0 {x0.shape}, xl {xl.shape}, w {w.shape}, b {b.shape}"
        )
    proj = sum_(xl * w, axis=-1, keepdims=True)
    return x0 * proj + b + xl


def cross_network(x0: Tensor, layers: list[tuple[Tensor, Tensor]]) -> Tensor:
    x = x0
    for w, b in layers:
        x = cross_layer(x0, x, w, b)
    return x


def concat_features(h_din: Tensor, h_dcn: Tensor) -> Tensor:
    return concat([h_din, h_dcn], axis=-1)


def mlp(x: Tensor, layers: list[tuple[Tensor, Tensor]], final_activation: bool) -> Tensor:
    h = x
    for i, (W, b) in enumerate(layers):
        h = dense(h, W, b)
        if final_activation or i < len(layers) - 1:
            h = relu(h)
    return h


# -- parameter construction -----------------------------------------------------
def _add_dense_stack(store: ParamStore, rng, prefix: str, sizes, in_dim: int) -> None:
    for i, out_dim in enumerate(sizes):
        store.add(f"{prefix}{i}/W", uniform_init(rng, (in_dim, out_dim), in_dim))
        store.add(f"{prefix}{i}/b", uniform_init(rng, (out_dim,), in_dim))
        in_dim = out_dim


def add_base_params(store: ParamStore, schema: FeatureSchema, cfg: TowerConfig, seed: int) -> None:
    rng = component_rng(seed, "base")
    d = schema.field_dim
    # Embedding rows use the row width as fan-in.
    store.add("base/emb/item", uniform_init(rng, (schema.item_vocab, d), d))
    for i, v in enumerate(schema.user_vocab):
        store.add(f"base/emb/user{i}", uniform_init(rng, (v, d), d))
    for i, v in enumerate(schema.ctx_vocab):
        store.add(f"base/emb/ctx{i}", uniform_init(rng, (v, d), d))
    for i, v in enumerate(schema.ad_vocab[1:], start=1):
        store.add(f"base/emb/ad{i}", uniform_init(rng, (v, d), d))
    _add_dense_stack(store, rng, "base/attn/l", (cfg.attention_hidden, 1), 4 * d)
    n = cfg.dcn_dim(schema)
    for layer in range(cfg.num_cross_layers):
        store.add(f"base/cross{layer}/w", uniform_init(rng, (n,), n))
        store.add(f"base/cross{layer}/b", uniform_init(rng, (n,), n))


def add_position_params(store: ParamStore, schema: FeatureSchema, seed: int) -> None:
    rng = component_rng(seed, "pos")
    store.add("pos/emb", uniform_init(rng, (schema.position_vocab, schema.pos_dim), schema.pos_dim))


def add_tower_params(store: ParamStore, prefix: str, in_dim: int, cfg: TowerConfig, seed: int) -> None:
    rng = component_rng(seed, prefix)
    _add_dense_stack(store, rng, f"{prefix}/enc", cfg.encoder_sizes, in_dim)
    _add_dense_stack(store, rng, f"{prefix}/head", cfg.head_sizes, cfg.z_dim())


def _layers(store: ParamStore, prefix: str, count: int) -> list[tuple[Tensor, Tensor]]:
    return [(store[f"{prefix}{i}/W"], store[f"{prefix}{i}/b"]) for i in range(count)]


# -- network -------------------------------------------------------------------------
class CTRNet:
    """Parameters plus forward passes shared by every model variant.

    ``towers`` maps a tower prefix to whether that tower consumes the
    position embedding. The position table exists only when some tower
    needs it.
    """

    def __init__(
        self,
        schema: FeatureSchema,
        cfg: TowerConfig,
        seed: int,
        towers: dict[str, bool],
        store: ParamStore | None = None,
    ):
        self.schema = schema
        self.cfg = cfg
        self.seed = seed
        self.towers = dict(towers)
        self.params = store if store is not None else ParamStore()
        add_base_params(self.params, schema, cfg, seed)
        if any(self.towers.values()):
            add_position_params(self.params, schema, seed)
        hs = cfg.hs_dim(schema)
        for prefix, uses_pos in self.towers.items():
            add_tower_params(self.params, prefix, hs + (schema.pos_dim if uses_pos else 0), cfg, seed)

    # base module ----------------------------------------------------------------
    def validate(self, batch: Dataset) -> None:
        s = self.schema
        for name, cols in (("user", s.user_vocab), ("ctx", s.ctx_vocab), ("ad", s.ad_vocab)):
            arr = getattr(batch, name)
            if arr.ndim != 2 or arr.shape[1] != len(cols):
                raise ContractError(f"field {name!r} has {arr.shape[-1]} columns, schema expects {len(cols)}")
        if batch.behaviors.shape[1] != s.max_seq_len:
            raise ContractError(
                f"behaviors padded to {batch.behaviors.shape[1]}, schema max_seq_len is {s.max_seq_len}"
            )

    def field_embeddings(self, batch: Dataset) -> list[Tensor]:
        p = self.params
        embs = [embedding(p[f"base/emb/user{i}"], batch.user[:, i]) for i in range(len(self.schema.user_vocab))]
        embs += [embedding(p[f"base/emb/ctx{i}"], batch.ctx[:, i]) for i in range(len(self.schema.ctx_vocab))]
        embs.append(embedding(p["base/emb/item"], batch.ad[:, 0]))
        embs += [embedding(p[f"base/emb/ad{i}"], batch.ad[:, i]) for i in range(1, len(self.schema.ad_vocab))]
        return embs

    def din(self, batch: Dataset, target: Tensor) -> Tensor:
        beh = embedding(self.params["base/emb/item"], batch.behaviors)
        return din_pool(
            beh,
            batch.seq_len,
            target,
            _layers(self.params, "base/attn/l", 2),
            normalize=self.cfg.normalize_attention,
        )

    def dcn(self, field_embs: list[Tensor]) -> Tensor:
        x0 = concat(field_embs, axis=-1)
        layers = [
            (self.params[f"base/cross{i}/w"], self.params[f"base/cross{i}/b"])
            for i in range(self.cfg.num_cross_layers)
        ]
        return cross_network(x0, layers)

    def base(self, batch: Dataset) -> Tensor:
        """``h_s`` for a batch; never reads ``batch.pos``."""
        self.validate(batch)
        embs = self.field_embeddings(batch)
        n_user_ctx = len(self.schema.user_vocab) + len(self.schema.ctx_vocab)
        h_din = self.din(batch, embs[n_user_ctx])
        return concat_features(h_din, self.dcn(embs))

    def position_embedding(self, pos) -> Tensor:
        pos = np.asarray(pos, dtype=np.int64)
        vocab = self.schema.position_vocab
        if pos.size and (pos.min() < 0 or pos.max() >= vocab):
            raise ContractError(f"position index outside [0, {vocab - 1}]")
        return embedding(self.params["pos/emb"], pos)

    # towers -----------------------------------------------------------------------
    def tower(self, prefix: str, x: Tensor) -> tuple[Tensor, Tensor]:
        """Returns ``(z, logit)`` with logit of shape (batch,)."""
        cfg = self.cfg
        z = mlp(x, _layers(self.params, f"{prefix}/enc", len(cfg.encoder_sizes)), final_activation=True)
        logit = mlp(z, _layers(self.params, f"{prefix}/head", len(cfg.head_sizes)), final_activation=False)
        return z, reshape(logit, (logit.shape[0],))

    def teacher_forward(self, h_s: Tensor, position_index, prefix: str = "teacher") -> tuple[Tensor, Tensor]:
        """``(z_t, y_hat_t)`` from ``h_s`` joined with the position embedding."""
        e_p = self.position_embedding(position_index)
        z, logit = self.tower(prefix, concat([h_s, e_p], axis=-1))
        return z, sigmoid(logit)

    def student_forward(self, h_s: Tensor, prefix: str = "student") -> tuple[Tensor, Tensor]:
        """``(z_s, y_hat_s)`` from ``h_s`` alone."""
        z, logit = self.tower(prefix, h_s)
        return z, sigmoid(logit)
