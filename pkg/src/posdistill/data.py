"""Synthetic position-biased click logs, JSONL ingestion and splits.

Clicks follow the examination hypothesis: an impression at position ``k`` is
examined with probability ``(k + 1) ** -eta`` and, once examined, clicked with
its true relevance. Positions come from a logging policy that sorts each
request's candidates by relevance plus Gaussian noise, so position and
relevance are confounded the way they are in production logs.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .nn import ContractError

JSONL_FIELDS = ("user", "ctx", "ad", "behaviors", "pos", "click", "rel", "id")
REQUIRED_FIELDS = ("user", "ctx", "ad", "behaviors", "pos", "click")


@dataclass(frozen=True)
class FeatureSchema:
    """Vocabulary sizes and embedding widths of every sparse input.

    Ad field 0 is the item id and shares the behavior-item table, so
    ``ad_vocab[0]`` must equal ``item_vocab``.
    """

    user_vocab: tuple[int, ...] = (2000, 8, 4)
    ctx_vocab: tuple[int, ...] = (24, 4)
    ad_vocab: tuple[int, ...] = (1000, 25)
    item_vocab: int = 1000
    num_positions: int = 10
    max_seq_len: int = 20
    field_dim: int = 8
    pos_dim: int = 4

    def __post_init__(self):
        object.__setattr__(self, "user_vocab", tuple(int(v) for v in self.user_vocab))
        object.__setattr__(self, "ctx_vocab", tuple(int(v) for v in self.ctx_vocab))
        object.__setattr__(self, "ad_vocab", tuple(int(v) for v in self.ad_vocab))
        sizes = [*self.user_vocab, *self.ctx_vocab, *self.ad_vocab, self.item_vocab]
        if any(v < 1 for v in sizes):
            raise ContractError(f"vocab sizes must be >= 1, got {sizes}")
        if not self.ad_vocab or self.ad_vocab[0] != self.item_vocab:
            raise ContractError(
                f"ad field 0 is the item id: ad_vocab[0]={self.ad_vocab[:1]} "
                f"must equal item_vocab={self.item_vocab}"
            )
        for name in ("num_positions", "max_seq_len", "field_dim", "pos_dim"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")

    @property
    def position_vocab(self) -> int:
        return self.num_positions + 1

    @property
    def unknown_position(self) -> int:
        return self.num_positions

    @property
    def num_fields(self) -> int:
        return len(self.user_vocab) + len(self.ctx_vocab) + len(self.ad_vocab)


@dataclass
class Dataset:
    """Column-oriented impressions. ``rel`` is NaN where unknown."""

    user: np.ndarray
    ctx: np.ndarray
    ad: np.ndarray
    behaviors: np.ndarray
    seq_len: np.ndarray
    pos: np.ndarray
    click: np.ndarray
    rel: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.pos)

    def subset(self, idx) -> "Dataset":
        return Dataset(**{k: v[idx] for k, v in self.__dict__.items()})

    def with_positions(self, pos: np.ndarray) -> "Dataset":
        d = dict(self.__dict__)
        d["pos"] = np.asarray(pos, dtype=np.int64)
        return Dataset(**d)

    @property
    def has_relevance(self) -> bool:
        return len(self) > 0 and not np.isnan(self.rel).any()

    def batches(self, batch_size: int, order: np.ndarray | None = None) -> Iterator["Dataset"]:
        order = np.arange(len(self)) if order is None else order
        for start in range(0, len(order), batch_size):
            yield self.subset(order[start : start + batch_size])

    @classmethod
    def empty(cls, schema: FeatureSchema) -> "Dataset":
        return cls(
            user=np.zeros((0, len(schema.user_vocab)), np.int64),
            ctx=np.zeros((0, len(schema.ctx_vocab)), np.int64),
            ad=np.zeros((0, len(schema.ad_vocab)), np.int64),
            behaviors=np.zeros((0, schema.max_seq_len), np.int64),
            seq_len=np.zeros(0, np.int64),
            pos=np.zeros(0, np.int64),
            click=np.zeros(0, np.int64),
            rel=np.zeros(0, np.float64),
            ids=np.zeros(0, np.int64),
        )

    @classmethod
    def concat(cls, parts: Iterable["Dataset"]) -> "Dataset":
        parts = list(parts)
        return cls(**{k: np.concatenate([p.__dict__[k] for p in parts]) for k in parts[0].__dict__})


@dataclass
class DatasetSplit:
    train: Dataset
    validation: Dataset
    test: Dataset
    manifest: dict = field(default_factory=dict)


@dataclass(frozen=True)
class GenConfig:
    n_train: int = 200_000
    n_validation: int = 10_000
    n_test: int = 20_000
    num_positions: int = 10
    eta: float = 1.0
    user_vocab: tuple[int, ...] = (2000, 8, 4)
    ctx_vocab: tuple[int, ...] = (24, 4)
    item_vocab: int = 1000
    num_categories: int = 25
    max_seq_len: int = 20
    # Fraction of a user's behaviors drawn from their favourite category.
    interest_purity: float = 0.7
    hidden_dim: int = 8
    base_logit: float = -1.5
    field_scale: float = 0.3
    user_item_scale: float = 0.6
    behavior_item_scale: float = 1.5
    # Per-impression relevance noise the features cannot explain.
    noise: float = 0.0
    logging_noise: float = 1.0
    # Share of the logging-noise variance that is a fixed per-item offset
    # (the logging ranker's systematic preferences) rather than fresh per impression.
    logging_item_share: float = 0.0
    relevance_seed: int = 7

    def __post_init__(self):
        object.__setattr__(self, "user_vocab", tuple(int(v) for v in self.user_vocab))
        object.__setattr__(self, "ctx_vocab", tuple(int(v) for v in self.ctx_vocab))
        sizes = [*self.user_vocab, *self.ctx_vocab, self.item_vocab, self.num_categories]
        if any(v < 1 for v in sizes):
            raise ContractError(f"feature cardinalities must be >= 1, got {sizes}")
        if self.num_positions < 1:
            raise ContractError("num_positions must be >= 1")
        if not 0.0 <= self.logging_item_share <= 1.0:
            raise ContractError(f"logging_item_share must lie in [0, 1], got {self.logging_item_share}")
        if self.eta < 0:
            raise ContractError(f"eta must be >= 0, got {self.eta}")
        for name in ("n_train", "n_validation", "n_test"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")

    def schema(self, field_dim: int = 8, pos_dim: int = 4) -> FeatureSchema:
        return FeatureSchema(
            user_vocab=self.user_vocab,
            ctx_vocab=self.ctx_vocab,
            ad_vocab=(self.item_vocab, self.num_categories),
            item_vocab=self.item_vocab,
            num_positions=self.num_positions,
            max_seq_len=self.max_seq_len,
            field_dim=field_dim,
            pos_dim=pos_dim,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def propensity(num_positions: int, eta: float) -> np.ndarray:
    """Examination probability ``(k + 1) ** -eta`` for ``k = 0 .. K-1``."""
    return np.arange(1, num_positions + 1, dtype=np.float64) ** (-float(eta))


def click_probability(rel, pos, num_positions: int, eta: float) -> np.ndarray:
    return propensity(num_positions, eta)[np.asarray(pos)] * np.asarray(rel)


def sample_clicks(prob: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli draws; the generator uses exactly this sampler."""
    prob = np.asarray(prob, dtype=np.float64)
    return (rng.random(prob.shape) < prob).astype(np.int64)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


class RelevanceModel:
    """Hidden ground truth: relevance logit as a function of the features.

    Per-value scalar effects for every field, plus two bilinear affinities
    over hidden vectors: user vs. target item, and mean behavior item vs.
    target item.
    """

    def __init__(self, cfg: GenConfig):
        rng = np.random.default_rng(cfg.relevance_seed)
        h = cfg.hidden_dim
        self.cfg = cfg
        self.user_effects = [rng.normal(0, cfg.field_scale, v) for v in cfg.user_vocab]
        self.ctx_effects = [rng.normal(0, cfg.field_scale, v) for v in cfg.ctx_vocab]
        self.item_effect = rng.normal(0, cfg.field_scale, cfg.item_vocab)
        self.cat_effect = rng.normal(0, cfg.field_scale, cfg.num_categories)
        self.item_category = rng.integers(0, cfg.num_categories, cfg.item_vocab)
        cat_vec = rng.normal(0, 1, (cfg.num_categories, h))
        self.item_vec = (cat_vec[self.item_category] + 0.5 * rng.normal(0, 1, (cfg.item_vocab, h))) / np.sqrt(1.25 * h)
        self.user_vec = rng.normal(0, 1, (cfg.user_vocab[0], h)) / np.sqrt(h)
        self.user_interest = rng.integers(0, cfg.num_categories, cfg.user_vocab[0])
        self.items_by_cat = [np.flatnonzero(self.item_category == c) for c in range(cfg.num_categories)]
        self.logging_offset = rng.normal(0, 1, cfg.item_vocab)

    def logit(self, user, ctx, item, behaviors, seq_len) -> np.ndarray:
        cfg = self.cfg
        s = np.full(len(item), cfg.base_logit)
        for f, eff in enumerate(self.user_effects):
            s += eff[user[:, f]]
        for f, eff in enumerate(self.ctx_effects):
            s += eff[ctx[:, f]]
        s += self.item_effect[item] + self.cat_effect[self.item_category[item]]
        iv = self.item_vec[item]
        s += cfg.user_item_scale * np.einsum("nd,nd->n", self.user_vec[user[:, 0]], iv)
        mask = np.arange(behaviors.shape[1])[None, :] < seq_len[:, None]
        bsum = (self.item_vec[behaviors] * mask[..., None]).sum(axis=1)
        bmean = bsum / np.maximum(seq_len, 1)[:, None]
        s += cfg.behavior_item_scale * np.sqrt(cfg.hidden_dim) * np.einsum("nd,nd->n", bmean, iv)
        return s


def _generate_tranche(
    cfg: GenConfig, model: RelevanceModel, n: int, rng: np.random.Generator, id_offset: int
) -> tuple[Dataset, np.ndarray]:
    """Impressions for ``ceil(n / K)`` requests plus each row's request index."""
    K = cfg.num_positions
    n_req = math.ceil(n / K)
    L = cfg.max_seq_len

    user = np.stack([rng.integers(0, v, n_req) for v in cfg.user_vocab], axis=1)
    ctx = np.stack([rng.integers(0, v, n_req) for v in cfg.ctx_vocab], axis=1)
    seq_len = rng.integers(0, L + 1, n_req)
    # Behaviors: mostly items from the user's favourite category.
    fav = model.user_interest[user[:, 0]]
    from_fav = rng.random((n_req, L)) < cfg.interest_purity
    any_item = rng.integers(0, cfg.item_vocab, (n_req, L))
    fav_item = np.empty((n_req, L), dtype=np.int64)
    for c in range(cfg.num_categories):
        rows = np.flatnonzero(fav == c)
        pool = model.items_by_cat[c]
        if len(rows) == 0:
            continue
        if len(pool) == 0:
            fav_item[rows] = any_item[rows]
        else:
            fav_item[rows] = pool[rng.integers(0, len(pool), (len(rows), L))]
    behaviors = np.where(from_fav, fav_item, any_item)
    behaviors[np.arange(L)[None, :] >= seq_len[:, None]] = 0

    items = rng.integers(0, cfg.item_vocab, (n_req, K))

    # Expand request-level features to one row per candidate.
    rep = np.repeat(np.arange(n_req), K)
    flat_items = items.reshape(-1)
    score = model.logit(user[rep], ctx[rep], flat_items, behaviors[rep], seq_len[rep])
    if cfg.noise > 0:
        score = score + rng.normal(0, cfg.noise, score.shape)
    rel = _sigmoid(score)
    share = cfg.logging_item_share
    noisy = (
        score.reshape(n_req, K)
        + cfg.logging_noise * math.sqrt(share) * model.logging_offset[items]
        + rng.normal(0, cfg.logging_noise * math.sqrt(1.0 - share), (n_req, K))
    )
    # Rank 0 is the highest noisy score.
    order = np.argsort(-noisy, axis=1, kind="stable")
    pos = np.empty((n_req, K), dtype=np.int64)
    np.put_along_axis(pos, order, np.arange(K)[None, :].repeat(n_req, 0), axis=1)
    pos = pos.reshape(-1)
    click = sample_clicks(click_probability(rel, pos, K, cfg.eta), rng)

    ad = np.stack([flat_items, model.item_category[flat_items]], axis=1)
    ds = Dataset(
        user=user[rep],
        ctx=ctx[rep],
        ad=ad,
        behaviors=behaviors[rep],
        seq_len=seq_len[rep],
        pos=pos,
        click=click,
        rel=rel,
        ids=np.arange(id_offset, id_offset + n_req * K, dtype=np.int64),
    )
    return ds, rep


def generate(cfg: GenConfig, seed: int = 0) -> DatasetSplit:
    """Draw train/validation/test splits; deterministic in ``(cfg, seed)``.

    Train and validation come from one "training period" pool split by
    request; test is a separately drawn later tranche.
    """
    model = RelevanceModel(cfg)
    rng = np.random.default_rng([int(seed), 0])
    pool, req = _generate_tranche(cfg, model, cfg.n_train + cfg.n_validation, rng, 0)
    n_req = int(req.max()) + 1 if len(req) else 0
    val_req_count = math.ceil(cfg.n_validation / cfg.num_positions)
    val_req = np.zeros(n_req, dtype=bool)
    val_req[rng.permutation(n_req)[:val_req_count]] = True
    is_val = val_req[req]
    train = pool.subset(np.flatnonzero(~is_val)[: cfg.n_train])
    validation = pool.subset(np.flatnonzero(is_val)[: cfg.n_validation])

    test_rng = np.random.default_rng([int(seed), 1])
    test, _ = _generate_tranche(cfg, model, cfg.n_test, test_rng, len(pool))
    test = test.subset(np.arange(cfg.n_test))

    manifest = {
        "seed": int(seed),
        "config_hash": config_hash(cfg.to_dict()),
        "counts": {"train": len(train), "validation": len(validation), "test": len(test)},
        "num_positions": cfg.num_positions,
        "eta": cfg.eta,
    }
    return DatasetSplit(train, validation, test, manifest)


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# -- analysis ------------------------------------------------------------------
def empirical_ctr_by_position(dataset: Dataset, num_positions: int) -> list[dict]:
    """Impressions, clicks and CTR per logged position (CTR is None if unseen)."""
    if len(dataset) == 0:
        raise ContractError("empirical_ctr_by_position needs a non-empty dataset")
    imps = np.bincount(dataset.pos, minlength=num_positions)[:num_positions]
    clicks = np.bincount(dataset.pos, weights=dataset.click, minlength=num_positions)[:num_positions]
    rows = []
    for k in range(num_positions):
        n = int(imps[k])
        c = int(clicks[k])
        rows.append({"position": k, "impressions": n, "clicks": c, "ctr": (c / n) if n else None})
    return rows


# -- JSONL -----------------------------------------------------------------------
def _example_line(ds: Dataset, i: int) -> str:
    rec = {
        "id": int(ds.ids[i]),
        "user": ds.user[i].tolist(),
        "ctx": ds.ctx[i].tolist(),
        "ad": ds.ad[i].tolist(),
        "behaviors": ds.behaviors[i, : ds.seq_len[i]].tolist(),
        "pos": int(ds.pos[i]),
        "click": int(ds.click[i]),
    }
    if not np.isnan(ds.rel[i]):
        rec["rel"] = float(ds.rel[i])
    return json.dumps(rec, separators=(",", ":"))


def write_jsonl(ds: Dataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(ds)):
            fh.write(_example_line(ds, i))
            fh.write("\n")


def _check_indices(values, vocab, field_name, lineno):
    for v in values:
        if not isinstance(v, int) or isinstance(v, bool):
            raise ContractError(f"line {lineno}: field {field_name!r} must hold integers, got {v!r}")
    for v, size in zip(values, vocab):
        if not 0 <= v < size:
            raise ContractError(
                f"line {lineno}: field {field_name!r} index {v} outside vocab size {size}"
            )


def load_jsonl(path: str | Path, schema: FeatureSchema) -> Dataset:
    """Parse one impression per line, validating every index against ``schema``."""
    cols = {k: [] for k in ("user", "ctx", "ad", "behaviors", "seq_len", "pos", "click", "rel", "ids")}
    L = schema.max_seq_len
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ContractError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise ContractError(f"{path}: line {lineno}: expected an object")
            unknown = sorted(set(rec) - set(JSONL_FIELDS))
            if unknown:
                raise ContractError(f"{path}: line {lineno}: unknown field(s) {unknown}")
            missing = [f for f in REQUIRED_FIELDS if f not in rec]
            if missing:
                raise ContractError(f"{path}: line {lineno}: missing required field(s) {missing}")
            for name, vocab in (("user", schema.user_vocab), ("ctx", schema.ctx_vocab), ("ad", schema.ad_vocab)):
                vals = rec[name]
                if not isinstance(vals, list) or len(vals) != len(vocab):
                    raise ContractError(
                        f"{path}: line {lineno}: field {name!r} needs {len(vocab)} indices"
                    )
                _check_indices(vals, vocab, name, lineno)
            beh = rec["behaviors"]
            if not isinstance(beh, list) or len(beh) > L:
                raise ContractError(
                    f"{path}: line {lineno}: field 'behaviors' must be a list of at most {L} items"
                )
            _check_indices(beh, [schema.item_vocab] * len(beh), "behaviors", lineno)
            pos = rec["pos"]
            if not isinstance(pos, int) or not 0 <= pos < schema.num_positions:
                raise ContractError(
                    f"{path}: line {lineno}: field 'pos' value {pos!r} outside [0, {schema.num_positions})"
                )
            if rec["click"] not in (0, 1) or isinstance(rec["click"], bool):
                raise ContractError(f"{path}: line {lineno}: field 'click' must be 0 or 1")
            rel = rec.get("rel")
            if rel is not None and not (isinstance(rel, (int, float)) and 0.0 <= rel <= 1.0):
                raise ContractError(f"{path}: line {lineno}: field 'rel' must be a probability")
            cols["user"].append(rec["user"])
            cols["ctx"].append(rec["ctx"])
            cols["ad"].append(rec["ad"])
            cols["behaviors"].append(beh + [0] * (L - len(beh)))
            cols["seq_len"].append(len(beh))
            cols["pos"].append(pos)
            cols["click"].append(rec["click"])
            cols["rel"].append(np.nan if rel is None else float(rel))
            cols["ids"].append(int(rec.get("id", len(cols["ids"]))))
    if not cols["pos"]:
        return Dataset.empty(schema)
    return Dataset(
        user=np.asarray(cols["user"], dtype=np.int64),
        ctx=np.asarray(cols["ctx"], dtype=np.int64),
        ad=np.asarray(cols["ad"], dtype=np.int64),
        behaviors=np.asarray(cols["behaviors"], dtype=np.int64),
        seq_len=np.asarray(cols["seq_len"], dtype=np.int64),
        pos=np.asarray(cols["pos"], dtype=np.int64),
        click=np.asarray(cols["click"], dtype=np.int64),
        rel=np.asarray(cols["rel"], dtype=np.float64),
        ids=np.asarray(cols["ids"], dtype=np.int64),
    )


SPLIT_FILES = {"train": "train.jsonl", "validation": "validation.jsonl", "test": "test.jsonl"}


def write_split(split: DatasetSplit, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, fname in SPLIT_FILES.items():
        write_jsonl(getattr(split, name), out / fname)
    manifest = dict(split.manifest, files=SPLIT_FILES)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_split(data_dir: str | Path, schema: FeatureSchema) -> DatasetSplit:
    d = Path(data_dir)
    manifest_path = d / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    parts = {name: load_jsonl(d / fname, schema) for name, fname in SPLIT_FILES.items()}
    return DatasetSplit(manifest=manifest, **parts)
