import numpy as np
import pytest

from posdistill.data import Dataset, FeatureSchema, GenConfig, generate
from posdistill.model import TowerConfig

SMALL_GEN = GenConfig(
    n_train=2000, n_validation=500, n_test=1000,
    user_vocab=(50, 4, 3), ctx_vocab=(6, 3), item_vocab=40, num_categories=5, max_seq_len=6,
)


def random_dataset(schema: FeatureSchema, n: int, seed: int = 0) -> Dataset:
    """Schema-valid random impressions with clicks drawn at 20%."""
    rng = np.random.default_rng(seed)
    seq_len = rng.integers(0, schema.max_seq_len + 1, size=n)
    behaviors = rng.integers(0, schema.item_vocab, size=(n, schema.max_seq_len))
    behaviors[np.arange(schema.max_seq_len)[None, :] >= seq_len[:, None]] = 0
    return Dataset(
        user=np.stack([rng.integers(0, v, n) for v in schema.user_vocab], axis=1),
        ctx=np.stack([rng.integers(0, v, n) for v in schema.ctx_vocab], axis=1),
        ad=np.stack([rng.integers(0, v, n) for v in schema.ad_vocab], axis=1),
        behaviors=behaviors,
        seq_len=seq_len,
        pos=rng.integers(0, schema.num_positions, n),
        click=(rng.random(n) < 0.2).astype(np.int64),
        rel=rng.random(n),
        ids=np.arange(n),
    )


@pytest.fixture(scope="session")
def small_schema() -> FeatureSchema:
    return SMALL_GEN.schema(field_dim=4, pos_dim=3)


@pytest.fixture(scope="session")
def small_tower() -> TowerConfig:
    return TowerConfig(encoder_sizes=(8, 6), head_sizes=(4, 1), attention_hidden=5)


@pytest.fixture(scope="session")
def small_split():
    return generate(SMALL_GEN, seed=0)


# -- acceptance summary ------------------------------------------------------------------------
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def default_protocol():
    """Sweep + 5-model x 5-seed comparison on the default synthetic set (slow)."""
    import time

    from posdistill.distill import TrainConfig
    from posdistill.experiment import full_protocol

    gen = GenConfig()
    split = generate(gen, seed=0)
    schema = gen.schema()
    start = time.perf_counter()
    result = full_protocol(split, schema, TowerConfig(), TrainConfig(), keep_models=True)
    return {"split": split, "schema": schema, "result": result, "seconds": time.perf_counter() - start}
