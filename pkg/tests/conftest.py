import numpy as np
import pytest

from dualflow.model import Chunk, Condition, DualModeModel, ModelConfig, StreamContext, make_query
from dualflow.synthdata import Regime, StreamSpec, gen_streams


@pytest.fixture
def small_cfg():
    return ModelConfig(hidden=16, layers=2, heads=2)


@pytest.fixture
def small_model(small_cfg):
    return DualModeModel.create(small_cfg, seed=7)


def make_probe(cfg: ModelConfig, n=3, n_ctx=(0, 1, 2), t1=0.3, t2=0.3, seed=0, regime=None):
    """Noisy current chunks with ground-truth histories of the given lengths."""
    regime = regime or Regime.oscillator()
    chunks, conds = gen_streams(regime, StreamSpec(max(n_ctx) + 1, cfg.tokens_per_chunk, cfg.d_a, cfg.d_b),
                                range(seed, seed + n))
    rng = np.random.default_rng(seed)
    ctxs, xa, xb, ts = [], [], [], []
    cur = max(n_ctx)
    for s, k in zip(chunks, n_ctx):
        ctxs.append(StreamContext(tuple(s[cur - k:cur]), K=8))
        xa.append(s[cur].a + rng.standard_normal(s[cur].a.shape))
        xb.append(s[cur].b + rng.standard_normal(s[cur].b.shape))
    return make_query(np.stack(xa), np.stack(xb), chunks[0][cur].timestamps, t1, t2, ctxs, conds)
