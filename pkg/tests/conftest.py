import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from m2ae.augment import AugmentConfig
from m2ae.losses import LossWeights
from m2ae.model import ModelConfig, load_checkpoint
from m2ae.signals import make_dataset, save_dataset, split_by_subject
from m2ae.training import TrainConfig, pretrain

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_config(**kw):
    """Small model for fast unit tests: L=256, k=8 patches of 32."""
    base = dict(segment_len=256, patch_size=32, d_enc=16, enc_depth=1, dec_width=8,
                dec_depth=1, heads=2, dropout=0.1, mlp_ratio=2)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_dataset():
    """20 subjects x 3 pairs at L=256, split 16/2/2."""
    return split_by_subject(make_dataset(20, 3, seed=1, L=256, fs=25.6), seed=0)


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """Desk-dims pretraining on 64 subjects x 4 pairs, seed 0 (about 1.5 min)."""
    out = tmp_path_factory.mktemp("toy")
    ds = split_by_subject(make_dataset(64, 4, seed=0), seed=0)
    save_dataset(ds, out / "data.m2ae")
    t0 = time.perf_counter()
    state = pretrain(ds, ModelConfig(), TrainConfig(seed=0), LossWeights(), AugmentConfig(), out_dir=out / "run")
    elapsed = time.perf_counter() - t0
    cfg, params = load_checkpoint(out / "run" / "best.m2ck")
    return dict(ds=ds, state=state, elapsed=elapsed, cfg=cfg, params=params, dir=out)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance report ------------------------------------------------------

_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for a numbered acceptance criterion."""
    table = request.config.stash[_ACCEPTANCE]

    def record(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        table[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash.get(_ACCEPTANCE, {})
    if table:
        terminalreporter.section("acceptance criteria")
        for number in sorted(table):
            terminalreporter.write_line(table[number])
