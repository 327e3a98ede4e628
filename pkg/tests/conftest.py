from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hybridprune.model import ModelConfig, init_model

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def small_config(**kw) -> ModelConfig:
    base = dict(layer_pattern="MFAFMF", d_e=16, d_ffn=32, m_h=4, m_d=4, g=2, d_s=4, n_att_heads=2, vocab=32)
    base.update(kw)
    return ModelConfig(**base)


def randomize(model, seed: int, scale: float = 0.3):
    """Perturb every tensor so that norms, biases and D carry signal too."""
    rng = np.random.default_rng(seed)
    return model.map_params(lambda name, v: np.asarray(v) + scale * rng.normal(size=np.shape(v))
                            if not name.endswith("A_log") else np.asarray(v))


@pytest.fixture
def cfg() -> ModelConfig:
    return small_config()


@pytest.fixture
def model(cfg):
    return randomize(init_model(cfg, seed=3), seed=4)


@pytest.fixture
def calib(cfg):
    return np.random.default_rng(7).integers(0, cfg.vocab, size=(6, 12))
