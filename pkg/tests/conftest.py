import numpy as np
import pytest

from povseg.snapshot import FrozenSnapshot


@pytest.fixture
def tiny_snapshot():
    """Small handcrafted snapshot with float32-exact payloads."""
    rng = np.random.default_rng(42)
    t_open = rng.normal(size=(3, 4)).astype(np.float32).astype(np.float64)
    z_open = rng.normal(size=(5, 4)).astype(np.float32).astype(np.float64)
    m_open = rng.uniform(0.0, 1.0, size=(6, 7, 5)).astype(np.float32).astype(np.float64)
    f = rng.normal(size=(3, 3, 4)).astype(np.float32).astype(np.float64)
    return FrozenSnapshot(t_open=t_open, z_open=z_open, m_open=m_open,
                          vocab_names=["ant", "bee", "cat"], logit_scale=2.0,
                          features=f)


@pytest.fixture(scope="session")
def bench_dir(tmp_path_factory):
    """The bundled synthetic benchmark, generated once per session."""
    from povseg.synthbench import SynthConfig, generate

    out = tmp_path_factory.mktemp("bench")
    generate(SynthConfig(), out)
    return out
