import numpy as np
import pytest

from medvlbert import tensor as T
from medvlbert.config import RunConfig, SizesConfig, load_config
from medvlbert.model import MedicalVLBert, ModelConfig

TINY_NAMES = ["alpha", "beta", "gamma"]


def tiny_config(**kw) -> ModelConfig:
    base = dict(d_model=8, d_term=4, d_visual=4, d_text=4, enc_layers=1, enc_heads=2, dec_layers=1, dec_heads=2, max_len=16, max_context_len=16)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(vocab_size=12, grid=(2, 2, 3), seed=0, **kw) -> MedicalVLBert:
    return MedicalVLBert(tiny_config(init_seed=seed, **kw), TINY_NAMES, vocab_size, grid)


def tiny_run_config(**overrides) -> RunConfig:
    """A run small enough to train in a few seconds."""
    flat = {
        "sizes.textbook_docs": "24",
        "sizes.train": "32",
        "sizes.val": "8",
        "sizes.test": "8",
        "sizes_b.textbook_docs": "16",
        "sizes_b.train": "16",
        "sizes_b.val": "8",
        "sizes_b.test": "8",
        "data.n_terms": "4",
        "data.grid": "4,4,4",
        "model.d_model": "16",
        "model.d_term": "8",
        "model.d_visual": "8",
        "model.d_text": "8",
        "model.enc_layers": "1",
        "model.dec_layers": "1",
        "model.enc_heads": "2",
        "model.dec_heads": "2",
        "epochs": "1",
        "transfer.epochs_a": "1",
        "transfer.epochs_b": "1",
    }
    flat.update({k: str(v) for k, v in overrides.items()})
    return load_config(None, flat)


@pytest.fixture
def float64():
    with T.default_dtype(np.float64):
        yield


@pytest.fixture(scope="session")
def tiny_bundle():
    from medvlbert.experiments import generate_bundle

    bundle, _ = generate_bundle(tiny_run_config())
    return bundle


# acceptance criteria record one verdict line each; printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
