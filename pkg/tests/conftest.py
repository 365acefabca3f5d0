import sys
from pathlib import Path

import numpy as np
import pytest

from rocre.dataio import load_corpus, load_lexicon, load_relation_catalog
from rocre.model import ModelConfig, RocModel
from rocre.pair_encoder import EncoderConfig
from rocre.rel_encoder import RelEncoderConfig
from rocre.synthetic import SynthConfig, generate_synthetic
from rocre.trainer import default_vocab

FIXTURES = Path(__file__).parent / "fixtures"


def tiny_model_config(head: str = "retrieval", **encoder) -> ModelConfig:
    """Reference tiny model: hidden 8, 2 heads, 1 fusion layer, 2-layer relation encoder."""
    enc = dict(hidden=8, num_heads=2, num_fusion_layers=1, ffn_width=16, visual_dim=4, max_patches=4, max_text_len=24)
    enc.update(encoder)
    rel = RelEncoderConfig(num_layers=2, num_heads=2, ffn_width=16, max_desc_len=40)
    return ModelConfig(EncoderConfig(**enc), rel, head=head)


TINY_SYNTH = SynthConfig(
    K=3,
    n_train=4,
    n_eval=4,
    names_per_type=2,
    seed=5,
    num_patches=2,
    visual_dim=4,
    triggers_per_relation=1,
    max_filler=1,
    visual_informative_fraction=0.5,
)


@pytest.fixture(scope="session")
def tiny_data():
    return generate_synthetic(TINY_SYNTH)


@pytest.fixture
def tiny_model(tiny_data):
    train, _, catalog, _ = tiny_data
    return RocModel.initialize(tiny_model_config(), default_vocab(train, catalog), catalog, seed=3)


@pytest.fixture(scope="session")
def fixture_corpus():
    lex = load_lexicon(FIXTURES / "lexicon.json")
    return load_corpus(FIXTURES / "corpus3.jsonl", FIXTURES / "visual", lex)


@pytest.fixture(scope="session")
def fixture_catalog():
    return load_relation_catalog(FIXTURES / "catalog8.json")


def fixture_encoder_config(**changes) -> EncoderConfig:
    base = dict(hidden=8, num_heads=2, num_fusion_layers=1, ffn_width=16, visual_dim=16, max_patches=4, max_text_len=24)
    base.update(changes)
    return EncoderConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("tests.test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
