import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vdrank.model import ModelConfig  # noqa: E402
from vdrank.synthetic import generate_synthetic  # noqa: E402
from vdrank.train import RunConfig, load_corpus  # noqa: E402

TINY_DATA = dict(seed=3, num_images=30, vocab_size=80, n_c=10, k=4, d_v=8, rounds_per_dialog=4, vqa_per_image=3)


def tiny_run_config(paths, **over) -> RunConfig:
    model = ModelConfig(num_blocks=1, num_heads=2, hidden_dim=16, ffn_dim=32, vocab_size=80, max_positions=64,
                        visual_dim=8, regions_per_image=4, init_std=0.1)
    flat = dict(seed=0, batch_size=8, base_lr=1e-3, phase1_epochs=2, phase2_epochs=1, train_dialogs=str(paths.train_dialogs),
                val_dialogs=str(paths.val_dialogs), vqa=str(paths.vqa), features=str(paths.features))
    flat.update(model.to_dict())
    flat.update(over)
    return RunConfig.from_flat(flat)


@pytest.fixture(scope="session")
def tiny_paths(tmp_path_factory):
    return generate_synthetic(out_dir=tmp_path_factory.mktemp("tiny"), **TINY_DATA)


@pytest.fixture(scope="session")
def tiny_corpus(tiny_paths):
    cfg = tiny_run_config(tiny_paths)
    corpus = load_corpus(cfg)
    return cfg, corpus


@pytest.fixture
def tiny_config(tiny_paths, tiny_corpus):
    cfg = tiny_run_config(tiny_paths)
    cfg.model.vocab_size = len(tiny_corpus[1].vocab)
    return cfg
