import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("lptlab", deadline=None, max_examples=30)
settings.load_profile("lptlab")

CACHE_DIR = Path(__file__).parent.parent / ".cache" / "test-backbones"


def cached_pretrain(tag: str, config, corpus_sentences: int, corpus_seed: int,
                    steps: int, batch_size: int, peak_lr: float, seed: int):
    """Pretrain a toy backbone once and keep the checkpoint on disk.

    Pretraining is bitwise deterministic, so the cache is purely a
    speed-up; deleting .cache reproduces identical weights.
    """
    from lptlab.checkpoint import load_checkpoint, save_checkpoint
    from lptlab.encoder import pretrain_toy
    from lptlab.engine import Backbone
    from lptlab.toydata import build_toy_vocab, corpus_token_ids, generate_corpus

    vocab = build_toy_vocab()
    path = CACHE_DIR / f"{tag}.ckpt"
    if path.exists():
        weights = load_checkpoint(path)
    else:
        corpus = corpus_token_ids(vocab, generate_corpus(corpus_sentences, corpus_seed),
                                  config.max_seq_len)
        weights, _ = pretrain_toy(config, corpus, vocab.mask_id, vocab.special_ids,
                                  steps=steps, batch_size=batch_size,
                                  peak_lr=peak_lr, seed=seed)
        CACHE_DIR.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, weights)
    return Backbone(config=config, weights=weights, vocab=vocab)


@pytest.fixture(scope="session")
def mini_backbone():
    """Small pretrained backbone shared by engine/analysis/cli tests."""
    from lptlab.encoder import ModelConfig

    config = ModelConfig(n_layers=4, d_model=32, n_heads=2, d_ff=64,
                         vocab_size=512, max_seq_len=64)
    return cached_pretrain("mini-l4-d32-v1", config, corpus_sentences=1200,
                           corpus_seed=42, steps=800, batch_size=8,
                           peak_lr=1e-3, seed=7)
