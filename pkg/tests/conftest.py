import numpy as np
import pytest

from hmt import synth, tokenizer as tk
from hmt.mano import FeatureVariant, default_skeleton
from hmt.tokenizer import QuantizerConfig


@pytest.fixture(scope="session")
def skel():
    return default_skeleton()


@pytest.fixture(scope="session")
def quick_tok(skel):
    """Small tokenizer trained for a few seconds; good to ~2-4 cm."""
    rng = np.random.default_rng(2024)
    windows = synth.synthetic_windows(rng, 300, FeatureVariant.D162, skel)
    cfg = QuantizerConfig(alpha=4, n_groups=2, n_layers=8, k_wrist=256, k_finger=256,
                          code_dim=64, fps=15, variant=FeatureVariant.D162,
                          ema_decay=0.97)
    tok, _ = tk.train_tokenizer(windows, cfg, epochs=6, seed=5, lr=1e-4, batch_size=64)
    return tok
