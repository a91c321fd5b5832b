import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from pipeloc.datamodel import FeatureSequence, VideoSample
from pipeloc.encoders import EncoderConfig

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

torch.set_num_threads(1)


def make_sample(T=12, D=4, D_vo=2, n_pad=0, seed=0, points=(), intervals=None, vid="v0", fps=3.0):
    rng = np.random.default_rng(seed)
    n = T + n_pad
    st = np.zeros((n, D), np.float32)
    dy = np.zeros((n, D), np.float32)
    vo = np.zeros((n, D_vo), np.float32)
    st[:T] = rng.standard_normal((T, D))
    dy[:T] = rng.standard_normal((T, D))
    vo[:T] = rng.standard_normal((T, D_vo))
    mask = np.zeros(n, bool)
    mask[:T] = True
    return VideoSample(vid, fps, FeatureSequence(st, dy, vo, mask), points, intervals)


@pytest.fixture
def tiny_enc():
    return EncoderConfig(d_model=8, n_layers_seq=1, n_heads=2, ffn_dim=16, n_latents_video=2,
                         n_layers_decoder=1, dropout=0.0)


@pytest.fixture
def report_line(capsys):
    """Print a line straight to the terminal, bypassing capture."""

    def emit(text):
        with capsys.disabled():
            print(text)

    return emit
