import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_sample
from oracles import FifoModel, central_difference, info_nce_scalar, rel_err
from pipeloc.augment import AugConfig
from pipeloc.encoders import PretextModel
from pipeloc.errors import ConfigError
from pipeloc.synthgen import GenConfig, generate_video
from pipeloc.pretext import (
    NegativeQueue,
    PretextConfig,
    info_nce_loss,
    make_optimizer,
    pretext_step,
    queue_push,
    train_pretext,
)


def test_equal_similarity_gives_log_three():
    q = torch.tensor([1.0, 0.0, 0.0])
    negs = torch.tensor([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    assert abs(info_nce_loss(q, q, negs, 0.3).item() - math.log(3)) < 1e-6
    assert abs(info_nce_loss(q, q, negs, 0.3).item() - 1.098612) < 1e-6


def test_orthogonal_negatives_value():
    q = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    negs = torch.tensor([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], dtype=torch.float64)
    val = info_nce_loss(q, q, negs, 0.5).item()
    assert val == pytest.approx(-math.log(math.e**2 / (math.e**2 + 2)), abs=1e-12)
    assert val == pytest.approx(0.2395447662218845, abs=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 12))
def test_large_temperature_limit(seed, n):
    g = torch.Generator().manual_seed(seed)
    q, p = torch.randn(8, generator=g, dtype=torch.float64), torch.randn(8, generator=g, dtype=torch.float64)
    negs = torch.randn(n, 8, generator=g, dtype=torch.float64)
    assert abs(info_nce_loss(q, p, negs, 1e6).item() - math.log(n + 1)) < 1e-3


@given(st.integers(0, 10_000))
def test_matches_scalar_oracle_and_order_free(seed):
    g = torch.Generator().manual_seed(seed)
    q, p = torch.randn(5, generator=g, dtype=torch.float64), torch.randn(5, generator=g, dtype=torch.float64)
    negs = torch.randn(6, 5, generator=g, dtype=torch.float64)
    val = info_nce_loss(q, p, negs, 0.2).item()
    assert val == pytest.approx(info_nce_scalar(q.tolist(), p.tolist(), negs.tolist(), 0.2), rel=1e-9)
    perm = torch.randperm(6, generator=g)
    assert info_nce_loss(q, p, negs[perm], 0.2).item() == pytest.approx(val, rel=1e-12)
    assert val >= 0


def test_tiny_temperature_is_finite():
    q = torch.tensor([1.0, 0.0])
    loss = info_nce_loss(q, torch.tensor([-1.0, 0.0]), torch.tensor([[1.0, 0.0]]), 1e-4)
    assert torch.isfinite(loss)


def test_nce_gradient_finite_difference():
    g = torch.Generator().manual_seed(0)
    q = torch.randn(8, generator=g, dtype=torch.float64, requires_grad=True)
    p = torch.randn(8, generator=g, dtype=torch.float64)
    negs = torch.randn(4, 8, generator=g, dtype=torch.float64)
    info_nce_loss(q, p, negs, 0.5).backward()
    num = central_difference(lambda z: info_nce_loss(z, p, negs, 0.5), q.detach().clone())
    assert rel_err(q.grad, num) < 1e-4


def test_nce_errors():
    with pytest.raises(ConfigError):
        info_nce_loss(torch.ones(2), torch.ones(2), torch.ones(1, 2), 0.0)
    with pytest.raises(ValueError):
        info_nce_loss(torch.ones(2), torch.ones(2), NegativeQueue.empty(4, 2), 0.1)


def test_batched_mean_reduction():
    g = torch.Generator().manual_seed(1)
    q, p, n = torch.randn(3, 4, generator=g), torch.randn(3, 4, generator=g), torch.randn(5, 4, generator=g)
    per = info_nce_loss(q, p, n, 0.1, reduction="none")
    assert per.shape == (3,)
    assert torch.allclose(info_nce_loss(q, p, n, 0.1), per.mean())
    assert torch.allclose(per[1], info_nce_loss(q[1], p[1], n, 0.1))


# -- queue -----------------------------------------------------------------------------


def test_first_push_and_zero_push():
    q = NegativeQueue.empty(5, 2)
    assert q.filled == 0
    q2 = queue_push(q, torch.ones(3, 2))
    assert q2.filled == 3 and q.filled == 0
    assert queue_push(q2, torch.zeros(0, 2)) is q2


def test_push_too_many():
    with pytest.raises(ValueError):
        queue_push(NegativeQueue.empty(2, 2), torch.ones(3, 2))


@given(st.integers(1, 8), st.lists(st.integers(0, 8), max_size=12), st.booleans())
def test_queue_matches_fifo_oracle(size, pushes, start_random):
    g = torch.Generator().manual_seed(size)
    q = NegativeQueue.random(size, 3, generator=g) if start_random else NegativeQueue.empty(size, 3)
    model = FifoModel(size, [tuple(r) for r in q.ordered().tolist()])
    counter = 0
    for b in pushes:
        b = min(b, size)
        rows = torch.arange(counter, counter + b, dtype=torch.float32)[:, None].repeat(1, 3)
        counter += b
        q = queue_push(q, rows)
        model.push([tuple(r) for r in rows.tolist()])
        assert [tuple(r) for r in q.ordered().tolist()] == model.rows
        assert q.filled == len(model.rows)


def test_one_by_one_keeps_most_recent():
    q = NegativeQueue.empty(4, 1)
    for i in range(7):
        q = queue_push(q, torch.tensor([[float(i)]]))
    assert q.ordered()[:, 0].tolist() == [3.0, 4.0, 5.0, 6.0]


def test_random_queue_rows_unit_norm():
    q = NegativeQueue.random(50, 8, torch.Generator().manual_seed(0))
    assert q.filled == 50
    assert torch.allclose(q.buffer.norm(dim=1), torch.ones(50), atol=1e-6)


# -- training step ----------------------------------------------------------------------


def _model(tiny_enc, in_dim=8):
    torch.manual_seed(0)
    return PretextModel(in_dim, tiny_enc)


def test_step_updates_key_by_momentum(tiny_enc):
    model = _model(tiny_enc)
    cfg = PretextConfig(queue_size=8, batch_size=2, m=0.9)
    batch = [make_sample(T=10, seed=i, vid=f"v{i}") for i in range(2)]
    k_before = [p.clone() for p in model.k.parameters()]
    queue = NegativeQueue.random(8, 8, torch.Generator().manual_seed(0))
    opt = make_optimizer(model, cfg)
    loss, q2 = pretext_step(batch, model, queue, opt, cfg, AugConfig(), np.random.default_rng(0))
    assert math.isfinite(loss)
    for k, k0, q in zip(model.k.parameters(), k_before, model.q.parameters()):
        assert torch.allclose(k, 0.9 * k0 + 0.1 * q, atol=1e-7)
    assert q2.head == 2
    assert torch.allclose(q2.buffer.norm(dim=1), torch.ones(8), atol=1e-6)


def test_queue_fills_by_batch(tiny_enc):
    model = _model(tiny_enc)
    cfg = PretextConfig(queue_size=6, batch_size=2)
    batch = [make_sample(T=10, seed=i, vid=f"v{i}") for i in range(2)]
    queue = queue_push(NegativeQueue.empty(6, 8), torch.nn.functional.normalize(torch.ones(1, 8)))
    opt = make_optimizer(model, cfg)
    rng = np.random.default_rng(0)
    sizes = []
    for _ in range(4):
        _, queue = pretext_step(batch, model, queue, opt, cfg, AugConfig(), rng)
        sizes.append(queue.filled)
    assert sizes == [3, 5, 6, 6]


def test_empty_batch_rejected(tiny_enc):
    model = _model(tiny_enc)
    cfg = PretextConfig()
    with pytest.raises(ValueError):
        pretext_step([], model, NegativeQueue.random(256, 8), make_optimizer(model, cfg), cfg, AugConfig(),
                     np.random.default_rng(0))


def test_loss_decreases_without_augmentation(tiny_enc):
    samples = [generate_video(GenConfig(mean_duration_s=20), i) for i in range(10)]
    torch.manual_seed(0)
    model = PretextModel(samples[0].features.concat().shape[1], tiny_enc)
    # with m=0 the key encoder tracks the query encoder exactly; large steps collapse it
    cfg = PretextConfig(lr=0.001, tau=0.2, queue_size=16, batch_size=5, m=0.0, epochs=25)
    off = AugConfig(mask_prob=0.0, shuffle_prob=0.0, noise_sigma_aug=0.0)
    losses = np.array([r["loss"] for r in train_pretext(samples, model, cfg, off, seed=0)])
    assert len(losses) == 50
    smooth = np.convolve(losses, np.ones(10) / 10, mode="valid")
    slope = np.polyfit(np.arange(len(smooth)), smooth, 1)[0]
    assert slope < 0 and smooth[-1] < 0.85 * smooth[0]


def test_training_is_deterministic(tiny_enc):
    samples = [make_sample(T=9, seed=i, vid=f"v{i}") for i in range(4)]
    cfg = PretextConfig(queue_size=8, batch_size=2, epochs=2)
    runs = []
    for _ in range(2):
        model = _model(tiny_enc)
        runs.append([r["loss"] for r in train_pretext(samples, model, cfg, AugConfig(), seed=3)])
    assert runs[0] == runs[1]


def test_config_validation():
    with pytest.raises(ConfigError):
        PretextConfig(tau=0).validate()
    with pytest.raises(ConfigError):
        PretextConfig(queue_size=4, batch_size=8).validate()
    assert PretextConfig.full_scale().queue_size == 2200
