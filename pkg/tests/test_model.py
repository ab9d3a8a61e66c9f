import math

import numpy as np
import pytest
import torch

from wildvqa.errors import CheckpointError, NumericError, ShapeError
from wildvqa.model import (ModelConfig, QualityModel, forward, load_checkpoint, recur, reduce, save_checkpoint,
                           score_frames)
from wildvqa.pooling import PoolingConfig, pool


def small_model(D=8, R=6, H=4, seed=0, recurrent=True, pooling=PoolingConfig(tau=3)):
    return QualityModel(ModelConfig(feature_dim=D, reduced_dim=R, hidden_dim=H, recurrent=recurrent,
                                    pooling=pooling), seed=seed, dtype=torch.float64)


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def loop_gru(x, Wi, Wh, b, H):
    """Scalar-loop reference of the gated recurrence."""
    h = [0.0] * H
    out = []
    for xt in x:
        z, r, n = [0.0] * H, [0.0] * H, [0.0] * H
        for j in range(H):
            az = b[j] + sum(Wi[j][k] * xt[k] for k in range(len(xt))) + sum(Wh[j][k] * h[k] for k in range(H))
            ar = b[H + j] + sum(Wi[H + j][k] * xt[k] for k in range(len(xt))) + \
                sum(Wh[H + j][k] * h[k] for k in range(H))
            z[j], r[j] = sigmoid(az), sigmoid(ar)
        for j in range(H):
            an = b[2 * H + j] + sum(Wi[2 * H + j][k] * xt[k] for k in range(len(xt))) + \
                sum(Wh[2 * H + j][k] * r[k] * h[k] for k in range(H))
            n[j] = math.tanh(an)
        h = [z[j] * h[j] + (1 - z[j]) * n[j] for j in range(H)]
        out.append(h)
    return np.array(out)


# -- stages ------------------------------------------------------------------------

def test_reduce_examples():
    m = small_model(D=4, R=3)
    with torch.no_grad():
        m.reduce_weight.zero_()
        m.reduce_weight[0] = 1.0
    x = reduce(torch.tensor([[1.0, 2.0, 3.0, 4.0]], dtype=torch.float64), m)
    assert x[0, 0].item() == 10.0 and x[0, 1].item() == 0.0
    with torch.no_grad():
        m.reduce_weight.zero_()
        m.reduce_bias.copy_(torch.tensor([1.0, -2.0, 0.5]))
    out = reduce(torch.randn(5, 4, dtype=torch.float64), m)
    assert torch.equal(out, torch.tensor([[1.0, -2.0, 0.5]] * 5, dtype=torch.float64))


def test_reduce_constant_features_constant_output():
    m = small_model()
    out = reduce(torch.full((6, 8), 0.3, dtype=torch.float64), m)
    assert torch.equal(out, out[:1].expand(6, -1))


def test_reduce_shape_error():
    with pytest.raises(ShapeError):
        reduce(torch.zeros(3, 5, dtype=torch.float64), small_model())


def test_recur_matches_loop_oracle():
    torch.manual_seed(0)
    m = small_model(R=5, H=4, seed=3)
    with torch.no_grad():
        m.gru_bias.copy_(torch.randn(12, dtype=torch.float64) * 0.5)
    x = torch.randn(5, 5, dtype=torch.float64)
    got = recur(x, m).detach().numpy()
    ref = loop_gru(x.tolist(), m.gru_input_weight.tolist(), m.gru_hidden_weight.tolist(), m.gru_bias.tolist(), 4)
    np.testing.assert_allclose(got, ref, atol=1e-6)


def test_recur_float32_matches_oracle():
    m = QualityModel(ModelConfig(feature_dim=8, reduced_dim=6, hidden_dim=4), seed=1)
    x = torch.randn(7, 6)
    ref = loop_gru(x.double().tolist(), m.gru_input_weight.double().tolist(), m.gru_hidden_weight.double().tolist(),
                   m.gru_bias.double().tolist(), 4)
    np.testing.assert_allclose(m.recur(x).detach().double().numpy(), ref, atol=1e-6)


def test_recur_zero_weights_stays_zero():
    m = small_model()
    with torch.no_grad():
        m.gru_input_weight.zero_()
        m.gru_hidden_weight.zero_()
    assert torch.equal(recur(torch.randn(9, 6, dtype=torch.float64), m), torch.zeros(9, 4, dtype=torch.float64))


def test_recur_single_step():
    m = small_model()
    x = torch.randn(3, 6, dtype=torch.float64)
    one = recur(x[:1], m).detach()
    assert one.shape == (1, 4)
    ref = loop_gru(x[:1].tolist(), m.gru_input_weight.tolist(), m.gru_hidden_weight.tolist(), m.gru_bias.tolist(), 4)
    np.testing.assert_allclose(one.numpy(), ref, atol=1e-12)


def test_recur_non_finite_names_frame():
    m = small_model()
    x = torch.randn(6, 6, dtype=torch.float64)
    x[4, 0] = float("nan")
    with pytest.raises(NumericError) as err:
        recur(x, m)
    assert err.value.frame_index == 4


def test_score_frames_examples():
    m = small_model(H=4)
    h = torch.randn(5, 4, dtype=torch.float64)
    with torch.no_grad():
        m.head_weight.zero_()
        m.head_bias.fill_(2.5)
    assert torch.equal(score_frames(h, m), torch.full((5,), 2.5, dtype=torch.float64))
    with torch.no_grad():
        m.head_weight.zero_()
        m.head_weight[0, 0] = 1.0
        m.head_bias.zero_()
    assert torch.equal(score_frames(h, m), h[:, 0])
    m2 = small_model(seed=9)
    with torch.no_grad():
        m2.head_bias.fill_(-0.7)
    ref = h.numpy() @ m2.head_weight.detach().numpy()[0] - 0.7
    np.testing.assert_allclose(score_frames(h, m2).detach().numpy(), ref, atol=1e-6)
    with pytest.raises(ShapeError):
        score_frames(torch.zeros(2, 3, dtype=torch.float64), m)


# -- full pass ---------------------------------------------------------------------------

def test_forward_composition():
    m = small_model(seed=2)
    f = torch.randn(11, 8, dtype=torch.float64)
    Q, q = forward(f, m)
    expected_q = score_frames(recur(reduce(f, m), m), m)
    assert torch.equal(q, expected_q)
    assert Q.item() == pool(expected_q, m.cfg.pooling).Q.item()
    assert q.shape == (11,)


@pytest.mark.parametrize("recurrent", [True, False])
def test_zero_weight_collapse(recurrent):
    m = small_model(recurrent=recurrent)
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
        m.head_bias.fill_(3.25)
    for T in (1, 4, 17):
        Q, q = m(torch.randn(T, 8, dtype=torch.float64) * 10)
        assert Q.item() == 3.25
        assert torch.equal(q, torch.full((T,), 3.25, dtype=torch.float64))


def test_identical_videos_identical_outputs():
    m = small_model(seed=4).eval()
    f = torch.randn(9, 8, dtype=torch.float64)
    a, b = m(f), m(f.clone())
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_output_length_matches_input():
    m = small_model()
    for T in (1, 2, 13, 40):
        assert m(torch.randn(T, 8, dtype=torch.float64))[1].shape == (T,)


def _finite_difference_check(model, f, eps=1e-4, rtol=1e-3):
    model.zero_grad()
    Q, _ = model(f)
    Q.backward()
    checked = 0
    for name, p in model.named_parameters():
        analytic = p.grad.detach().clone().reshape(-1)
        flat = p.data.reshape(-1)
        for k in range(flat.numel()):
            orig = flat[k].item()
            with torch.no_grad():
                flat[k] = orig + eps
                up = model(f)[0].item()
                flat[k] = orig - eps
                down = model(f)[0].item()
                flat[k] = orig
            fd = (up - down) / (2 * eps)
            a = analytic[k].item()
            assert abs(a - fd) <= rtol * max(abs(a), abs(fd)) + 1e-8, (name, k, a, fd)
            checked += 1
    return checked


@pytest.mark.parametrize("seed", [0, 1])
def test_parameter_gradients_match_finite_differences(seed):
    torch.manual_seed(seed)
    m = QualityModel(ModelConfig(feature_dim=8, reduced_dim=6, hidden_dim=4, pooling=PoolingConfig(tau=4)),
                     seed=seed, dtype=torch.float64)
    with torch.no_grad():
        m.head_weight.mul_(20.0)
    f = torch.randn(20, 8, dtype=torch.float64)
    q = m.frame_scores(f).detach()
    assert len(set(np.round(q.numpy(), 12))) == 20  # no min ties at this point
    n = _finite_difference_check(m, f)
    assert n == sum(p.numel() for p in m.parameters())


def test_full_size_gradients_flow_to_all_parameters():
    m = QualityModel(ModelConfig(feature_dim=8), seed=0, dtype=torch.float64)
    Q, _ = m(torch.randn(20, 8, dtype=torch.float64))
    Q.backward()
    for name, p in m.named_parameters():
        assert p.grad is not None and torch.isfinite(p.grad).all(), name
        assert p.grad.abs().sum() > 0, name


def test_default_dimensions():
    m = QualityModel(ModelConfig(feature_dim=4096))
    shapes = {k: tuple(v.shape) for k, v in m.state_dict().items()}
    assert shapes == {"reduce_weight": (128, 4096), "reduce_bias": (128,), "gru_input_weight": (96, 128),
                      "gru_hidden_weight": (96, 32), "gru_bias": (96,), "h0": (32,), "head_weight": (1, 32),
                      "head_bias": (1,)}
    assert not m.h0.requires_grad and torch.equal(m.h0, torch.zeros(32))


def test_initialisation_is_seeded_fan_in_uniform():
    a, b = QualityModel(ModelConfig(feature_dim=16), seed=5), QualityModel(ModelConfig(feature_dim=16), seed=5)
    for (name, p), q in zip(a.named_parameters(), b.parameters()):
        assert torch.equal(p, q)
        if p.ndim == 2:
            assert p.abs().max() <= 1 / math.sqrt(p.shape[1])
        else:
            assert torch.equal(p, torch.zeros_like(p))
    c = QualityModel(ModelConfig(feature_dim=16), seed=6)
    assert not torch.equal(a.reduce_weight, c.reduce_weight)


# -- batching -----------------------------------------------------------------------------

def test_batched_eval_is_bit_identical():
    m = QualityModel(ModelConfig(feature_dim=12), seed=0).eval()
    seqs = [torch.randn(n, 12) for n in (5, 17, 1, 9)]
    batch = torch.nn.utils.rnn.pad_sequence(seqs, batch_first=True)
    with torch.no_grad():
        Qb, qb = m(batch, [5, 17, 1, 9])
        for i, s in enumerate(seqs):
            Q, q = m(s)
            assert Qb[i].item() == Q.item()
            assert torch.equal(qb[i, : len(s)], q)
            assert torch.all(qb[i, len(s):] == 0)


def test_batched_train_mode_close_to_unbatched():
    m = QualityModel(ModelConfig(feature_dim=12), seed=0, dtype=torch.float64).train()
    seqs = [torch.randn(n, 12, dtype=torch.float64) for n in (5, 17, 9)]
    batch = torch.nn.utils.rnn.pad_sequence(seqs, batch_first=True)
    Qb, _ = m(batch, [5, 17, 9])
    for i, s in enumerate(seqs):
        assert Qb[i].item() == pytest.approx(m(s)[0].item(), abs=1e-12)


def test_bad_lengths():
    m = small_model()
    with pytest.raises(ShapeError):
        m(torch.zeros(2, 5, 8, dtype=torch.float64), [5, 6])
    with pytest.raises(ShapeError):
        m(torch.zeros(2, 5, 8, dtype=torch.float64), [0, 5])


# -- checkpoints ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    m = QualityModel(ModelConfig(feature_dim=10, pooling=PoolingConfig(tau=6, gamma=0.25)), seed=3)
    save_checkpoint(tmp_path / "ck", m, backbone_tag="stub", seed=3, epoch=7, val_srocc=0.9)
    back, meta = load_checkpoint(tmp_path / "ck")
    assert meta["epoch"] == 7 and meta["model"]["pooling"] == {"tau": 6, "gamma": 0.25, "memory": "min"}
    assert not back.training
    f = torch.randn(8, 10)
    m.eval()
    assert back(f)[0].item() == m(f)[0].item()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)
    m = QualityModel(ModelConfig(feature_dim=10))
    save_checkpoint(tmp_path, m)
    other = QualityModel(ModelConfig(feature_dim=11))
    torch.save(other.state_dict(), tmp_path / "weights.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)
