import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lavq.config import TrainConfig
from lavq.errors import ConfigError, ValidationError
from lavq.separator import (CrossAttention, EcgEncoder, Separator, binarize_mask, quantize,
                            vq_loss)


@pytest.fixture(scope="module")
def separator():
    torch.manual_seed(0)
    return Separator(TrainConfig()).double()


def _x(seed, b=2):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(b, 12, 4096, generator=g, dtype=torch.float64)


# -- encoder -----------------------------------------------------------------

def test_encoder_shape_and_zero_input(separator):
    e = separator.encode(torch.zeros(1, 12, 4096, dtype=torch.float64))
    assert e.shape == (1, 64, 8) and torch.isfinite(e).all()


def test_encoder_rejects_bad_shape(separator):
    with pytest.raises(ValidationError):
        separator.encode(torch.zeros(1, 12, 2048, dtype=torch.float64))


def test_encoder_bad_length_config():
    with pytest.raises(ConfigError):
        EcgEncoder(64, 6)


def test_encoder_depends_on_input(separator):
    e = separator.encode(_x(1, 4))
    assert e.std(dim=0).mean() > 1e-2


def test_encoder_finite_difference(separator):
    x = _x(2, 1).requires_grad_(True)
    separator.encode(x).sum().backward()
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(10):
        i, j = int(rng.integers(12)), int(rng.integers(4096))
        xp, xm = x.detach().clone(), x.detach().clone()
        xp[0, i, j] += h
        xm[0, i, j] -= h
        with torch.no_grad():
            fd = (separator.encode(xp).sum() - separator.encode(xm).sum()) / (2 * h)
        g = x.grad[0, i, j]
        assert abs(fd - g) <= 1e-3 * max(abs(g), 1e-3)


# -- attention -----------------------------------------------------------------

def test_attention_range_and_softmax(separator):
    e = separator.encode(_x(3))
    scores, w = separator.attention(e, separator.text(["st elevation", "normal ecg"]))
    assert scores.shape == (2, 64, 8)
    assert ((scores > 0) & (scores < 1)).all()
    assert w.shape == (2, 4, 64, 8)
    assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-6)


def test_attention_text_sensitive(separator):
    e = separator.encode(_x(4, 1)).expand(2, -1, -1)
    scores, _ = separator.attention(e, separator.text(["st elevation", "normal ecg"]))
    assert (scores[0] - scores[1]).abs().max() > 1e-4


def test_attention_divisibility():
    with pytest.raises(ConfigError):
        CrossAttention(8, 128, 7)


# -- mask ------------------------------------------------------------------------

def test_binarize_examples():
    s = torch.tensor([[0.2, 0.7], [0.5, 0.4]])
    assert torch.equal(binarize_mask(s, 0.5), torch.tensor([[0.0, 1.0], [1.0, 0.0]]))
    assert torch.equal(binarize_mask(torch.full((3, 3), 0.1), 0.5), torch.zeros(3, 3))
    assert torch.equal(binarize_mask(torch.rand(4, 4) * 0.98 + 0.01, 0.0), torch.ones(4, 4))


def test_binarize_straight_through():
    s = torch.rand(5, 3, requires_grad=True)
    w = torch.randn(5, 3)
    (binarize_mask(s) * w).sum().backward()
    assert torch.equal(s.grad, w)


# -- quantization --------------------------------------------------------------------

def test_quantize_examples():
    cb = torch.tensor([[0.0, 0, 0], [1.0, 1, 1]])
    _, q, idx = quantize(torch.tensor([[0.9, 1.1, 1.0], [0.5, 0.5, 0.5]]), cb)
    assert idx.tolist() == [1, 0]  # second row is a tie -> lowest index
    assert torch.equal(q[0], cb[1])
    q_st, q, idx = quantize(cb.clone(), cb)
    assert torch.equal(q, cb) and idx.tolist() == [0, 1]
    e = torch.randn(7, 3)
    q_st, q, _ = quantize(e, cb)
    assert torch.equal(q_st, q)


def test_quantize_empty_codebook():
    with pytest.raises(ConfigError):
        quantize(torch.zeros(2, 3), torch.zeros(0, 3))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 4), elements=st.floats(-3, 3)),
       arrays(np.float64, (5, 4), elements=st.floats(-3, 3)))
def test_quantize_argmin_idempotent(e, cb):
    e, cb = torch.as_tensor(e), torch.as_tensor(cb)
    _, q, idx = quantize(e, cb)
    for i in range(e.shape[0]):
        best = (q[i] - e[i]).norm()
        assert all(best <= (cb[k] - e[i]).norm() + 1e-12 for k in range(cb.shape[0]))
    _, q2, idx2 = quantize(q, cb)
    assert torch.equal(q2, q)
    assert torch.equal(cb[idx2], cb[idx])


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (6, 4), elements=st.floats(-3, 3)), st.permutations(range(5)),
       st.integers(0, 2 ** 16))
def test_vq_loss_codebook_permutation(e, perm, seed):
    e = torch.as_tensor(e)
    cb = torch.randn(5, 4, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    mask = (torch.rand(6, 4, generator=torch.Generator().manual_seed(seed + 1)) > 0.5).double()
    _, q, idx = quantize(e, cb)
    perm = torch.tensor(perm)
    _, qp, idxp = quantize(e, cb[perm])
    assert torch.allclose(vq_loss(e, q, mask), vq_loss(e, qp, mask), atol=0)
    assert torch.equal(cb[perm][idxp], cb[idx])


def test_straight_through_gradient():
    e = torch.randn(4, 8, dtype=torch.float64, requires_grad=True)
    cb = torch.randn(6, 8, dtype=torch.float64)
    q_st, _, _ = quantize(e, cb)
    w = torch.randn(4, 8, dtype=torch.float64)
    (q_st * w).sum().backward()
    assert torch.equal(e.grad, w)


def test_vq_loss_values():
    e = torch.tensor([[0.5]])
    q = torch.tensor([[0.0]])
    assert vq_loss(e, q, torch.ones(1, 1)).item() == 0.5
    assert vq_loss(e, q, torch.zeros(1, 1)).item() == 0.0
    x = torch.randn(3, 4)
    assert vq_loss(x, x.clone(), torch.ones(3, 4)).item() == 0.0


def test_vq_loss_gradient_routing():
    e = torch.randn(3, 4, requires_grad=True)
    cb = torch.randn(5, 4, requires_grad=True)
    _, q, _ = quantize(e, cb)
    mask = torch.ones(3, 4)
    codebook_term = ((e.detach() - q) * mask).pow(2).mean()
    codebook_term.backward()
    assert e.grad is None and cb.grad is not None
    cb.grad = None
    _, q, _ = quantize(e, cb)
    commit = ((q.detach() - e) * mask).pow(2).mean()
    commit.backward()
    assert e.grad is not None and cb.grad is None


# -- composite separation -----------------------------------------------------------------

def test_forced_masks(separator):
    x = _x(5)
    texts = ["st elevation", "normal ecg"]
    ones = separator(x, texts, mask=torch.ones(64, 8))
    assert torch.count_nonzero(ones.f_p) == 0
    zeros = separator(x, texts, mask=torch.zeros(64, 8))
    assert torch.count_nonzero(zeros.f_d) == 0
    assert torch.equal(zeros.f_p, zeros.e)
    assert zeros.vq_loss.item() == 0.0


@pytest.mark.parametrize("seed", range(4))
def test_separation_algebra(separator, seed):
    out = separator(_x(10 + seed), ["inferior infarction", "left ventricular hypertrophy"])
    a = out.mask.detach()
    assert set(torch.unique(a).tolist()) <= {0.0, 1.0}
    assert torch.count_nonzero(out.f_d * out.f_p) == 0
    assert torch.all((out.f_d == 0) | (a == 1))
    assert torch.all((out.f_p == 0) | (a == 0))
    assert torch.allclose(out.f_d + out.q * (1 - a), out.q, atol=0)
    assert torch.equal(out.f_p[a == 0], out.e[a == 0])


def test_use_vq_off(separator):
    out = separator(_x(6), ["a", "b"], use_vq=False)
    assert out.vq_loss.item() == 0.0
    assert torch.equal(out.f_d, out.e * out.mask)


def test_codebook_init_range():
    torch.manual_seed(3)
    cb = Separator(TrainConfig()).codebook
    assert cb.shape == (64, 8)
    assert cb.abs().max() <= 1 / 64
