import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptnet import tensor as T
from ptnet.alignment import AlignmentHead, TextAnchor, anchor_embed, infonce

import gradcases


def f64(x, grad=False):
    return T.tensor(np.asarray(x, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def head(d_lm=4, d_t=3, tau=0.07):
    with T.precision(np.float64):
        return AlignmentHead(np.random.default_rng(0), d_lm, d_t, tau)


@pytest.mark.parametrize("name", ["infonce", "alignment_head_infonce"])
def test_gradcheck(name):
    assert gradcases.run_case(name) <= 1e-4


def test_anchor_deterministic_and_unit_norm():
    a = TextAnchor(16)
    e1 = anchor_embed(["a", "block", "was", "added"], a)
    e2 = TextAnchor(16).embed(["a", "block", "was", "added"])
    assert np.array_equal(e1, e2)
    assert np.linalg.norm(e1) == pytest.approx(1.0, abs=1e-12)
    assert not np.allclose(e1, a.embed(["a", "block", "was", "removed"]))
    with pytest.raises(ValueError):
        a.embed([])


def test_anchor_single_token_is_projected_table_row():
    a = TextAnchor(8, table_dim=12, seed=3)
    row = a.word_vector("block")
    e = row @ a.projection
    assert np.allclose(a.embed(["block"]), e / np.linalg.norm(e), atol=1e-15)


def test_pool_project_single_position_and_duplicates():
    h = head()
    x = np.random.default_rng(1).normal(size=(1, 1, 4))
    e = h.pool_project(f64(x)).data
    z = x[0, 0] @ h.proj.weight.data + h.proj.bias.data
    assert np.allclose(e[0], z / np.linalg.norm(z), atol=1e-15)
    dup = h.pool_project(f64(np.repeat(x, 3, axis=1))).data
    assert np.allclose(dup, e, atol=1e-15)


def test_pool_project_hand_evaluated_with_mask():
    h = head()
    x = np.random.default_rng(2).normal(size=(1, 3, 4))
    valid = np.array([[True, True, False]])
    z = x[0, :2].mean(axis=0) @ h.proj.weight.data + h.proj.bias.data
    assert np.allclose(h.pool_project(f64(x), valid).data[0], z / np.linalg.norm(z), atol=1e-15)
    with pytest.raises(ValueError):
        h.pool_project(f64(x), np.zeros((1, 3), dtype=bool))


@pytest.mark.parametrize("B", [2, 4, 8])
def test_identical_embeddings_give_log_batch(B):
    v = np.random.default_rng(B).normal(size=5)
    v /= np.linalg.norm(v)
    ev = np.tile(v, (B, 1))
    assert infonce(f64(ev), ev, 0.07).item() == pytest.approx(np.log(B), abs=1e-12)


def test_closed_form_two_by_two():
    ev = np.array([[1.0, 0.0], [-1.0, 0.0]])
    assert infonce(f64(ev), ev, 1.0).item() == pytest.approx(np.log1p(np.exp(-2.0)), abs=1e-12)
    assert np.log1p(np.exp(-2.0)) == pytest.approx(0.1269, abs=1e-4)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(2, 5), st.floats(0.05, 2.0), st.integers(0, 10_000))
def test_matches_direct_formula(B, d, tau, seed):
    rng = np.random.default_rng(seed)
    ev = rng.normal(size=(B, d))
    et = rng.normal(size=(B, d))
    ev /= np.linalg.norm(ev, axis=1, keepdims=True)
    et /= np.linalg.norm(et, axis=1, keepdims=True)
    sim = ev @ et.T / tau
    expected = -np.mean([sim[b, b] - np.log(np.exp(sim[b]).sum()) for b in range(B)])
    assert infonce(f64(ev), et, tau).item() == pytest.approx(expected, rel=1e-10, abs=1e-12)


def test_validation():
    with pytest.raises(ValueError):
        infonce(f64(np.ones((1, 3))), np.ones((1, 3)), 0.1)
    with pytest.raises(ValueError):
        AlignmentHead(np.random.default_rng(0), 4, 3, tau=0.0)
