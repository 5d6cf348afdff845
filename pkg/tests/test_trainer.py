import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptnet import metrics as M
from ptnet import synthscene as S
from ptnet import tensor as T
from ptnet import trainer as TR

from conftest import small_run_config


@pytest.fixture(scope="module")
def train_split(small_dataset_dir):
    return S.load_dataset(small_dataset_dir).split("train")


# -- DWA -------------------------------------------------------------------------------

def test_dwa_warmup_and_equal_rates():
    st_ = TR.DwaState(2.0)
    assert TR.dwa_weights(st_) == (1.0, 1.0)
    st_.record(4.0, 1.0)
    assert TR.dwa_weights(st_) == (1.0, 1.0)
    st_.record(2.0, 0.5)
    assert TR.dwa_weights(st_) == pytest.approx((1.0, 1.0), abs=1e-15)


def test_dwa_closed_form():
    lam1, lam2 = TR.dwa_from_rates((2.0, 0.0), 2.0)
    assert lam1 == pytest.approx(2 * math.e / (math.e + 1), abs=1e-15)
    assert lam1 == pytest.approx(1.4621, abs=1e-4) and lam2 == pytest.approx(0.5379, abs=1e-4)
    # the same case through a loss history: L_c doubled, L_d fell to ~0
    st_ = TR.DwaState(2.0, [(1.0, 1.0), (2.0, 1e-300)])
    assert TR.dwa_weights(st_)[0] == pytest.approx(1.4621, abs=1e-4)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3)), min_size=2, max_size=6),
       st.floats(0.1, 10.0))
def test_dwa_sums_to_two(history, temp):
    lam = TR.dwa_weights(TR.DwaState(temp, history))
    assert abs(sum(lam) - 2.0) <= 1e-9 and min(lam) >= 0


def test_dwa_errors():
    with pytest.raises(ValueError):
        TR.dwa_weights(TR.DwaState(0.0))
    with pytest.raises(ValueError):
        TR.dwa_weights(TR.DwaState(2.0, [(1.0, 0.0), (1.0, 1.0)]))


# -- loss and optimizer ----------------------------------------------------------------------

def test_total_loss():
    assert float(TR.total_loss(1.0, 1.0, 1.0, 1.0, 1.0)) == pytest.approx(2.3)
    assert float(TR.total_loss(2.0, 3.0, None, 0.5, 1.5)) == pytest.approx(5.5)
    with pytest.raises(TR.TrainingAborted):
        TR.total_loss(float("nan"), 1.0, 1.0, 1.0, 1.0)
    with pytest.raises(TR.TrainingAborted):
        TR.total_loss(1.0, 1.0, float("inf"), 1.0, 1.0)


def _param(values):
    return T.parameter(values, dtype=np.float64)


def test_adamw_single_step_by_hand():
    p = _param([1.0, -2.0])
    g = np.array([0.5, 0.25])
    opt = TR.AdamW({"p": p}, lr=0.1, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8)
    TR.adamw_step([p], [g], opt)
    m_hat = (0.1 * g) / 0.1
    v_hat = (0.001 * g * g) / 0.001
    expected = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert np.allclose(p.data, expected, atol=1e-15)


def test_adamw_zero_gradient_without_decay_is_identity():
    p = _param([0.3, 0.7])
    opt = TR.AdamW({"p": p}, lr=0.1, weight_decay=0.0)
    for _ in range(3):
        TR.adamw_step([p], [np.zeros(2)], opt)
    assert np.array_equal(p.data, [0.3, 0.7])


def test_adamw_constant_gradient_moves_by_lr_sign():
    p = _param([0.0, 0.0])
    opt = TR.AdamW({"p": p}, lr=0.01, weight_decay=0.0)
    for _ in range(50):
        before = p.data.copy()
        TR.adamw_step([p], [np.array([3.0, -0.2])], opt)
        assert np.allclose(p.data - before, [-0.01, 0.01], atol=1e-8)


def test_adamw_group_lr_and_nonfinite():
    a, b = _param([1.0]), _param([1.0])
    opt = TR.AdamW({"a": a, "b": b}, lr=0.1, weight_decay=0.0, lr_overrides={"b": 0.01})
    a.grad, b.grad = np.ones(1), np.ones(1)
    opt.step()
    assert a.data[0] == pytest.approx(0.9) and b.data[0] == pytest.approx(0.99)
    a.grad = np.array([np.nan])
    with pytest.raises(TR.TrainingAborted):
        opt.step()


def test_lr_schedule():
    assert TR.lr_factor(1, 10) == 1.0
    assert TR.lr_factor(6, 10) == pytest.approx(0.5)
    assert TR.lr_factor(10, 10) == pytest.approx(0.5 * (1 + math.cos(math.pi * 0.9)))
    assert TR.lr_factor(7, 10, "constant") == 1.0
    with pytest.raises(ValueError):
        TR.lr_factor(1, 10, "step")


def test_clip_grad_norm():
    a, b = _param([0.0]), _param([0.0, 0.0])
    a.grad, b.grad = np.array([3.0]), np.array([0.0, 4.0])
    assert TR.clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert T.global_grad_norm([a, b]) == pytest.approx(1.0, abs=1e-9)
    a.grad = np.array([np.inf])
    with pytest.raises(TR.TrainingAborted):
        TR.clip_grad_norm([a, b], 1.0)


# -- training -------------------------------------------------------------------------------

def test_caption_loss_decreases(train_split):
    state = TR.new_state(small_run_config(5), train_split)
    recs = [TR.train_epoch(state, train_split) for _ in range(5)]
    assert recs[-1]["L_c"] < recs[0]["L_c"]
    assert [r["epoch"] for r in state.log] == [1, 2, 3, 4, 5]
    assert recs[0]["lambda_c"] == recs[1]["lambda_c"] == 1.0
    for r in recs:
        assert r["lambda_c"] + r["lambda_d"] == pytest.approx(2.0, abs=1e-9)


def test_same_seed_same_log(train_split):
    logs = []
    for _ in range(2):
        state = TR.new_state(small_run_config(2), train_split)
        for _ in range(2):
            TR.train_epoch(state, train_split)
        logs.append(json.dumps(state.log))
    assert logs[0] == logs[1]


def test_nan_loss_aborts(train_split, monkeypatch):
    state = TR.new_state(small_run_config(1), train_split)
    orig = state.model.losses

    def broken(*a, **k):
        out = orig(*a, **k)
        out["detection"] = out["detection"] * float("nan")
        return out

    monkeypatch.setattr(state.model, "losses", broken)
    with pytest.raises(TR.TrainingAborted):
        TR.train_epoch(state, train_split)


def test_checkpoint_round_trip_and_resume(train_split, tmp_path):
    cfg = small_run_config(4)
    straight = TR.new_state(cfg, train_split)
    for _ in range(4):
        TR.train_epoch(straight, train_split)

    first = TR.new_state(cfg, train_split)
    for _ in range(2):
        TR.train_epoch(first, train_split)
    TR.save_checkpoint(first, tmp_path / "ck")
    resumed = TR.load_checkpoint(tmp_path / "ck")
    assert resumed.epoch == 2 and resumed.config == cfg
    for (n, p), (_, q) in zip(first.model.named_parameters(), resumed.model.named_parameters()):
        assert np.array_equal(p.data, q.data), n
    for _ in range(2):
        TR.train_epoch(resumed, train_split)
    assert json.dumps(resumed.log) == json.dumps(straight.log)
    with pytest.raises(FileExistsError):
        TR.save_checkpoint(resumed, tmp_path / "ck", overwrite=False)


def test_bank_round_trip(train_split, tmp_path):
    state = TR.new_state(small_run_config(1), train_split, dataset_hash="abc")
    assert state.bank_provenance["dataset_hash"] == "abc"
    from ptnet.prototypes import build_bank

    bank = build_bank(state.model.backbone, train_split.images1, train_split.images2,
                      train_split.masks, 4, seed=0, dataset_hash="abc")
    TR.save_bank(bank, tmp_path / "bank")
    back = TR.load_bank(tmp_path / "bank")
    assert back.prototypes.shape == (4, 64, 8)
    assert np.allclose(back.prototypes, bank.prototypes, atol=1e-6)
    assert back.provenance["dataset_hash"] == "abc"
    with pytest.raises(FileExistsError):
        TR.save_bank(bank, tmp_path / "bank")


# -- evaluation -----------------------------------------------------------------------------

def test_score_perfect_predictions(small_dataset_dir):
    test = S.load_dataset(small_dataset_dir).split("test")
    preds = TR.Predictions(list(test.ids), [M.tokenize(c[0]) for c in test.captions],
                           test.masks.copy(), test.masks.astype(float))
    rep = TR.score(preds, test)
    assert rep.B4 == pytest.approx(1.0) and rep.F1 == 1.0 and rep.IoU == 1.0
    assert rep.type_accuracy == 1.0 and len(rep.per_sample) == len(test)
    assert M.MetricReport.from_dict(json.loads(json.dumps(rep.to_dict()))) == rep


def test_write_predictions(small_dataset_dir, tmp_path):
    test = S.load_dataset(small_dataset_dir).split("test")
    preds = TR.Predictions(list(test.ids), [["a"]] * len(test), test.masks, test.masks * 1.0)
    TR.write_predictions(preds, tmp_path)
    lines = (tmp_path / "predictions.jsonl").read_text().splitlines()
    assert len(lines) == len(test)
    from ptnet.container import read_pgm

    rec = json.loads(lines[0])
    assert np.array_equal(read_pgm(tmp_path / rec["mask"]), test.masks[0])
