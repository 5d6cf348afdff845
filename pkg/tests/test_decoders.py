import numpy as np
import pytest

from ptnet import tensor as T
from ptnet.decoders import (BCE_EPS, CaptionDecoder, DetectionHead, DetectionTokenEncoder,
                            Vocabulary, adaptive_avg_pool, adaptive_pool_matrix, detection_loss,
                            make_teacher_batch, pixel_shuffle)

import gradcases


def f64(x, grad=False):
    return T.tensor(np.asarray(x, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def make_decoder(vocab=None, d_lm=8, layers=1, max_len=6, seed=0):
    vocab = vocab or Vocabulary(["a", "b", "c", "d"])
    with T.precision(np.float64):
        return CaptionDecoder(np.random.default_rng(seed), vocab, 4, d_lm=d_lm, heads=2,
                              layers=layers, max_len=max_len, max_prefix=8)


@pytest.mark.parametrize("name", ["detection_head_bce", "detection_tokens", "caption_loss"])
def test_gradcheck(name):
    assert gradcases.run_case(name) <= 1e-4


# -- detection -----------------------------------------------------------------------------

def test_pixel_shuffle_layout():
    x = np.arange(8.0).reshape(1, 1, 2, 4)        # r=2, c=1
    out = pixel_shuffle(f64(x), 2).data[0, :, :, 0]
    assert np.array_equal(out, [[0, 1, 4, 5], [2, 3, 6, 7]])


def test_head_output_shape_and_finest_map():
    head = DetectionHead(np.random.default_rng(0), 8, 2, 16, channels=(6, 5))
    logits, fs2 = head(T.tensor(np.random.default_rng(1).normal(size=(3, 4, 8))))
    assert logits.shape == (3, 16, 16)
    assert fs2.shape == (3, 8, 8, 5)
    with pytest.raises(ValueError):
        DetectionHead(np.random.default_rng(0), 8, 2, 12)
    with pytest.raises(ValueError):
        DetectionHead(np.random.default_rng(0), 8, 2, 16, prior=1.0)


def test_constant_input_with_zero_final_layer_gives_equal_logits():
    head = DetectionHead(np.random.default_rng(0), 8, 2, 16, channels=(6, 5))
    head.logit.weight.data[:] = 0.0
    logits, _ = head(T.tensor(np.ones((1, 4, 8)) * 0.7))
    assert np.allclose(logits.data, logits.data.flat[0])
    assert logits.data.flat[0] == pytest.approx(np.log(0.01 / 0.99), rel=1e-5)


def test_gradient_reaches_detection_features():
    with T.precision(np.float64):
        head = DetectionHead(np.random.default_rng(0), 4, 2, 8, channels=(4, 3))
    od = f64(np.random.default_rng(1).normal(size=(1, 4, 4)), grad=True)
    logits, _ = head(od)
    T.backward(detection_loss(logits, np.eye(8, dtype=np.uint8)[None]))
    assert np.abs(od.grad).sum() > 0


def test_bce_saturation_and_uniform():
    mask = (np.random.default_rng(0).random((1, 4, 4)) < 0.5).astype(np.uint8)
    big = np.where(mask == 1, 40.0, -40.0)
    assert detection_loss(f64(big), mask).item() == pytest.approx(-np.log(1 - BCE_EPS), abs=1e-9)
    assert detection_loss(f64(np.zeros((1, 4, 4))), mask).item() == pytest.approx(np.log(2), abs=1e-12)


def test_bce_brute_force_sum():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(1, 4, 4)) * 2
    mask = (rng.random((1, 4, 4)) < 0.4).astype(np.uint8)
    total = 0.0
    for y, z in zip(mask.ravel(), logits.ravel()):
        p = min(max(1.0 / (1.0 + np.exp(-z)), BCE_EPS), 1 - BCE_EPS)
        total += -(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert detection_loss(f64(logits), mask).item() == pytest.approx(total / 16, abs=1e-12)


def test_bce_validation():
    with pytest.raises(ValueError):
        detection_loss(f64(np.zeros((1, 2, 2))), np.zeros((1, 3, 3)))
    with pytest.raises(ValueError):
        detection_loss(f64(np.zeros((1, 2, 2))), np.full((1, 2, 2), 2))


def test_adaptive_pool_quadrants():
    x = np.arange(16.0).reshape(1, 4, 4, 1)
    out = adaptive_avg_pool(f64(x), 2, 2).data[0, :, :, 0]
    expected = [[np.mean([0, 1, 4, 5]), np.mean([2, 3, 6, 7])],
                [np.mean([8, 9, 12, 13]), np.mean([10, 11, 14, 15])]]
    assert np.allclose(out, expected)
    assert np.allclose(adaptive_pool_matrix(5, 2).sum(axis=1), 1.0)
    with pytest.raises(ValueError):
        adaptive_pool_matrix(2, 3)


def test_detection_tokens_constant_field_and_global_pool():
    with T.precision(np.float64):
        enc = DetectionTokenEncoder(np.random.default_rng(0), 3, 5, 2, 2)
        enc1 = DetectionTokenEncoder(np.random.default_rng(0), 3, 5, 1, 1)
    c = np.array([0.2, -0.4, 1.0])
    tok = enc(f64(np.broadcast_to(c, (1, 4, 4, 3)))).data
    assert tok.shape == (1, 4, 5)
    assert np.allclose(tok, enc.mlp(f64(c[None])).data)
    fs2 = np.random.default_rng(1).normal(size=(1, 4, 4, 3))
    single = enc1(f64(fs2)).data
    assert np.allclose(single[0, 0], enc1.mlp(f64(fs2.mean(axis=(1, 2)))).data[0])


# -- captioning ----------------------------------------------------------------------------

def test_vocabulary_round_trip():
    v = Vocabulary(["b", "a", "a"])
    assert v.tokens[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]
    assert v.decode(v.encode(["a", "b"]) + [v.eos_id, v.index["a"]]) == ["a", "b"]
    assert v.encode(["zzz"]) == [v.index["<unk>"]]


def test_teacher_batch_layout():
    v = Vocabulary(["a", "b"])
    tb = make_teacher_batch([["a", "b"], ["b"]], v, 4)
    assert tb.inputs.tolist() == [[v.bos_id, v.index["a"], v.index["b"]],
                                  [v.bos_id, v.index["b"], v.pad_id]]
    assert tb.targets.tolist() == [[v.index["a"], v.index["b"], v.eos_id],
                                   [v.index["b"], v.eos_id, v.pad_id]]
    assert tb.valid.tolist() == [[True, True, True], [True, True, False]]
    with pytest.raises(ValueError):
        make_teacher_batch([["a"] * 5], v, 4)


def test_assemble_length_ordering_and_zero_features():
    dec = make_decoder()
    rng = np.random.default_rng(0)
    dd = rng.normal(size=(2, 4, 8))
    seq = dec.assemble(f64(np.zeros((2, 3, 4))), f64(dd)).data
    assert seq.shape == (2, 1 + 4 + 3, 8)
    assert np.array_equal(seq[:, 1:5], dd)
    assert np.allclose(seq[:, 5:], dec.project.bias.data)
    assert np.allclose(seq[:, 0], dec.prompt.data[0])
    assert dec.assemble(f64(np.zeros((2, 3, 4)))).shape == (2, 4, 8)
    with pytest.raises(ValueError):
        dec.assemble(f64(np.zeros((2, 3, 4))), f64(np.zeros((2, 4, 5))))


def test_caption_loss_uniform_and_saturated():
    dec = make_decoder()
    V = len(dec.vocab)
    prefix = dec.assemble(f64(np.random.default_rng(0).normal(size=(1, 2, 4))))
    tb = make_teacher_batch([["a", "c", "b"]], dec.vocab, 6)
    dec.head.weight.data[:] = 0.0
    dec.head.bias.data[:] = 0.0
    assert dec.caption_loss(prefix, tb)[0].item() == pytest.approx(np.log(V), abs=1e-12)
    # rig the logits to +20 on the right token and -20 elsewhere at every step
    _, h = dec.logits(prefix, tb.inputs)
    rigged = np.full((1, 4, V), -20.0)
    rigged[0, np.arange(4), tb.targets[0]] = 20.0
    dec.logits = lambda p, ids: (f64(rigged), h)
    assert dec.caption_loss(prefix, tb)[0].item() == pytest.approx(0.0, abs=1e-15)


def test_caption_loss_hand_computed():
    dec = make_decoder()
    prefix = dec.assemble(f64(np.random.default_rng(1).normal(size=(1, 2, 4))))
    tb = make_teacher_batch([["d", "a"]], dec.vocab, 6)
    logits, _ = dec.logits(prefix, tb.inputs)
    z = logits.data[0]
    expected = 0.0
    for pos, tgt in enumerate(tb.targets[0]):
        expected -= z[pos, tgt] - np.log(np.exp(z[pos]).sum())
    expected /= 3
    assert dec.caption_loss(prefix, tb)[0].item() == pytest.approx(expected, abs=1e-12)


def test_causal_prefix_independence():
    """Changing a later caption token leaves earlier hidden states intact."""
    dec = make_decoder()
    prefix = dec.assemble(f64(np.random.default_rng(2).normal(size=(1, 2, 4))))
    a = dec.hidden(prefix, np.array([[1, 4, 5, 6]])).data
    b = dec.hidden(prefix, np.array([[1, 4, 5, 7]])).data
    assert np.array_equal(a[:, :3], b[:, :3])
    assert not np.array_equal(a[:, 3], b[:, 3])


def test_greedy_decode_eos_first_and_determinism():
    dec = make_decoder()
    prefix = dec.assemble(f64(np.random.default_rng(3).normal(size=(2, 2, 4))))
    first = dec.greedy_decode(prefix)
    assert first == dec.greedy_decode(prefix)
    assert all(len(x) <= dec.max_len for x in first)
    dec.head.weight.data[:] = 0.0
    dec.head.bias.data[:] = 0.0
    dec.head.bias.data[dec.vocab.eos_id] = 5.0
    assert dec.greedy_decode(prefix) == [[], []]


def test_overfit_five_captions():
    """A small decoder memorizes five distinct captions from fixed features."""
    from ptnet.trainer import AdamW

    words = ["a", "block", "was", "added", "removed", "at", "the", "top", "left", "centre"]
    vocab = Vocabulary(words)
    caps = [["a", "block", "was", "added", "at", "the", "top"],
            ["a", "block", "was", "removed", "at", "the", "left"],
            ["a", "block", "was", "added", "at", "the", "centre"],
            ["the", "top", "left"],
            ["a", "block", "was", "removed"]]
    dec = CaptionDecoder(np.random.default_rng(0), vocab, 4, d_lm=32, heads=2, layers=1,
                         max_len=8, max_prefix=4)
    feats = T.tensor(np.random.default_rng(1).normal(size=(5, 2, 4)).astype(np.float32))
    tb = make_teacher_batch(caps, vocab, 8)
    opt = AdamW(dec.named_parameters(), lr=1e-2, weight_decay=0.0)
    for _ in range(150):
        loss, _ = dec.caption_loss(dec.assemble(feats), tb)
        dec.zero_grad()
        T.backward(loss)
        opt.step()
    decoded = [vocab.decode(x) for x in dec.greedy_decode(dec.assemble(feats))]
    assert decoded == caps
