import numpy as np
import pytest

from ptnet import tensor as T
from ptnet.model import PTNet

import ablation
from conftest import tiny_model_config


def test_all_ablation_probes_pass():
    assert ablation.check_all() == []


@pytest.mark.parametrize("key", list(ablation.CONFIGS))
def test_switch_parameter_sets(key):
    flags = ablation.CONFIGS[key]
    names = ablation.param_names(ablation.build(flags))
    for switch, on in zip(("proto", "tamg", "det_guided", "align"), flags):
        assert bool(ablation.owned(names, switch)) == on


def test_configurations_are_nested():
    sets = [ablation.param_names(ablation.build(f)) for f in ablation.CONFIGS.values()]
    for a, b in zip(sets, sets[1:]):
        assert a < b


def test_probe_detects_a_miswired_switch(monkeypatch):
    # negative control: if the detection tokens were dropped from the prefix
    # while the encoder still exists, the probes must report it
    orig = PTNet.forward

    def forward_without_tokens(self, img1, img2):
        out = orig(self, img1, img2)
        if self.det_tokens is not None:
            out.prefix = self.decoder.assemble(out.task.caption, None)
        return out

    monkeypatch.setattr(PTNet, "forward", forward_without_tokens)
    problems = ablation.check_all()
    assert any("prefix length" in p for p in problems)
    assert any("caption->det_head" in p for p in problems)


def test_prefix_layout_and_detection_resolution():
    m = ablation.build(ablation.CONFIGS["full"])
    im1, im2, _, _ = ablation.batch()
    with T.precision(np.float64), T.no_grad():
        out = m.forward(im1, im2)
    assert out.det_logits.shape == (2, 8, 8)
    assert out.prefix.shape == (2, 1 + 4 + 4, 8)
    assert out.extras["det_tokens"].shape == (2, 4, 8)


def test_losses_are_finite_scalars():
    m = ablation.build(ablation.CONFIGS["full"])
    with T.precision(np.float64):
        losses = m.losses(*ablation.batch())
    for k in ("caption", "detection", "align"):
        assert losses[k].shape == () and np.isfinite(losses[k].item())


def test_predict_outputs():
    m = ablation.build(ablation.CONFIGS["full"])
    im1, im2, _, _ = ablation.batch()
    with T.precision(np.float64):
        probs, masks, caps = m.predict(im1, im2)
    assert probs.shape == masks.shape == (2, 8, 8)
    assert set(np.unique(masks)) <= {0, 1}
    assert np.array_equal(masks, (probs > 0.5).astype(np.uint8))
    assert all(isinstance(c, list) and len(c) <= m.config.max_len for c in caps)


def test_slow_group_is_backbone_and_projections():
    m = PTNet(tiny_model_config())
    slow = set(m.slow_parameter_names())
    assert any(n.startswith("backbone.") for n in slow)
    assert all(n.startswith(("backbone.", "decoder.project.", "align_head.proj.")) for n in slow)


def test_same_seed_same_weights():
    a, b = PTNet(tiny_model_config(seed=4)), PTNet(tiny_model_config(seed=4))
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)
