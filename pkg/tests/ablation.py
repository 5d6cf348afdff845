"""The five cumulative ablation configurations and probes of what each one
actually wires in: which parameters exist and which ones receive gradient
from which loss."""

import re

import numpy as np

from ptnet import tensor as T
from ptnet.model import PTNet
from ptnet.prototypes import random_bank

from conftest import tiny_model_config

# name -> (proto, tamg, det_guided, align), cumulative
CONFIGS = {
    "baseline": (False, False, False, False),
    "+proto": (True, False, False, False),
    "+proto+tamg": (True, True, False, False),
    "+proto+tamg+detguided": (True, True, True, False),
    "full": (True, True, True, True),
}

# parameter names owned by each switch: the bank together with the change
# query MLP and retrieval projections of every level; the gates; the
# detection-token encoder; the alignment head
OWNED = {
    "proto": re.compile(r"pgcai\.(bank$|layers\.\d\.levels\.\d\.(query_mlp|ret_[qkvo])\.)"),
    "tamg": re.compile(r"tamg\."),
    "det_guided": re.compile(r"det_tokens\."),
    "align": re.compile(r"align_head\."),
}

CAPTIONS = ["a block was added at the top left".split(), "the two scenes seem identical".split()]


def build(flags, seed=0):
    proto, tamg, det, align = flags
    with T.precision(np.float64):
        model = PTNet(tiny_model_config(proto=proto, tamg=tamg, det_guided=det, align=align,
                                        seed=seed))
    if proto:
        model.pgcai.set_bank(random_bank(model.pgcai.bank.shape, seed=3))
    return model


def param_names(model):
    return {n for n, _ in model.named_parameters()}


def owned(names, switch):
    return {n for n in names if OWNED[switch].match(n)}


def batch(seed=0):
    rng = np.random.default_rng(seed)
    im1 = rng.random((2, 8, 8, 3))
    im2 = im1.copy()
    im2[0, :4, :4] = rng.random((4, 4, 3))
    masks = np.zeros((2, 8, 8), np.uint8)
    masks[0, :4, :4] = 1
    return im1, im2, masks, CAPTIONS


def grad_reach(model, loss_name):
    """Names of parameters with a non-zero gradient from one loss."""
    with T.precision(np.float64):
        losses = model.losses(*batch())
        model.zero_grad()
        T.backward(losses[loss_name])
    return {n for n, p in model.named_parameters()
            if p.grad is not None and np.any(p.grad != 0)}


def prefix_length(model):
    with T.precision(np.float64), T.no_grad():
        im1, im2, _, _ = batch()
        return model.forward(im1, im2).prefix.shape[1]


def check_all():
    """Run every structural and gradient-path probe; returns a list of failures."""
    problems = []
    names = {k: param_names(build(f)) for k, f in CONFIGS.items()}
    order = list(CONFIGS)
    switches = ("proto", "tamg", "det_guided", "align")
    for prev, cur, switch in zip(order, order[1:], switches):
        added = names[cur] - names[prev]
        removed = names[prev] - names[cur]
        if removed:
            problems.append(f"{cur}: removed {sorted(removed)[:3]}")
        if not added or added != owned(names[cur], switch):
            problems.append(f"{cur}: added params {sorted(added)[:3]} are not exactly the {switch} set")
    n_tokens = 4
    for key, flags in CONFIGS.items():
        proto, tamg, det, align = flags
        model = build(flags)
        nm = names[key]
        for switch, on in zip(switches, flags):
            if bool(owned(nm, switch)) != on:
                problems.append(f"{key}: {switch} params present={not on}")
        expected_prefix = 1 + n_tokens + (4 if det else 0)
        if prefix_length(model) != expected_prefix:
            problems.append(f"{key}: prefix length {prefix_length(model)} != {expected_prefix}")
        cap = grad_reach(model, "caption")
        det_loss = grad_reach(model, "detection")
        # caption gradient reaches the detection branch only through the detection tokens
        reaches_det_head = any(n.startswith("det_head.") for n in cap)
        if reaches_det_head != det:
            problems.append(f"{key}: caption->det_head gradient {reaches_det_head}, expected {det}")
        if proto and "pgcai.bank" not in det_loss:
            problems.append(f"{key}: detection loss does not reach the bank")
        if tamg and not (any(n.startswith("tamg.det.") for n in det_loss)
                         and any(n.startswith("tamg.cap.") for n in cap)):
            problems.append(f"{key}: task gates do not receive their own task's gradient")
        if tamg and any(n.startswith("tamg.cap.") for n in det_loss):
            problems.append(f"{key}: detection loss leaks into caption gates")
        if align:
            al = grad_reach(model, "align")
            if not any(n.startswith("align_head.") for n in al):
                problems.append(f"{key}: alignment loss does not reach its head")
            if not any(n.startswith("backbone.") for n in al):
                problems.append(f"{key}: alignment loss does not reach the backbone")
        elif model.losses(*batch())["align"] is not None:
            problems.append(f"{key}: alignment loss computed while disabled")
    return problems
