"""Joint training with dynamic weight averaging, AdamW, evaluation and
checkpointing."""

from __future__ import annotations

import json
import logging
import math
import os
import shutil
from dataclasses import dataclass, field

import numpy as np

from . import metrics as M
from . import tensor as T
from .config import RunConfig
from .container import read_container, write_container, write_pgm
from .decoders import Vocabulary
from .model import PTNet
from .prototypes import ClusterModel, PrototypeBank, build_bank, random_bank, unit_rms
from .synthscene import AUGMENTATIONS, Dataset, augment_sample, change_type_of_caption

log = logging.getLogger(__name__)

ALIGN_WEIGHT = 0.3


class TrainingAborted(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


# -- loss balancing ---------------------------------------------------------------

@dataclass
class DwaState:
    temperature: float = 2.0
    history: list = field(default_factory=list)  # per-epoch (L_caption, L_detection)

    def record(self, caption_loss, detection_loss):
        self.history.append((float(caption_loss), float(detection_loss)))


def dwa_weights(state: DwaState):
    """Loss weights for the next epoch; (1, 1) until two epochs are recorded."""
    if state.temperature <= 0:
        raise ValueError("DWA temperature must be positive")
    if len(state.history) < 2:
        return 1.0, 1.0
    prev, prev2 = state.history[-1], state.history[-2]
    if min(prev + prev2) <= 0:
        raise ValueError("DWA needs positive loss history")
    return dwa_from_rates((prev[0] / prev2[0], prev[1] / prev2[1]), state.temperature)


def dwa_from_rates(rates, temperature):
    """Softmax of the loss-descent rates over ``temperature``, scaled to sum to 2."""
    if temperature <= 0:
        raise ValueError("DWA temperature must be positive")
    w = np.asarray(rates, dtype=np.float64) / temperature
    e = np.exp(w - w.max())
    lam = 2.0 * e / e.sum()
    return float(lam[0]), float(lam[1])


def total_loss(lc, ld, la, lam1, lam2, align_weight=ALIGN_WEIGHT):
    """lam1 * L_c + lam2 * L_d + align_weight * L_a (L_a may be None)."""
    for name, v in (("caption", lc), ("detection", ld), ("align", la)):
        if v is not None and not np.all(np.isfinite(_value(v))):
            raise TrainingAborted(f"{name} loss is not finite")
    out = lc * lam1 + ld * lam2
    if la is not None:
        out = out + la * align_weight
    return out


def _value(v):
    return v.data if isinstance(v, T.Tensor) else np.asarray(v)


# -- optimizer --------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay and per-group learning rates."""

    def __init__(self, named_params, lr=1e-3, weight_decay=5e-4, betas=(0.9, 0.999), eps=1e-8,
                 lr_overrides=None):
        self.params = dict(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.lr_of = {n: lr for n in self.params}
        for n, v in (lr_overrides or {}).items():
            self.lr_of[n] = v
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.t = 0

    def step(self, lr_scale=1.0):
        """One update; ``lr_scale`` multiplies every group's learning rate."""
        for n, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingAborted(f"non-finite gradient in {n}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for n, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            lr = self.lr_of[n] * lr_scale
            m = self.m[n] = b1 * self.m[n] + (1 - b1) * g
            v = self.v[n] = b2 * self.v[n] + (1 - b2) * g * g
            p.data = (p.data * (1.0 - lr * self.weight_decay)
                      - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state_arrays(self):
        out = {}
        for n in self.params:
            out[f"m/{n}"] = self.m[n]
            out[f"v/{n}"] = self.v[n]
        return out

    def load_state_arrays(self, arrays, t):
        for n in self.params:
            self.m[n] = arrays[f"m/{n}"].astype(self.params[n].dtype)
            self.v[n] = arrays[f"v/{n}"].astype(self.params[n].dtype)
        self.t = t


def adamw_step(params, grads, state: AdamW, lr=None, wd=None):
    """Functional wrapper: assign ``grads`` and take one optimizer step."""
    if lr is not None:
        state.lr_of = {n: lr for n in state.params}
    if wd is not None:
        state.weight_decay = wd
    for p, g in zip(params, grads):
        p.grad = None if g is None else np.asarray(g, dtype=p.dtype)
    state.step()
    return params


def lr_factor(epoch, epochs, schedule="cosine"):
    """Multiplier on the initial learning rates for 1-based ``epoch``."""
    if schedule == "constant":
        return 1.0
    if schedule != "cosine":
        raise ValueError(f"unknown learning-rate schedule {schedule!r}")
    if epochs < 1 or not 1 <= epoch <= max(epochs, epoch):
        raise ValueError("epoch out of range")
    t = min(epoch - 1, epochs - 1) / epochs
    return 0.5 * (1.0 + math.cos(math.pi * t))


def clip_grad_norm(params, max_norm):
    norm = T.global_grad_norm(params)
    if not math.isfinite(norm):
        raise TrainingAborted("gradient norm is not finite")
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# -- training state -------------------------------------------------------------------

@dataclass
class TrainState:
    model: PTNet
    optimizer: AdamW
    dwa: DwaState
    config: RunConfig
    epoch: int = 0
    log: list = field(default_factory=list)
    bank_provenance: dict | None = None


def build_model(config: RunConfig, vocab: Vocabulary | None = None) -> PTNet:
    return PTNet(config.model_config(), vocab)


def make_optimizer(model: PTNet, config: RunConfig) -> AdamW:
    tc = config.train
    slow = {n: tc.lr_slow for n in model.slow_parameter_names()}
    return AdamW(model.named_parameters(), lr=tc.lr, weight_decay=tc.weight_decay,
                 betas=(tc.beta1, tc.beta2), eps=tc.eps, lr_overrides=slow)


def init_prototypes(model: PTNet, train: Dataset, config: RunConfig, dataset_hash=None):
    """Fill the model's prototype bank; returns the bank record or None."""
    if not model.config.proto:
        return None
    tc = config.train
    if tc.proto_init == "random":
        shape = model.pgcai.bank.shape
        model.pgcai.set_bank(random_bank(shape, seed=tc.seed))
        return {"init": "random", "seed": tc.seed, "shape": list(shape)}
    bank = build_bank(model.backbone, train.images1, train.images2, train.masks, model.config.k,
                      tau=tc.tau_proto, sigma=tc.sigma, seed=tc.seed, dataset_hash=dataset_hash)
    return install_bank(model, bank.prototypes, dict(bank.provenance, init="cluster"))


def install_bank(model: PTNet, prototypes, provenance):
    """Load a bank into the model at unit RMS.

    The aggregated bank is a sum over training samples, so its scale grows
    with the dataset; the modulation multiplies features by values derived
    from it, and an unscaled bank makes the cascaded layers blow up.
    """
    scaled, rms = unit_rms(prototypes)
    model.pgcai.set_bank(scaled)
    return dict(provenance, install_scale=1.0 / rms)


def new_state(config: RunConfig, train: Dataset | None = None, bank: PrototypeBank | None = None,
              dataset_hash=None) -> TrainState:
    model = build_model(config)
    prov = None
    if model.config.proto:
        if bank is not None:
            prov = install_bank(model, bank.prototypes, dict(bank.provenance, init="file"))
        elif train is not None:
            prov = init_prototypes(model, train, config, dataset_hash)
    return TrainState(model, make_optimizer(model, config), DwaState(config.train.dwa_temperature),
                      config, bank_provenance=prov)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # InfoNCE needs at least two samples per batch
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def parse_augment(text: str):
    ops = tuple(t.strip() for t in text.split(",") if t.strip() and t.strip() != "none")
    unknown = set(ops) - set(AUGMENTATIONS)
    if unknown:
        raise ValueError(f"unknown augmentation(s) {sorted(unknown)}")
    return ops


def _training_batch(data: Dataset, idx, rng, ops):
    """Images, masks and one sampled reference caption per item."""
    if not ops:
        caps = [data.captions[i][int(rng.integers(len(data.captions[i])))].split() for i in idx]
        return data.images1[idx], data.images2[idx], data.masks[idx], caps
    im1, im2, masks, caps = [], [], [], []
    for i in idx:
        a, b, m, _, refs = augment_sample(data.images1[i], data.images2[i], data.masks[i],
                                          data.change_types[i], rng, ops)
        im1.append(a)
        im2.append(b)
        masks.append(m)
        caps.append(refs[int(rng.integers(len(refs)))].split())
    return np.stack(im1), np.stack(im2), np.stack(masks), caps


def train_epoch(state: TrainState, data: Dataset) -> dict:
    """One pass over ``data``; returns the epoch record appended to the log."""
    cfg = state.config.train
    model = state.model
    epoch = state.epoch + 1
    rng = np.random.default_rng([cfg.seed, epoch])
    lam1, lam2 = dwa_weights(state.dwa)
    scale = lr_factor(epoch, cfg.epochs, cfg.lr_schedule)
    params = model.parameters()
    sums = {"caption": 0.0, "detection": 0.0, "align": 0.0}
    steps = 0
    grad_norm = 0.0
    ops = parse_augment(cfg.augment)
    for idx in _batches(len(data), cfg.batch_size, rng):
        im1, im2, masks, caps = _training_batch(data, idx, rng, ops)
        try:
            losses = model.losses(im1, im2, masks, caps)
        except T.NonFiniteError as exc:
            raise TrainingAborted(f"epoch {epoch}: {exc}") from exc
        la = losses["align"] if model.config.align else None
        loss = total_loss(losses["caption"], losses["detection"], la, lam1, lam2, cfg.align_weight)
        model.zero_grad()
        T.backward(loss)
        grad_norm = clip_grad_norm(params, cfg.clip_norm)
        state.optimizer.step(scale)
        for k in sums:
            if losses[k] is not None:
                sums[k] += float(losses[k].data)
        steps += 1
    means = {k: v / steps for k, v in sums.items()}
    state.dwa.record(means["caption"], means["detection"])
    state.epoch = epoch
    record = {"epoch": epoch, "L_c": means["caption"], "L_d": means["detection"],
              "L_a": means["align"] if model.config.align else None,
              "lambda_c": lam1, "lambda_d": lam2, "lr": cfg.lr * scale, "lr_slow": cfg.lr_slow * scale,
              "steps": steps, "grad_norm": grad_norm}
    state.log.append(record)
    return record


# -- evaluation ---------------------------------------------------------------------------

@dataclass
class Predictions:
    ids: list
    captions: list      # token lists
    masks: np.ndarray   # [S, H, W] uint8
    probs: np.ndarray


def predict(model: PTNet, data: Dataset, batch_size=64) -> Predictions:
    caps, masks, probs = [], [], []
    for s in range(0, len(data), batch_size):
        p, m, c = model.predict(data.images1[s:s + batch_size], data.images2[s:s + batch_size])
        probs.append(p)
        masks.append(m)
        caps.extend(c)
    return Predictions(list(data.ids), caps, np.concatenate(masks), np.concatenate(probs))


def score(preds: Predictions, data: Dataset) -> M.MetricReport:
    if len(data) == 0:
        raise ValueError("cannot evaluate an empty split")
    refs = [[M.tokenize(r) for r in rs] for rs in data.captions]
    cands = [list(c) for c in preds.captions]
    report = M.MetricReport(**M.caption_scores(cands, refs))
    mask_scores = M.pooled_mask_scores(preds.masks, data.masks)
    report.F1, report.IoU = mask_scores["F1"], mask_scores["IoU"]
    correct = [change_type_of_caption(c) == t for c, t in zip(cands, data.change_types)]
    report.type_accuracy = float(np.mean(correct))
    _, cider_each = M.cider_d(cands, refs, return_scores=True)
    for i, pid in enumerate(data.ids):
        f1, iou = M.mask_f1_iou(preds.masks[i], data.masks[i])
        report.per_sample.append({
            "id": pid, "caption": " ".join(cands[i]), "change_type": data.change_types[i],
            "type_correct": bool(correct[i]), "F1": f1, "IoU": iou, "CIDEr_D": cider_each[i],
            "B4": M.bleu_n([cands[i]], [refs[i]], 4),
        })
    return report


def evaluate(model: PTNet, data: Dataset) -> M.MetricReport:
    return score(predict(model, data), data)


def write_predictions(preds: Predictions, out_dir):
    """Captions as UTF-8 lines, masks as PGM, plus a JSON-lines index."""
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(mask_dir, exist_ok=True)
    with open(os.path.join(out_dir, "captions.txt"), "w", encoding="utf-8") as fh:
        for c in preds.captions:
            fh.write(" ".join(c) + "\n")
    with open(os.path.join(out_dir, "predictions.jsonl"), "w", encoding="utf-8") as fh:
        for pid, c, m in zip(preds.ids, preds.captions, preds.masks):
            rel = f"masks/{pid}.pgm"
            write_pgm(os.path.join(out_dir, rel), m)
            fh.write(json.dumps({"id": pid, "caption": " ".join(c), "mask": rel}) + "\n")


# -- checkpoints ------------------------------------------------------------------------------

def save_checkpoint(state: TrainState, path, overwrite=True):
    if os.path.exists(path):
        if not overwrite:
            raise FileExistsError(path)
        shutil.rmtree(path)
    tmp = f"{path}.partial"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(os.path.join(tmp, "params"))
    os.makedirs(os.path.join(tmp, "optim"))
    names = []
    for i, (name, p) in enumerate(state.model.named_parameters()):
        write_container(os.path.join(tmp, "params", f"{i:04d}.ptn"), p.data)
        names.append(name)
    opt_names = []
    for i, (name, arr) in enumerate(state.optimizer.state_arrays().items()):
        write_container(os.path.join(tmp, "optim", f"{i:04d}.ptn"), arr)
        opt_names.append(name)
    manifest = {
        "format": "ptnet-checkpoint/1",
        "epoch": state.epoch,
        "optimizer_step": state.optimizer.t,
        "config": state.config.to_dict(),
        "vocab": state.model.vocab.tokens,
        "params": names,
        "optimizer": opt_names,
        "dwa_history": state.dwa.history,
        "log": state.log,
        "bank_provenance": state.bank_provenance,
    }
    with open(os.path.join(tmp, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    os.replace(tmp, path)


def load_checkpoint(path) -> TrainState:
    with open(os.path.join(path, "manifest.json"), encoding="utf-8") as fh:
        man = json.load(fh)
    config = RunConfig.from_dict(man["config"])
    vocab = Vocabulary([t for t in man["vocab"]])
    if vocab.tokens != man["vocab"]:
        raise ValueError("checkpoint vocabulary is not in canonical order")
    model = build_model(config, vocab)
    arrays = {n: read_container(os.path.join(path, "params", f"{i:04d}.ptn"))
              for i, n in enumerate(man["params"])}
    model.load_state_dict(arrays)
    opt = make_optimizer(model, config)
    opt_arrays = {n: read_container(os.path.join(path, "optim", f"{i:04d}.ptn"))
                  for i, n in enumerate(man["optimizer"])}
    opt.load_state_arrays(opt_arrays, man["optimizer_step"])
    dwa = DwaState(config.train.dwa_temperature, [tuple(h) for h in man["dwa_history"]])
    return TrainState(model, opt, dwa, config, man["epoch"], man["log"], man.get("bank_provenance"))


def save_bank(bank: PrototypeBank, path, force=False):
    """Bank directory: prototypes, cluster centers and provenance."""
    if os.path.exists(path) and not force:
        raise FileExistsError(f"{path} exists; pass force to overwrite")
    os.makedirs(path, exist_ok=True)
    write_container(os.path.join(path, "prototypes.ptn"), bank.prototypes.astype(np.float32))
    write_container(os.path.join(path, "centers.ptn"), bank.clusters.centers)
    meta = dict(bank.provenance, sigma=bank.sigma, tau=bank.clusters.tau)
    with open(os.path.join(path, "provenance.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def load_bank(path) -> PrototypeBank:
    with open(os.path.join(path, "provenance.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    centers = read_container(os.path.join(path, "centers.ptn"))
    protos = read_container(os.path.join(path, "prototypes.ptn"))
    return PrototypeBank(protos, ClusterModel(centers, meta.get("tau", 1.0)), meta["sigma"], meta)
