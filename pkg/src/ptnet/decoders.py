"""Detection and caption heads.

The detection branch upsamples detection-oriented tokens to a per-pixel
change logit map.  Its finest internal map is pooled into a handful of
detection tokens that are prepended, together with projected caption
features, to the input of a small causal language model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import MLP, LayerNorm, Linear, Module, TransformerBlock, causal_mask
from .tensor import Tensor

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
BCE_EPS = 1e-7


# -- detection --------------------------------------------------------------------

def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """[B, h, w, r*r*c] -> [B, h*r, w*r, c]."""
    B, h, w, rrc = x.shape
    c = rrc // (r * r)
    x = x.reshape(B, h, w, r, r, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, h * r, w * r, c)


class Conv3x3(Module):
    """Same-padded 3x3 convolution expressed as im2col + matmul."""

    def __init__(self, rng, c_in, c_out):
        self.proj = Linear(rng, 9 * c_in, c_out)

    def __call__(self, x: Tensor) -> Tensor:
        B, h, w, _ = x.shape
        p = T.pad2d(x, 1)
        cols = [p[:, dy:dy + h, dx:dx + w, :] for dy in range(3) for dx in range(3)]
        return self.proj(T.concat(cols, axis=-1))


class UpStage(Module):
    """2x learned upsampling followed by a residual 3x3 mixing conv."""

    def __init__(self, rng, c_in, c_out):
        self.up = Linear(rng, c_in, 4 * c_out)
        self.conv = Conv3x3(rng, c_out, c_out)

    def __call__(self, x):
        y = pixel_shuffle(self.up(x), 2)
        return T.relu(y + self.conv(T.relu(y)))


class DetectionHead(Module):
    def __init__(self, rng, dim, grid, image_size, channels=(32, 16), prior=0.01):
        if not 0.0 < prior < 1.0:
            raise ValueError("prior must be in (0, 1)")
        up = image_size // (4 * grid)
        if up * 4 * grid != image_size:
            raise ValueError("image size must be 4 * grid * integer")
        self.grid = grid
        self.image_size = image_size
        self.final_up = up
        # normalizes the gated, fused features before decoding
        self.norm = LayerNorm(dim)
        self.stage1 = UpStage(rng, dim, channels[0])
        self.stage2 = UpStage(rng, channels[0], channels[1])
        # small logits around a rare-change prior, so early training neither
        # saturates the clamped loss nor spends epochs learning the base rate
        self.logit = Linear(rng, channels[1], up * up, scale=0.1)
        self.logit.bias.data[:] = np.log(prior / (1.0 - prior))

    def __call__(self, od: Tensor):
        """Returns (logits [B, H, W], finest feature map [B, 4g, 4g, c])."""
        B, N, D = od.shape
        g = int(round(np.sqrt(N)))
        if g * g != N:
            raise ValueError(f"token count {N} is not a square grid")
        x = self.norm(od).reshape(B, g, g, D)
        fs2 = self.stage2(self.stage1(x))
        logits = pixel_shuffle(self.logit(fs2), self.final_up)
        H = logits.shape[1]
        return logits.reshape(B, H, H), fs2


def detect_mask(od: Tensor, head: DetectionHead):
    return head(od)


def detection_loss(logits: Tensor, mask: np.ndarray, eps=BCE_EPS) -> Tensor:
    """Mean binary cross-entropy between sigmoid(logits) and a 0/1 mask."""
    mask = np.asarray(mask)
    if mask.shape != logits.shape:
        raise ValueError(f"mask shape {mask.shape} != logits shape {logits.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be binary")
    y = mask.astype(logits.dtype)
    p = T.clip(T.sigmoid(logits), eps, 1.0 - eps)
    ll = T.log(p) * y + T.log(1.0 - p) * (1.0 - y)
    return -ll.mean()


def adaptive_pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Averaging matrix [n_out, n_in] with bins [floor(i n/m), ceil((i+1) n/m))."""
    if n_out > n_in:
        raise ValueError(f"cannot pool {n_in} cells into {n_out}")
    P = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        P[i, lo:hi] = 1.0 / (hi - lo)
    return P


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """[B, h, w, c] -> [B, out_h, out_w, c]."""
    B, h, w, c = x.shape
    ph = T.tensor(adaptive_pool_matrix(h, out_h), dtype=x.dtype)
    pw = T.tensor(adaptive_pool_matrix(w, out_w).T, dtype=x.dtype)
    y = x.transpose(0, 3, 1, 2)              # [B, c, h, w]
    y = ph @ y @ pw                          # [B, c, out_h, out_w]
    return y.transpose(0, 2, 3, 1)


class DetectionTokenEncoder(Module):
    def __init__(self, rng, c_in, k_d, hm=2, wm=2):
        self.hm, self.wm = hm, wm
        self.mlp = MLP(rng, c_in, k_d, k_d)

    def __call__(self, fs2: Tensor) -> Tensor:
        pooled = adaptive_avg_pool(fs2, self.hm, self.wm)
        B, _, _, c = pooled.shape
        return self.mlp(pooled.reshape(B, self.hm * self.wm, c))


# -- captioning -------------------------------------------------------------------

class Vocabulary:
    def __init__(self, words):
        words = [w for w in words if w not in SPECIALS]
        self.tokens = list(SPECIALS) + sorted(set(words))
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    pad_id = property(lambda self: self.index[PAD])
    bos_id = property(lambda self: self.index[BOS])
    eos_id = property(lambda self: self.index[EOS])

    def encode(self, words):
        unk = self.index[UNK]
        return [self.index.get(w, unk) for w in words]

    def decode(self, ids):
        out = []
        for i in ids:
            tok = self.tokens[int(i)]
            if tok == EOS:
                break
            if tok in (PAD, BOS):
                continue
            out.append(tok)
        return out


@dataclass
class TeacherBatch:
    inputs: np.ndarray   # [B, L+1] BOS + words, padded
    targets: np.ndarray  # [B, L+1] words + EOS, padded
    valid: np.ndarray    # [B, L+1] bool


def make_teacher_batch(token_lists, vocab: Vocabulary, max_len: int) -> TeacherBatch:
    longest = max(len(t) for t in token_lists)
    if longest > max_len:
        raise ValueError(f"caption of {longest} tokens exceeds max length {max_len}")
    B, L = len(token_lists), longest + 1
    inputs = np.full((B, L), vocab.pad_id, dtype=np.int64)
    targets = np.full((B, L), vocab.pad_id, dtype=np.int64)
    valid = np.zeros((B, L), dtype=bool)
    for b, words in enumerate(token_lists):
        ids = vocab.encode(words)
        n = len(ids)
        inputs[b, 0] = vocab.bos_id
        inputs[b, 1:n + 1] = ids
        targets[b, :n] = ids
        targets[b, n] = vocab.eos_id
        valid[b, :n + 1] = True
    return TeacherBatch(inputs, targets, valid)


class CaptionDecoder(Module):
    def __init__(self, rng, vocab: Vocabulary, feat_dim, d_lm=64, heads=2, layers=2,
                 max_len=16, max_prefix=64):
        self.vocab = vocab
        self.d_lm = d_lm
        self.max_len = max_len
        self.token_embed = T.parameter(rng.normal(0.0, 0.02, size=(len(vocab), d_lm)))
        self.prompt = T.parameter(rng.normal(0.0, 0.02, size=(1, d_lm)))
        self.project = Linear(rng, feat_dim, d_lm)
        self.pos = T.parameter(rng.normal(0.0, 0.02, size=(max_prefix + max_len + 1, d_lm)))
        self.blocks = [TransformerBlock(rng, d_lm, heads) for _ in range(layers)]
        self.ln_out = LayerNorm(d_lm)
        self.head = Linear(rng, d_lm, len(vocab))

    def assemble(self, oc: Tensor, det_tokens: Tensor | None = None) -> Tensor:
        """Prompt, then detection tokens (if any), then projected caption features."""
        B = oc.shape[0]
        prompt = self.prompt.reshape(1, 1, self.d_lm) + np.zeros((B, 1, self.d_lm), dtype=oc.dtype)
        parts = [prompt]
        if det_tokens is not None:
            if det_tokens.shape[-1] != self.d_lm:
                raise ValueError(f"detection token width {det_tokens.shape[-1]} != LM width {self.d_lm}")
            parts.append(det_tokens)
        parts.append(self.project(oc))
        return T.concat(parts, axis=1)

    def hidden(self, prefix: Tensor, input_ids: np.ndarray) -> Tensor:
        """Last-layer hidden states for the caption positions [B, L, d_lm]."""
        P = prefix.shape[1]
        L = input_ids.shape[1]
        x = T.concat([prefix, T.embedding(self.token_embed, input_ids)], axis=1)
        x = x + self.pos[:P + L]
        mask = causal_mask(P + L, x.dtype)
        for block in self.blocks:
            x = block(x, mask)
        return self.ln_out(x[:, P:])

    def logits(self, prefix, input_ids):
        h = self.hidden(prefix, input_ids)
        return self.head(h), h

    def caption_loss(self, prefix: Tensor, batch: TeacherBatch):
        """Mean token cross-entropy over valid caption positions.

        Returns (loss, hidden states [B, L, d_lm]).
        """
        logits, h = self.logits(prefix, batch.inputs)
        logp = T.log_softmax_last(logits)
        b_idx, t_idx = np.nonzero(batch.valid)
        picked = logp[b_idx, t_idx, batch.targets[b_idx, t_idx]]
        return -picked.mean(), h

    def greedy_decode(self, prefix: Tensor, max_len=None):
        """Argmax decoding until EOS or ``max_len`` words; returns id lists."""
        max_len = self.max_len if max_len is None else max_len
        B = prefix.shape[0]
        ids = np.full((B, 1), self.vocab.bos_id, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        out = [[] for _ in range(B)]
        with T.no_grad():
            for _ in range(max_len + 1):
                logits, _ = self.logits(prefix, ids)
                nxt = np.argmax(logits.data[:, -1], axis=-1)
                for b in range(B):
                    if done[b]:
                        continue
                    if nxt[b] == self.vocab.eos_id or len(out[b]) >= max_len:
                        done[b] = True
                    else:
                        out[b].append(int(nxt[b]))
                if done.all():
                    break
                ids = np.concatenate([ids, nxt[:, None]], axis=1)
        return out
