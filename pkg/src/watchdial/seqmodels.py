"""Decoder stacks for program parsing and response generation.

Each stack is a chain of attention blocks (multi-head attention, residual,
layer norm, position-wise feed-forward, residual, layer norm; post-norm
placement). The dialogue-program parser uses self + question attention, the
video-program parser adds attention over the executed question context, and
the response decoder attends over question context and fused video context.
Vocabulary logits always come from the transposed embedding matrix, so the
output projection and the embedding are one storage.
"""

import math
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    Tensor,
    add,
    concat,
    dropout,
    layer_norm,
    matmul,
    mean,
    mul,
    permute,
    relu,
    reshape,
    scale,
    slice_last,
    softmax_lastdim,
    tile_rows,
    transpose_last2,
)

NEG_INF = -1e9  # additive mask value; exp() underflows to an exact zero


@lru_cache(maxsize=None)
def _causal_mask(length, dtype_name):
    m = np.triu(np.full((length, length), NEG_INF, dtype=np.dtype(dtype_name)), k=1)
    m.setflags(write=False)
    return m


def multi_head_attention(q, k, v, w, heads, mask=None, drop=0.0, rng=None, train=False,
                         trace=None):
    """Multi-head scaled dot-product attention -> (Lq, d).

    ``w`` holds the four projections (wq/wk/wv/wo with biases). ``mask`` is
    an additive (Lq, Lk) array; pass the causal mask for self-attention.
    """
    lq, d = q.shape
    lk = k.shape[0]
    if d % heads != 0:
        raise ConfigError(f"model dim {d} not divisible by {heads} heads")
    dh = d // heads

    def project(x, name):
        p = add(matmul(x, w[name + "_w"]), w[name + "_b"])
        return permute(reshape(p, (x.shape[0], heads, dh)), (1, 0, 2))

    qh = project(q, "q")
    kh = project(k, "k")
    vh = project(v, "v")
    scores = scale(matmul(qh, transpose_last2(kh)), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = add(scores, Tensor(mask))
    attn = softmax_lastdim(scores)
    if trace is not None:
        trace.append(("mha", attn.data.reshape(heads * lq, lk).copy()))
    attn = dropout(attn, drop, rng, train)
    ctx = reshape(permute(matmul(attn, vh), (1, 0, 2)), (lq, d))
    return add(matmul(ctx, w["o_w"]), w["o_b"])


def attention_block(x, kv, w, heads, causal=False, drop=0.0, rng=None, train=False,
                    trace=None):
    """One decoder sublayer pair: attention then feed-forward, post-norm."""
    mask = _causal_mask(x.shape[0], x.dtype.name) if causal else None
    att = multi_head_attention(x, kv, kv, w, heads, mask=mask, drop=drop, rng=rng,
                               train=train, trace=trace)
    x = layer_norm(add(x, dropout(att, drop, rng, train)), w["ln1_g"], w["ln1_b"])
    ff = add(matmul(relu(add(matmul(x, w["ff1_w"]), w["ff1_b"])), w["ff2_w"]), w["ff2_b"])
    x = layer_norm(add(x, dropout(ff, drop, rng, train)), w["ln2_g"], w["ln2_b"])
    return x


def run_stack(prefix_enc, sources, blocks, heads, drop=0.0, rng=None, train=False,
              trace=None):
    """Run a decoder stack over an encoded prefix.

    ``sources`` maps block index within a layer to its cross-attention input;
    index 0 is always causal self-attention. ``blocks`` is the per-layer list
    of weight dicts produced by the model schema.
    """
    x = prefix_enc
    for layer in blocks:
        for i, w in enumerate(layer):
            kv = sources[i]
            x = attention_block(x, x if kv is None else kv, w, heads,
                                causal=kv is None, drop=drop, rng=rng, train=train,
                                trace=trace)
    return x


def vocab_logits(x, emb):
    """Project stack outputs onto the vocabulary via the tied embedding."""
    return matmul(x, transpose_last2(emb))


def fuse_modalities(q_enc, vis_seq, aud_seq, fuse_w, trace=None):
    """Blend visual and audio context rows with learned per-row weights.

    Returns (fused (n, d), weights (n, 2)); each weights row is a softmax
    over the two modalities.
    """
    if vis_seq.shape != aud_seq.shape:
        raise ShapeError(
            f"fusion inputs must agree, got {vis_seq.shape} vs {aud_seq.shape}")
    n = vis_seq.shape[0]
    q_stack = tile_rows(mean(q_enc, axis=0), n)
    feats = concat([q_stack, vis_seq, aud_seq], axis=-1)
    weights = softmax_lastdim(matmul(feats, fuse_w))
    if trace is not None:
        trace.append(("fusion", weights.data.copy()))
    fused = add(mul(vis_seq, slice_last(weights, 0, 1)),
                mul(aud_seq, slice_last(weights, 1, 2)))
    return fused, weights


# ---------------------------------------------------------------------------
# decoding


def _log_softmax(z):
    m = z.max()
    e = np.exp(z - m)
    return (z - m) - np.log(e.sum())


def greedy_decode(step_fn, max_len, eos_id):
    """Argmax decoding; ties go to the lower token index."""
    tokens = ()
    while len(tokens) < max_len:
        logits = np.asarray(step_fn(tokens))
        tokens = tokens + (int(logits.argmax()),)
        if tokens[-1] == eos_id:
            break
    return tokens


def beam_search(step_fn, beam_width, max_len, eos_id):
    """Length-capped beam search, ranked by length-normalized log-probability.

    ``step_fn(prefix_tokens)`` returns next-token logits. Hypotheses finish
    on EOS or at ``max_len``; score ties break toward the lexicographically
    smaller token sequence. Returns at most ``beam_width`` hypotheses as
    (tokens, normalized score) pairs, best first.
    """
    if beam_width < 1:
        raise ValueError(f"beam width must be >= 1, got {beam_width}")
    live = [((), 0.0)]
    finished = []
    while live:
        cands = []
        for toks, lp in live:
            logp = _log_softmax(np.asarray(step_fn(toks), dtype=np.float64))
            cands.extend((toks + (t,), lp + float(logp[t])) for t in range(logp.shape[0]))
        cands.sort(key=lambda c: (-c[1], c[0]))
        del cands[beam_width:]
        live = []
        for toks, lp in cands:
            if toks[-1] == eos_id or len(toks) >= max_len:
                finished.append((toks, lp))
            else:
                live.append((toks, lp))
    finished.sort(key=lambda c: (-(c[1] / len(c[0])), c[0]))
    return [(toks, lp / len(toks)) for toks, lp in finished[:beam_width]]
