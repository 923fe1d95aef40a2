"""Composable neural modules and the executor that chains them per program.

Dialogue understanding runs FIND steps (pronoun/entity grounding against the
history) and one SUMMARIZE (entity-conditioned question compression). Video
understanding runs WHERE steps (spatial grounding on the object stream,
temporal grounding on the frame/audio streams), WHEN steps (entity-aware
temporal selection) and one terminal DESCRIBE or EXIST.

All attention here is single-head scaled dot-product with learned query/key
maps; the attended values are the raw inputs.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ProgramError, ShapeError
from .programs import DIALOGUE, VIDEO, ModuleKind, validate_program
from .tensor import (
    Tensor,
    add,
    concat,
    embedding,
    matmul,
    mean,
    reshape,
    scale,
    softmax_lastdim,
    stack,
    text_cnn,
    tile_rows,
    transpose_last2,
)


def param_embedding(tokens, vocab, emb):
    """Average-pooled embedding of a parameter's word tokens -> (d,)."""
    ids = vocab.encode(tokens)
    if not ids:
        raise ShapeError("parameter embedding needs at least one token")
    return mean(embedding(emb, ids), axis=0)


def _attend(pvec, keys, wq, wk):
    """Scaled dot-product of one query vector against key rows.

    Returns (context (d,), attention weights (n,)); the weighted sum runs
    over the raw key rows.
    """
    d = keys.shape[-1]
    q = matmul(reshape(pvec, (1, -1)), wq)
    k = matmul(keys, wk)
    scores = scale(matmul(q, transpose_last2(k)), 1.0 / math.sqrt(d))
    attn = softmax_lastdim(scores)
    ctx = matmul(attn, keys)
    return reshape(ctx, (-1,)), reshape(attn, (-1,))


def find(pvec, hist, wq, wk, trace=None):
    """Ground an entity mention against dialogue history tokens -> (d,)."""
    ctx, attn = _attend(pvec, hist, wq, wk)
    if trace is not None:
        trace.append(("find", attn.data.copy()))
    return add(ctx, pvec)


def summarize(h_ent, q_enc, sum_w, sum_b, bank):
    """Entity-conditioned question summary -> (N_ent, d).

    Each contextual entity vector is linearly mapped, tiled across question
    positions, summed onto the question encoding, and compressed by the conv
    bank. With no entities the summary degenerates to the mean-pooled
    question (one row).
    """
    lq = q_enc.shape[0]
    if not h_ent:
        return reshape(mean(q_enc, axis=0), (1, -1))
    rows = []
    for h in h_ent:
        u = add(matmul(reshape(h, (1, -1)), sum_w), sum_b)
        q_ent = add(q_enc, tile_rows(reshape(u, (-1,)), lq))
        rows.append(text_cnn(q_ent, bank))
    return stack(rows, axis=0)


def where_obj(pvec, v_obj, wq, wk, trace=None):
    """Per-frame spatial attention over object slots -> (F, d)."""
    f, o, d = v_obj.shape
    q = matmul(reshape(pvec, (1, -1)), wq)
    k = matmul(reshape(v_obj, (f * o, d)), wk)
    scores = scale(reshape(matmul(k, transpose_last2(q)), (f, o)), 1.0 / math.sqrt(d))
    attn = softmax_lastdim(scores)
    if trace is not None:
        trace.append(("where_obj", attn.data.copy()))
    out = matmul(reshape(attn, (f, 1, o)), v_obj)
    return reshape(out, (f, d))


def where_temporal(pvec, v_t, wq, wk, trace=None):
    """Temporal attention over frame rows, added back residually -> (F, d)."""
    f = v_t.shape[0]
    ctx, attn = _attend(pvec, v_t, wq, wk)
    if trace is not None:
        trace.append(("where_temporal", attn.data.copy()))
    return add(v_t, tile_rows(ctx, f))


def when(pvec, v_ent, wq, wk, trace=None):
    """Entity-aware temporal selection for one action -> (N_ent, d)."""
    n, f, d = v_ent.shape
    if n < 1:
        raise ShapeError("when() needs at least one grounded entity track")
    q = matmul(reshape(pvec, (1, -1)), wq)
    k = matmul(reshape(v_ent, (n * f, d)), wk)
    scores = scale(reshape(matmul(k, transpose_last2(q)), (n, f)), 1.0 / math.sqrt(d))
    attn = softmax_lastdim(scores)
    if trace is not None:
        trace.append(("when", attn.data.copy()))
    out = matmul(reshape(attn, (n, 1, f)), v_ent)
    return reshape(out, (n, d))


def describe(pvec, v_ea, desc_w):
    """Blend entity-action features with the parameter -> (N_ent, N_act, d)."""
    n, a, d = v_ea.shape
    if desc_w.shape[0] != 2 * d:
        raise ShapeError(f"describe weight must be (2d, d); got {desc_w.shape} for d={d}")
    flat = reshape(v_ea, (n * a, d))
    p_stack = tile_rows(pvec, n * a)
    out = matmul(concat([flat, p_stack], axis=-1), desc_w)
    return reshape(out, (n, a, d))


def exist(q_enc, v_ea, desc_w):
    """describe() with the mean-pooled question as the parameter."""
    return describe(mean(q_enc, axis=0), v_ea, desc_w)


@dataclass
class VideoContext:
    """Per-modality context grids plus their pooled sequence forms.

    The sequence form stacks action-marginal means (one row per entity) over
    entity-marginal means (one row per action), giving (N_ent + N_act, d).
    """

    vis: Tensor
    aud: Tensor
    vis_seq: Tensor
    aud_seq: Tensor
    n_ent: int
    n_act: int


def _sequence_form(v_ctx):
    ent_rows = mean(v_ctx, axis=1)
    act_rows = mean(v_ctx, axis=0)
    return concat([ent_rows, act_rows], axis=0)


def _check(program, kind):
    if program.kind != kind:
        raise ProgramError("bad-kind", f"expected a {kind} program, got {program.kind}")
    violations = validate_program(program)
    if violations:
        v = violations[0]
        raise ProgramError(v.code, v.message, step=v.step)


def execute_dialogue_program(program, hist_enc, q_enc, w, vocab, trace=None):
    """Run FIND steps then SUMMARIZE -> question context (max(N_ent,1), d)."""
    _check(program, DIALOGUE)
    h_ent = []
    for step in program.steps:
        if step.module is ModuleKind.FIND:
            p = param_embedding(step.param, vocab, w["emb"])
            h_ent.append(find(p, hist_enc, w["find_wq"], w["find_wk"], trace))
    return summarize(h_ent, q_enc, w["sum_w"], w["sum_b"], w["cnn_bank"])


def execute_video_program(program, streams, q_enc, w, vocab, trace=None):
    """Run WHERE/WHEN steps and the terminal over all three streams.

    ``streams`` is the (obj (F,O,d), cnn (F,d), aud (F,d)) triple from
    project_video. The visual context is the mean of the object-level and
    frame-level results; audio stays its own modality for fusion.
    """
    _check(program, VIDEO)
    v_obj, v_cnn, v_aud = streams

    tracks = {"obj": [], "cnn": [], "aud": []}
    for step in program.steps:
        if step.module is ModuleKind.WHERE:
            p = param_embedding(step.param, vocab, w["emb"])
            tracks["obj"].append(where_obj(p, v_obj, w["where_wq"], w["where_wk"], trace))
            tracks["cnn"].append(where_temporal(p, v_cnn, w["where_wq"], w["where_wk"], trace))
            tracks["aud"].append(where_temporal(p, v_aud, w["where_wq"], w["where_wk"], trace))
    v_ent = {m: stack(t, axis=0) for m, t in tracks.items()}

    action_vecs = [
        param_embedding(s.param, vocab, w["emb"])
        for s in program.steps
        if s.module is ModuleKind.WHEN
    ]
    if not action_vecs:
        action_vecs = [mean(q_enc, axis=0)]  # null action when the program has no WHEN
    v_ea = {
        m: stack([when(p, v_ent[m], w["when_wq"], w["when_wk"], trace) for p in action_vecs],
                 axis=1)
        for m in v_ent
    }

    terminal = program.steps[-1]
    if terminal.module is ModuleKind.DESCRIBE:
        p = param_embedding(terminal.param, vocab, w["emb"])
        ctx = {m: describe(p, v_ea[m], w["desc_w"]) for m in v_ea}
    else:
        ctx = {m: exist(q_enc, v_ea[m], w["desc_w"]) for m in v_ea}

    vis = scale(add(ctx["obj"], ctx["cnn"]), 0.5)
    aud = ctx["aud"]
    return VideoContext(
        vis=vis,
        aud=aud,
        vis_seq=_sequence_form(vis),
        aud_seq=_sequence_form(aud),
        n_ent=program.n_where,
        n_act=max(program.n_when, 1),
    )
