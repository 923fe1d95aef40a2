"""Independent plain-numpy oracles for the test suite.

Everything here recomputes model outputs from raw parameter arrays with
explicit loops, no tape, no Tensor class, so agreement with the package is
evidence and not tautology.
"""

import math

import numpy as np


def softmax_vec(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def attend(pvec, keys, wq, wk):
    d = keys.shape[-1]
    q = pvec @ wq
    scores = np.array([q @ (keys[j] @ wk) for j in range(keys.shape[0])]) / math.sqrt(d)
    a = softmax_vec(scores)
    ctx = np.zeros(d)
    for j in range(keys.shape[0]):
        ctx += a[j] * keys[j]
    return ctx, a


def param_vec(tokens, vocab, emb):
    ids = vocab.encode(tokens)
    return emb[ids].mean(axis=0)


def text_cnn_vec(x, w, b, widths, proj_w, proj_b):
    longest = max(widths)
    if x.shape[0] < longest:
        x = np.vstack([x, np.zeros((longest - x.shape[0], x.shape[1]))])
    pooled = []
    for k in widths:
        L, d = x.shape
        oc = w[k].shape[0]
        conv = np.zeros((L - k + 1, oc))
        for p in range(L - k + 1):
            for o in range(oc):
                acc = b[k][o]
                for i in range(k):
                    acc += w[k][o, i] @ x[p + i]
                conv[p, o] = acc
        pooled.append(np.maximum(conv, 0.0).max(axis=0))
    return np.concatenate(pooled) @ proj_w + proj_b


def np_weights(model):
    """Raw numpy views of every module weight the oracle needs."""
    g = lambda n: model.params[n].data
    return {
        "emb": g("embed.E"),
        "find_wq": g("nm.find.wq"),
        "find_wk": g("nm.find.wk"),
        "sum_w": g("nm.sum.w"),
        "sum_b": g("nm.sum.b"),
        "cnn_w": {k: g(f"nm.cnn.k{k}.w") for k in (3, 4, 5)},
        "cnn_b": {k: g(f"nm.cnn.k{k}.b") for k in (3, 4, 5)},
        "cnn_proj_w": g("nm.cnn.proj.w"),
        "cnn_proj_b": g("nm.cnn.proj.b"),
        "where_wq": g("nm.where.wq"),
        "where_wk": g("nm.where.wk"),
        "when_wq": g("nm.when.wq"),
        "when_wk": g("nm.when.wk"),
        "desc_w": g("nm.desc.w"),
    }


def dialogue_oracle(program, hist, q, w, vocab):
    """Straight-line find/summarize composition; hist and q are numpy."""
    from watchdial.programs import ModuleKind

    ents = []
    for step in program.steps:
        if step.module is ModuleKind.FIND:
            p = param_vec(step.param, vocab, w["emb"])
            ctx, _ = attend(p, hist, w["find_wq"], w["find_wk"])
            ents.append(ctx + p)
    if not ents:
        return q.mean(axis=0, keepdims=True)
    rows = []
    for h in ents:
        u = h @ w["sum_w"] + w["sum_b"]
        rows.append(text_cnn_vec(q + u, w["cnn_w"], w["cnn_b"], (3, 4, 5),
                                 w["cnn_proj_w"], w["cnn_proj_b"]))
    return np.stack(rows)


def video_oracle(program, streams, q, w, vocab):
    """Straight-line where/when/describe composition over the three streams.

    ``streams`` are numpy (obj (F,O,d), cnn (F,d), aud (F,d)). Returns the
    (vis, aud) context grids, each (N_ent, N_act, d).
    """
    from watchdial.programs import ModuleKind

    v_obj, v_cnn, v_aud = streams
    f, o, d = v_obj.shape

    ent = {"obj": [], "cnn": [], "aud": []}
    for step in program.steps:
        if step.module is not ModuleKind.WHERE:
            continue
        p = param_vec(step.param, vocab, w["emb"])
        track = np.zeros((f, d))
        qv = p @ w["where_wq"]
        for t in range(f):
            scores = np.array([qv @ (v_obj[t, j] @ w["where_wk"]) for j in range(o)])
            a = softmax_vec(scores / math.sqrt(d))
            for j in range(o):
                track[t] += a[j] * v_obj[t, j]
        ent["obj"].append(track)
        for name, stream in (("cnn", v_cnn), ("aud", v_aud)):
            ctx, _ = attend(p, stream, w["where_wq"], w["where_wk"])
            ent[name].append(stream + ctx[None, :])
    ent = {m: np.stack(v) for m, v in ent.items()}
    n_ent = ent["obj"].shape[0]

    actions = [param_vec(s.param, vocab, w["emb"])
               for s in program.steps if s.module is ModuleKind.WHEN]
    if not actions:
        actions = [q.mean(axis=0)]
    ea = {}
    for m, tracks in ent.items():
        grid = np.zeros((n_ent, len(actions), d))
        for j, p in enumerate(actions):
            for i in range(n_ent):
                ctx, _ = attend(p, tracks[i], w["when_wq"], w["when_wk"])
                grid[i, j] = ctx
        ea[m] = grid

    terminal = program.steps[-1]
    if terminal.module is ModuleKind.DESCRIBE:
        p = param_vec(terminal.param, vocab, w["emb"])
    else:
        p = q.mean(axis=0)
    out = {}
    for m, grid in ea.items():
        ctx = np.zeros_like(grid)
        for i in range(grid.shape[0]):
            for j in range(grid.shape[1]):
                ctx[i, j] = np.concatenate([grid[i, j], p]) @ w["desc_w"]
        out[m] = ctx
    return 0.5 * (out["obj"] + out["cnn"]), out["aud"]


def bleu4_oracle(candidates, references):
    """Reference BLEU: clipped corpus counts, geometric mean, brevity penalty."""

    def counts(tokens, n):
        out = {}
        for i in range(len(tokens) - n + 1):
            g = tuple(tokens[i : i + n])
            out[g] = out.get(g, 0) + 1
        return out

    log_p_sum = 0.0
    c_total = r_total = 0
    for n in range(1, 5):
        match = total = 0
        for cand, ref in zip(candidates, references):
            cg, rg = counts(cand, n), counts(ref, n)
            match += sum(min(v, rg.get(g, 0)) for g, v in cg.items())
            total += max(0, len(cand) - n + 1)
        if match == 0 or total == 0:
            return 0.0
        log_p_sum += 0.25 * math.log(match / total)
    for cand, ref in zip(candidates, references):
        c_total += len(cand)
        r_total += len(ref)
    if c_total == 0:
        return 0.0
    bp = 1.0 if c_total > r_total else math.exp(1.0 - r_total / c_total)
    return bp * math.exp(log_p_sum)
