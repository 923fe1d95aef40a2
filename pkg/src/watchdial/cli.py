"""Command line surface: data generation, training, evaluation, inspection.

Exit codes: 0 success, 1 usage error, 2 data/model error.
"""

import argparse
import json
import sys
import tempfile

import numpy as np

from .corpus import WorldSpec, generate_corpus, load_corpus, load_video_features, parse_record
from .encoders import tokenize
from .errors import WatchdialError
from .metrics import evaluate_samples
from .model import FALLBACK_DIAL
from .programs import DIALOGUE, VIDEO
from .tensor import grad_check
from .training import (
    TrainConfig,
    joint_loss,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train,
)

GRAD_TOL = 1e-4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def build_parser():
    p = _Parser(prog="watchdial", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dialogue corpus")
    g.add_argument("--spec", help="world spec file (key = value); built-in default if omitted")
    g.add_argument("--n", type=int, required=True, help="number of dialogues")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True, help="output corpus directory")

    t = sub.add_parser("train", help="train on a generated corpus")
    t.add_argument("--config", help="training config file; defaults if omitted")
    t.add_argument("--data", required=True, help="corpus directory")
    t.add_argument("--out", required=True, help="checkpoint output path")
    t.add_argument("--resume", help="resume from a .state checkpoint")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--json", action="store_true", help="emit one JSON record")

    q = sub.add_parser("parse", help="print predicted programs for a question")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--question", required=True)
    q.add_argument("--history", default="", help="dialogue history text (may be empty)")

    x = sub.add_parser("exec", help="run the full pipeline on one corpus record")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--sample", required=True,
                   help="file whose first line is a corpus record; the video sidecar is "
                        "resolved against a videos/ directory next to it")

    c = sub.add_parser("gradcheck", help="finite-difference check of the gradient engine")
    c.add_argument("--full", action="store_true", help="more ops and more coordinates")
    return p


# ---------------------------------------------------------------------------
# gradcheck harness


def _tiny_world():
    return WorldSpec(
        entities=(("the boy", "he"), ("the dog", "it"), ("the cat", "it")),
        actions=("running", "sleeping"),
        frames=2,
        objects=2,
        d_vis=4,
        d_aud=3,
        turns_min=2,
        turns_max=2,
        coref_rate=1.0,
    )


def tiny_training_setup(seed=7, dtype="float64"):
    """A d=8, 2-head model plus a generated sample, for verification suites."""
    from .training import init_params
    from .model import Model

    with tempfile.TemporaryDirectory() as tmp:
        corp = generate_corpus(_tiny_world(), 6, seed, tmp)
        sample = next(
            (s for s in corp.train
             if s.dial_program.n_find >= 1 and s.video_program.n_when >= 1),
            corp.train[-1],
        )
        config = TrainConfig(d=8, heads=2, dropout=0.0, dtype=dtype, seed=seed,
                             d_vis=4, d_aud=3, warmup_steps=10, batch=2)
        params = init_params(config, len(corp.vocab))
        model = Model(config, corp.vocab, params)
        return model, sample, corp


def rich_sample(seed=5):
    """Hand-built sample with multi-entity, multi-action programs.

    The generated corpus never emits more than one FIND or WHEN per turn, so
    gradient coverage of the multi-row attention paths needs this one.
    """
    from .corpus import DialogueSample
    from .encoders import VideoFeatures
    from .programs import parse_program

    rng = np.random.default_rng(seed)
    f, o, dv, da = 2, 2, 4, 3
    video = VideoFeatures(
        obj=rng.standard_normal((f, o, dv)),
        obj_coords=rng.random((f, o, 4)),
        cnn=rng.standard_normal((f, dv)),
        aud=rng.standard_normal((f, da)),
    )
    return DialogueSample(
        video_id="rich",
        video=video,
        history="what is the boy doing the boy is running where is the dog".split(),
        question="is he it".split(),
        dial_program=parse_program("he FIND it FIND SUMMARIZE", DIALOGUE),
        video_program=parse_program(
            "the boy WHERE the dog WHERE running WHEN sleeping WHEN EXIST", VIDEO),
        response="yes the boy is running".split(),
        turn_index=2,
    )


def run_gradcheck(full=False):
    """(report lines, worst relative error) for ops and the full joint loss."""
    from .tensor import (
        Tensor, add, concat, conv1d, cross_entropy_label_smoothed, layer_norm,
        matmul, max_rows, mean, mul, relu, softmax_lastdim, sum_,
    )
    from .tensor import ParamStore

    rng = np.random.default_rng(11)
    lines = []
    worst = 0.0

    def check(name, builder, shapes, samples=None):
        nonlocal worst
        store = ParamStore()
        for pname, shape in shapes.items():
            store.add(pname, Tensor(rng.standard_normal(shape)))
        err = grad_check(lambda: builder(store), store, samples=samples, rng=rng)
        worst = max(worst, err)
        lines.append(f"{name:<24} max rel err {err:.3e}  "
                     f"{'ok' if err <= GRAD_TOL else 'FAIL'}")

    check("matmul", lambda s: sum_(matmul(s["a"], s["b"])), {"a": (3, 4), "b": (4, 2)})
    check("softmax_lastdim", lambda s: sum_(mul(softmax_lastdim(s["x"]), s["w"])),
          {"x": (3, 5), "w": (3, 5)})
    check("layer_norm",
          lambda s: sum_(mul(layer_norm(s["x"], s["g"], s["b"]), s["w"])),
          {"x": (3, 6), "g": (6,), "b": (6,), "w": (3, 6)})
    check("conv1d", lambda s: sum_(relu(conv1d(s["x"], s["w"], s["b"]))),
          {"x": (6, 3), "w": (4, 3, 3), "b": (4,)})
    check("cross_entropy",
          lambda s: cross_entropy_label_smoothed(s["z"], [1, 3, 0], 0.1),
          {"z": (3, 5)})
    check("elementwise",
          lambda s: sum_(relu(add(mul(s["x"], s["y"]), mean(s["x"], axis=0)))),
          {"x": (4, 3), "y": (4, 3)})
    check("pooling",
          lambda s: sum_(concat([max_rows(s["x"]), mean(s["x"], axis=0)], axis=-1)),
          {"x": (5, 4)})

    model, sample, _ = tiny_training_setup()
    batch = [sample, rich_sample()]
    n_coords = 200 if full else 100

    def loss_fn():
        loss, _ = joint_loss(model, batch, train=False)
        return loss

    err = grad_check(loss_fn, model.params, samples=n_coords,
                     rng=np.random.default_rng(3))
    worst = max(worst, err)
    lines.append(f"{'joint_loss (tiny model)':<24} max rel err {err:.3e}  "
                 f"{'ok' if err <= GRAD_TOL else 'FAIL'}")
    return lines, worst


# ---------------------------------------------------------------------------
# commands


def _cmd_gen_data(args):
    spec = WorldSpec.from_file(args.spec) if args.spec else WorldSpec()
    corp = generate_corpus(spec, args.n, args.seed, args.out)
    print(f"wrote corpus to {args.out}: "
          f"{len(corp.train)} train / {len(corp.val)} val / {len(corp.test)} test turns, "
          f"vocab {len(corp.vocab)}")
    return 0


def _cmd_train(args):
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    corp = load_corpus(args.data)
    result = train(corp, config, resume_from=args.resume)
    save_checkpoint(args.out, result.best_checkpoint)
    save_checkpoint(args.out + ".state", result.last_checkpoint)
    with open(args.out + ".log", "w", encoding="utf-8") as f:
        for record in result.log:
            f.write(json.dumps(record) + "\n")
    last = result.log[-1]
    print(f"trained {last['epoch']} epochs ({last['step']} steps); "
          f"final train loss {last['total']:.4f}, val loss {last['val_total']:.4f}")
    print(f"checkpoint: {args.out}  log: {args.out}.log")
    return 0


def _cmd_eval(args):
    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    corp = load_corpus(args.data)
    metrics = evaluate_samples(model, corp.split(args.split))
    if args.json:
        print(json.dumps(metrics.to_dict()))
    else:
        for key, value in metrics.to_dict().items():
            print(f"{key}: {value}")
    return 0


def _cmd_parse(args):
    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    question = tokenize(args.question)
    history = tokenize(args.history)
    q = model.encode(model.vocab.encode(question))
    hist = model.encode_history(history)
    dial_prog, dial_words = model._decode_program("dial", [q], DIALOGUE)
    exec_dial = dial_prog if dial_prog is not None else FALLBACK_DIAL
    q_ctx = model.run_dialogue_program(exec_dial, hist, q)
    vid_prog, vid_words = model._decode_program("vid", [q, q_ctx], VIDEO)
    print(f"dialogue program: {' '.join(dial_words)}"
          + ("" if dial_prog is not None else "  [invalid]"))
    print(f"video program: {' '.join(vid_words)}"
          + ("" if vid_prog is not None else "  [invalid]"))
    return 0


def _summarize_attention(label, arr):
    rows = np.atleast_2d(arr)
    peaks = ", ".join(f"{r.argmax()}:{r.max():.2f}" for r in rows[:6])
    more = "" if rows.shape[0] <= 6 else f" (+{rows.shape[0] - 6} rows)"
    return f"  [{label}] {rows.shape[0]}x{rows.shape[1]} peak per row -> {peaks}{more}"


def _cmd_exec(args):
    from pathlib import Path

    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    path = Path(args.sample)
    line = next((ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()),
                None)
    if line is None:
        raise WatchdialError(f"no record found in {path}")
    video_id = line.split("\t", 1)[0]
    video_path = path.parent / "videos" / f"{video_id}.bin"
    sample = parse_record(line, 1, {video_id: load_video_features(video_path)})
    trace = []
    pred = model.predict(sample, trace=trace)
    print(f"question: {' '.join(sample.question)}")
    print(f"dialogue program: {' '.join(pred.dial_tokens)}"
          + ("" if pred.dial_program is not None else "  [invalid]"))
    print(f"video program: {' '.join(pred.video_tokens)}"
          + ("" if pred.video_program is not None else "  [invalid]"))
    print("attention:")
    for label, arr in trace:
        print(_summarize_attention(label, arr))
    print(f"response: {' '.join(pred.response)}")
    print(f"gold response: {' '.join(sample.response)}")
    return 0


def _cmd_gradcheck(args):
    lines, worst = run_gradcheck(full=args.full)
    for line in lines:
        print(line)
    ok = worst <= GRAD_TOL
    print(f"worst relative error {worst:.3e} ({'PASS' if ok else 'FAIL'} at {GRAD_TOL:g})")
    return 0 if ok else 2


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "parse": _cmd_parse,
    "exec": _cmd_exec,
    "gradcheck": _cmd_gradcheck,
}


def cli_run(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if e.code is not None else 0
    try:
        return _COMMANDS[args.command](args)
    except WatchdialError as e:
        sys.stderr.write(f"error: {e}\n")
        return 2
    except FileNotFoundError as e:
        sys.stderr.write(f"error: {e}\n")
        return 2


def main():
    sys.exit(cli_run(sys.argv[1:]))


if __name__ == "__main__":
    main()
