"""End-to-end model: parameter schema, per-sample losses, full inference.

The inference order is fixed by the architecture: parse the dialogue
program, execute it over the history to get the question context, parse the
video program (which attends over that context), execute it over the video
streams, fuse modalities, then decode the response. During training the two
executions run on the gold programs (program-level teacher forcing); at
inference they run on the predicted ones.
"""

from dataclasses import dataclass, field

from .encoders import decoder_prefix, encode_text, project_video
from .errors import ConfigError, ProgramError
from .modules import execute_dialogue_program, execute_video_program
from .programs import (
    DIALOGUE,
    VIDEO,
    ModuleKind,
    Program,
    ProgramStep,
    parse_program,
    serialize_program,
)
from .seqmodels import beam_search, fuse_modalities, greedy_decode, run_stack, vocab_logits
from .tensor import ConvBank, cross_entropy_label_smoothed

CNN_WIDTHS = (3, 4, 5)
STACK_LAYOUT = {"dial": 2, "vid": 3, "res": 3}  # attention blocks per layer

GLOROT, ZEROS, ONES = "glorot", "zeros", "ones"


def param_specs(config, vocab_size):
    """Full parameter schema: (name, shape, init kind, fan_in, fan_out).

    The order is the draw order during initialization, so it is part of the
    determinism contract; append only.
    """
    d = config.d
    dv, da = config.d_vis, config.d_aud
    ff = 2 * d
    specs = [
        ("embed.E", (vocab_size, d), GLOROT, vocab_size, d),
        ("enc.ln.gain", (d,), ONES, 0, 0),
        ("enc.ln.bias", (d,), ZEROS, 0, 0),
        ("video.coord.w", (4, dv), GLOROT, 4, dv),
        ("video.coord.b", (dv,), ZEROS, 0, 0),
        ("video.obj.w", (2 * dv, d), GLOROT, 2 * dv, d),
        ("video.obj.b", (d,), ZEROS, 0, 0),
        ("video.cnn.w", (dv, d), GLOROT, dv, d),
        ("video.cnn.b", (d,), ZEROS, 0, 0),
        ("video.aud.w", (da, d), GLOROT, da, d),
        ("video.aud.b", (d,), ZEROS, 0, 0),
        ("nm.find.wq", (d, d), GLOROT, d, d),
        ("nm.find.wk", (d, d), GLOROT, d, d),
        ("nm.sum.w", (d, d), GLOROT, d, d),
        ("nm.sum.b", (d,), ZEROS, 0, 0),
        ("nm.where.wq", (d, d), GLOROT, d, d),
        ("nm.where.wk", (d, d), GLOROT, d, d),
        ("nm.when.wq", (d, d), GLOROT, d, d),
        ("nm.when.wk", (d, d), GLOROT, d, d),
        ("nm.desc.w", (2 * d, d), GLOROT, 2 * d, d),
        ("fuse.w", (3 * d, 2), GLOROT, 3 * d, 2),
    ]
    for k in CNN_WIDTHS:
        specs.append((f"nm.cnn.k{k}.w", (d, k, d), GLOROT, k * d, d))
        specs.append((f"nm.cnn.k{k}.b", (d,), ZEROS, 0, 0))
    specs.append(("nm.cnn.proj.w", (len(CNN_WIDTHS) * d, d), GLOROT, len(CNN_WIDTHS) * d, d))
    specs.append(("nm.cnn.proj.b", (d,), ZEROS, 0, 0))
    for role, n_blocks in STACK_LAYOUT.items():
        for layer in range(config.depth):
            for b in range(n_blocks):
                p = f"dec.{role}.{layer}.{b}."
                for proj in ("q", "k", "v", "o"):
                    specs.append((p + proj + "_w", (d, d), GLOROT, d, d))
                    specs.append((p + proj + "_b", (d,), ZEROS, 0, 0))
                specs.append((p + "ln1_g", (d,), ONES, 0, 0))
                specs.append((p + "ln1_b", (d,), ZEROS, 0, 0))
                specs.append((p + "ff1_w", (d, ff), GLOROT, d, ff))
                specs.append((p + "ff1_b", (ff,), ZEROS, 0, 0))
                specs.append((p + "ff2_w", (ff, d), GLOROT, ff, d))
                specs.append((p + "ff2_b", (d,), ZEROS, 0, 0))
                specs.append((p + "ln2_g", (d,), ONES, 0, 0))
                specs.append((p + "ln2_b", (d,), ZEROS, 0, 0))
    return specs


FALLBACK_DIAL = Program(DIALOGUE, (ProgramStep((), ModuleKind.SUMMARIZE),))


@dataclass
class Prediction:
    dial_program: object  # Program or None when parsing failed
    video_program: object
    response: list  # word tokens
    dial_tokens: list = field(default_factory=list)
    video_tokens: list = field(default_factory=list)
    trace: object = None


class Model:
    """Parameter store plus every forward path of the architecture."""

    def __init__(self, config, vocab, params):
        if config.d % config.heads != 0:
            raise ConfigError(f"d={config.d} not divisible by heads={config.heads}")
        self.config = config
        self.vocab = vocab
        self.params = params
        self._module_weights = {
            "emb": params["embed.E"],
            "find_wq": params["nm.find.wq"],
            "find_wk": params["nm.find.wk"],
            "sum_w": params["nm.sum.w"],
            "sum_b": params["nm.sum.b"],
            "where_wq": params["nm.where.wq"],
            "where_wk": params["nm.where.wk"],
            "when_wq": params["nm.when.wq"],
            "when_wk": params["nm.when.wk"],
            "desc_w": params["nm.desc.w"],
            "cnn_bank": ConvBank(
                CNN_WIDTHS,
                {k: params[f"nm.cnn.k{k}.w"] for k in CNN_WIDTHS},
                {k: params[f"nm.cnn.k{k}.b"] for k in CNN_WIDTHS},
                params["nm.cnn.proj.w"],
                params["nm.cnn.proj.b"],
            ),
        }
        self._video_weights = {
            "coord_w": params["video.coord.w"],
            "coord_b": params["video.coord.b"],
            "obj_w": params["video.obj.w"],
            "obj_b": params["video.obj.b"],
            "cnn_w": params["video.cnn.w"],
            "cnn_b": params["video.cnn.b"],
            "aud_w": params["video.aud.w"],
            "aud_b": params["video.aud.b"],
        }
        self._stacks = {}
        for role, n_blocks in STACK_LAYOUT.items():
            layers = []
            for layer in range(config.depth):
                blocks = []
                for b in range(n_blocks):
                    p = f"dec.{role}.{layer}.{b}."
                    blocks.append(
                        {key: params[p + key]
                         for key in ("q_w", "q_b", "k_w", "k_b", "v_w", "v_b", "o_w", "o_b",
                                     "ln1_g", "ln1_b", "ff1_w", "ff1_b", "ff2_w", "ff2_b",
                                     "ln2_g", "ln2_b")})
                layers.append(blocks)
            self._stacks[role] = layers

    # -- encoding ----------------------------------------------------------

    def encode(self, token_ids):
        p = self.params
        return encode_text(token_ids, p["embed.E"], p["enc.ln.gain"], p["enc.ln.bias"])

    def encode_history(self, history_tokens):
        # SOS doubles as the empty-history sentinel so FIND always has a row
        ids = [self.vocab.sos] + self.vocab.encode(history_tokens)
        return self.encode(ids)

    def encode_prefix(self, token_ids):
        p = self.params
        return decoder_prefix(token_ids, self.vocab.sos, p["embed.E"], p["enc.ln.gain"],
                              p["enc.ln.bias"])

    def project_video(self, video, rng=None, train=False):
        return project_video(video, self._video_weights, drop=self.config.dropout,
                             rng=rng, train=train)

    # -- program execution --------------------------------------------------

    def run_dialogue_program(self, program, hist_enc, q_enc, trace=None):
        return execute_dialogue_program(program, hist_enc, q_enc, self._module_weights,
                                        self.vocab, trace)

    def run_video_program(self, program, streams, q_enc, trace=None):
        return execute_video_program(program, streams, q_enc, self._module_weights,
                                     self.vocab, trace)

    def fuse(self, q_enc, video_ctx, trace=None):
        fused, _ = fuse_modalities(q_enc, video_ctx.vis_seq, video_ctx.aud_seq,
                                   self.params["fuse.w"], trace)
        return fused

    # -- decoder stacks ------------------------------------------------------

    def stack_logits(self, role, prefix_ids, contexts, rng=None, train=False, trace=None):
        """Teacher-forcing logits (len(prefix)+1, |V|) for one decoder stack."""
        x = self.encode_prefix(prefix_ids)
        x = run_stack(x, [None] + contexts, self._stacks[role], self.config.heads,
                      drop=self.config.dropout, rng=rng, train=train, trace=trace)
        return vocab_logits(x, self.params["embed.E"])

    # -- losses --------------------------------------------------------------

    def sample_loss_terms(self, sample, rng=None, train=False):
        """Label-smoothed CE terms (dial, vid, res), each a scalar tensor.

        Contexts come from executing the gold programs; all three sequence
        losses are teacher-forced.
        """
        v = self.vocab
        eps = self.config.eps_ls
        hist = self.encode_history(sample.history)
        q = self.encode(v.encode(sample.question))

        dial_ids = v.encode(serialize_program(sample.dial_program))
        dial_logits = self.stack_logits("dial", dial_ids, [q], rng=rng, train=train)
        l_dial = cross_entropy_label_smoothed(dial_logits, dial_ids + [v.eos], eps)

        q_ctx = self.run_dialogue_program(sample.dial_program, hist, q)
        vid_ids = v.encode(serialize_program(sample.video_program))
        vid_logits = self.stack_logits("vid", vid_ids, [q, q_ctx], rng=rng, train=train)
        l_vid = cross_entropy_label_smoothed(vid_logits, vid_ids + [v.eos], eps)

        streams = self.project_video(sample.video, rng=rng, train=train)
        v_ctx = self.run_video_program(sample.video_program, streams, q)
        fused = self.fuse(q, v_ctx)
        res_ids = v.encode(sample.response)
        res_logits = self.stack_logits("res", res_ids, [q_ctx, fused], rng=rng, train=train)
        l_res = cross_entropy_label_smoothed(res_logits, res_ids + [v.eos], eps)
        return l_dial, l_vid, l_res

    # -- inference -----------------------------------------------------------

    def _decode_program(self, role, contexts, kind):
        v = self.vocab

        def step(tokens):
            logits = self.stack_logits(role, list(tokens), contexts)
            return logits.data[-1]

        ids = greedy_decode(step, self.config.max_program_len, v.eos)
        words = v.decode([t for t in ids if t != v.eos])
        try:
            return parse_program(words, kind), words
        except ProgramError:
            return None, words

    def predict(self, sample, trace=None):
        """Full pipeline on one sample using predicted programs throughout."""
        v = self.vocab
        hist = self.encode_history(sample.history)
        q = self.encode(v.encode(sample.question))

        dial_prog, dial_words = self._decode_program("dial", [q], DIALOGUE)
        exec_dial = dial_prog if dial_prog is not None else FALLBACK_DIAL
        q_ctx = self.run_dialogue_program(exec_dial, hist, q, trace)

        vid_prog, vid_words = self._decode_program("vid", [q, q_ctx], VIDEO)
        exec_vid = vid_prog if vid_prog is not None else self._fallback_video(sample)
        streams = self.project_video(sample.video)
        v_ctx = self.run_video_program(exec_vid, streams, q, trace)
        fused = self.fuse(q, v_ctx, trace)

        def step(tokens):
            logits = self.stack_logits("res", list(tokens), [q_ctx, fused])
            return logits.data[-1]

        ranked = beam_search(step, self.config.beam_width, self.config.max_response_len,
                             v.eos)
        best = ranked[0][0] if ranked else ()
        response = v.decode([t for t in best if t != v.eos])
        return Prediction(dial_program=dial_prog, video_program=vid_prog,
                          response=response, dial_tokens=dial_words,
                          video_tokens=vid_words, trace=trace)

    @staticmethod
    def _fallback_video(sample):
        # ground the whole question so execution can always proceed
        return Program(VIDEO, (ProgramStep(tuple(sample.question), ModuleKind.WHERE),
                               ProgramStep((), ModuleKind.EXIST)))
