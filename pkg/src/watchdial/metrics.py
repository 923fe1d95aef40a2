"""Evaluation: program exact match, response token accuracy, corpus BLEU4.

BLEU4 is corpus-level with clipped n-gram counts, no smoothing (any zero
n-gram precision zeroes the score) and the standard brevity penalty. Token
accuracy compares positions up to the shorter of prediction and gold, which
complements BLEU on the short single-sentence responses this corpus has.
"""

import math
from collections import Counter
from dataclasses import dataclass

from .errors import DataError
from .programs import program_exact_match


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidates, references):
    """Corpus-level BLEU with 4-gram geometric mean and brevity penalty."""
    if len(candidates) != len(references):
        raise DataError("BLEU needs one reference per candidate")
    matches = [0] * 4
    totals = [0] * 4
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, 5):
            cgrams = _ngrams(cand, n)
            rgrams = _ngrams(ref, n)
            matches[n - 1] += sum(min(c, rgrams[g]) for g, c in cgrams.items())
            totals[n - 1] += max(0, len(cand) - n + 1)
    if cand_len == 0:
        return 0.0
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if any(p == 0.0 for p in precisions):
        return 0.0
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(sum(math.log(p) for p in precisions) / 4.0)


def token_accuracy(predictions, golds):
    """Position-wise match rate, each pair truncated to its shorter length."""
    matched = 0
    total = 0
    for pred, gold in zip(predictions, golds):
        m = min(len(pred), len(gold))
        total += m
        matched += sum(1 for i in range(m) if pred[i] == gold[i])
    return matched / total if total else 0.0


@dataclass
class Metrics:
    dialogue_program_em: float
    video_program_em: float
    response_token_accuracy: float
    bleu4: float
    n_samples: int
    n_dialogue_correct: int
    n_video_correct: int

    def to_dict(self):
        return {
            "dialogue_program_em": self.dialogue_program_em,
            "video_program_em": self.video_program_em,
            "response_token_accuracy": self.response_token_accuracy,
            "bleu4": self.bleu4,
            "n_samples": self.n_samples,
            "n_dialogue_correct": self.n_dialogue_correct,
            "n_video_correct": self.n_video_correct,
        }


def check_vocab_coverage(vocab, samples):
    """Every token the pipeline will see must be a known vocabulary entry."""
    for s in samples:
        seen = set(s.history) | set(s.question) | set(s.response)
        for prog in (s.dial_program, s.video_program):
            for step in prog.steps:
                seen.update(step.param)
        missing = sorted(t for t in seen if t not in vocab)
        if missing:
            raise DataError(
                f"sample {s.video_id} turn {s.turn_index} uses tokens outside the "
                f"checkpoint vocabulary: {missing[:5]}")


def evaluate_samples(model, samples):
    """Full predicted-program pipeline over a split; deterministic per model."""
    if not samples:
        raise DataError("nothing to evaluate: empty split")
    check_vocab_coverage(model.vocab, samples)
    n_dial = 0
    n_vid = 0
    responses = []
    golds = []
    for s in samples:
        pred = model.predict(s)
        if pred.dial_program is not None and program_exact_match(pred.dial_program,
                                                                 s.dial_program):
            n_dial += 1
        if pred.video_program is not None and program_exact_match(pred.video_program,
                                                                  s.video_program):
            n_vid += 1
        responses.append(pred.response)
        golds.append(list(s.response))
    n = len(samples)
    return Metrics(
        dialogue_program_em=n_dial / n,
        video_program_em=n_vid / n,
        response_token_accuracy=token_accuracy(responses, golds),
        bleu4=bleu4(responses, golds),
        n_samples=n,
        n_dialogue_correct=n_dial,
        n_video_correct=n_vid,
    )
