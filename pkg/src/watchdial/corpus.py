"""Synthetic micro-world corpus: videos, dialogues, gold programs.

Each dialogue gets a tiny world (a few entities in object slots, one action
each, a left/right placement) rendered into three deterministic feature
streams, then a handful of templated Q/A turns over it. Later turns may
refer back to the most recently mentioned entity with its pronoun; gold
dialogue programs list exactly those pronoun mentions as FIND parameters,
and gold video programs carry the resolved entity names.

On disk a corpus is three line-delimited text files (one turn per line, six
tab-separated fields) plus one shape-prefixed little-endian float32 sidecar
per video and the vocabulary file.
"""

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoders import RESERVED, VideoFeatures, Vocab, tokenize
from .errors import ConfigError, DataError
from .programs import (
    DIALOGUE,
    VIDEO,
    ModuleKind,
    Program,
    ProgramStep,
    parse_program,
    serialize_program,
)

DEFAULT_ENTITIES = (
    ("the boy", "he"),
    ("the girl", "she"),
    ("the man", "he"),
    ("the woman", "she"),
    ("the dog", "it"),
    ("the cat", "it"),
    ("the bird", "it"),
    ("the horse", "it"),
)
DEFAULT_ACTIONS = ("sleeping", "running", "eating", "jumping", "standing", "sitting")


@dataclass
class WorldSpec:
    entities: tuple = DEFAULT_ENTITIES
    actions: tuple = DEFAULT_ACTIONS
    frames: int = 4
    objects: int = 3
    d_vis: int = 16
    d_aud: int = 8
    turns_min: int = 1
    turns_max: int = 3
    coref_rate: float = 0.5

    def __post_init__(self):
        if self.objects > len(self.entities):
            raise ConfigError(
                f"{self.objects} object slots but only {len(self.entities)} entities")
        if not 0.0 <= self.coref_rate <= 1.0:
            raise ConfigError("coref_rate must be in [0, 1]")
        if self.turns_min < 1 or self.turns_max < self.turns_min:
            raise ConfigError("turn count range must satisfy 1 <= min <= max")

    def to_text(self):
        ents = "|".join(f"{name}:{pron}" for name, pron in self.entities)
        return (
            f"entities = {ents}\n"
            f"actions = {'|'.join(self.actions)}\n"
            f"frames = {self.frames}\n"
            f"objects = {self.objects}\n"
            f"d_vis = {self.d_vis}\n"
            f"d_aud = {self.d_aud}\n"
            f"turns_min = {self.turns_min}\n"
            f"turns_max = {self.turns_max}\n"
            f"coref_rate = {self.coref_rate!r}\n"
        )

    @classmethod
    def from_text(cls, text):
        kwargs = {}
        for ln, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep:
                raise ConfigError(f"bad world spec line {ln}: {line!r}")
            if key == "entities":
                ents = []
                for item in value.split("|"):
                    name, sep2, pron = item.partition(":")
                    if not sep2:
                        raise ConfigError(f"entity {item!r} needs a name:pronoun pair")
                    ents.append((name.strip(), pron.strip()))
                kwargs["entities"] = tuple(ents)
            elif key == "actions":
                kwargs["actions"] = tuple(a.strip() for a in value.split("|"))
            elif key == "coref_rate":
                kwargs["coref_rate"] = float(value)
            elif key in ("frames", "objects", "d_vis", "d_aud", "turns_min", "turns_max"):
                kwargs[key] = int(value)
            else:
                raise ConfigError(f"unknown world spec key {key!r}")
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read())


@dataclass
class DialogueSample:
    video_id: str
    video: VideoFeatures
    history: list
    question: list
    dial_program: Program
    video_program: Program
    response: list
    turn_index: int


@dataclass
class Corpus:
    train: list
    val: list
    test: list
    vocab: Vocab
    root: Path = None

    def split(self, name):
        try:
            return getattr(self, name)
        except AttributeError:
            raise DataError(f"unknown split {name!r}")


# ---------------------------------------------------------------------------
# world rendering


def _unit_rows(rng, n, d):
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _action_pattern(action_idx, frames):
    """Contiguous activation span (wrap-around), at least half the frames."""
    span = frames // 2 + 1
    start = action_idx % frames
    pat = np.zeros(frames)
    for i in range(span):
        pat[(start + i) % frames] = 1.0
    return pat


class _Prototypes:
    """Corpus-level feature prototypes; fixed by (spec, seed)."""

    def __init__(self, spec, seed):
        rng = np.random.default_rng((seed, 0xFEED))
        self.ent_vis = _unit_rows(rng, len(spec.entities), spec.d_vis)
        self.act_vis = _unit_rows(rng, len(spec.actions), spec.d_vis)
        self.act_aud = _unit_rows(rng, len(spec.actions), spec.d_aud)
        self.patterns = np.stack(
            [_action_pattern(a, spec.frames) for a in range(len(spec.actions))])


def _render_video(spec, protos, rng, entity_idx, action_idx, sides):
    f, o = spec.frames, spec.objects
    pat = protos.patterns[action_idx]  # (o, f)
    obj = np.empty((f, o, spec.d_vis))
    coords = np.empty((f, o, 4))
    for s in range(o):
        base = protos.ent_vis[entity_idx[s]]
        act = 0.8 * protos.act_vis[action_idx[s]]
        cx = rng.uniform(0.15, 0.35) if sides[s] == "left" else rng.uniform(0.65, 0.85)
        cy = rng.uniform(0.3, 0.7)
        bw, bh = rng.uniform(0.1, 0.25, size=2)
        for t in range(f):
            obj[t, s] = base + pat[s, t] * act + 0.05 * rng.standard_normal(spec.d_vis)
            jitter = 0.01 * rng.standard_normal(4)
            coords[t, s] = np.clip([cx, cy, bw, bh] + jitter, 0.0, 1.0)
    gates = pat.T[:, :, None]  # (f, o, 1)
    cnn = (gates * protos.act_vis[action_idx]).mean(axis=1)
    cnn = cnn + 0.05 * rng.standard_normal((f, spec.d_vis))
    aud = (gates * protos.act_aud[action_idx]).mean(axis=1)
    aud = aud + 0.05 * rng.standard_normal((f, spec.d_aud))
    return VideoFeatures(
        obj=obj.astype(np.float32),
        obj_coords=coords.astype(np.float32),
        cnn=cnn.astype(np.float32),
        aud=aud.astype(np.float32),
    )


def _dialogue_turns(spec, rng, entity_idx, action_idx, sides):
    """Templated turns over one world; returns per-turn record dicts."""
    turns = []
    history = []
    mentioned = []  # slot indices, in mention order
    n_turns = int(rng.integers(spec.turns_min, spec.turns_max + 1))
    for t in range(n_turns):
        coref = bool(t > 0 and mentioned and rng.random() < spec.coref_rate)
        slot = mentioned[-1] if coref else int(rng.integers(spec.objects))
        name, pronoun = spec.entities[entity_idx[slot]]
        name_toks = tuple(name.split())
        action = spec.actions[action_idx[slot]]
        subject = (pronoun,) if coref else name_toks

        qtype = ("action", "where", "yesno")[int(rng.integers(3))]
        if qtype == "action":
            question = ["what", "is", *subject, "doing"]
            video_prog = Program(VIDEO, (
                ProgramStep(name_toks, ModuleKind.WHERE),
                ProgramStep(("doing",), ModuleKind.DESCRIBE),
            ))
            response = [*name_toks, "is", action]
        elif qtype == "where":
            question = ["where", "is", *subject]
            video_prog = Program(VIDEO, (
                ProgramStep(name_toks, ModuleKind.WHERE),
                ProgramStep(("where",), ModuleKind.DESCRIBE),
            ))
            response = [*name_toks, "is", "on", "the", sides[slot]]
        else:
            truthy = bool(rng.random() < 0.5)
            if truthy:
                queried = action
            else:
                others = [a for a in spec.actions if a != action]
                queried = others[int(rng.integers(len(others)))]
            question = ["is", *subject, queried]
            video_prog = Program(VIDEO, (
                ProgramStep(name_toks, ModuleKind.WHERE),
                ProgramStep((queried,), ModuleKind.WHEN),
                ProgramStep((), ModuleKind.EXIST),
            ))
            if queried == action:
                response = ["yes", *name_toks, "is", queried]
            else:
                response = ["no", *name_toks, "is", "not", queried]

        steps = ((ProgramStep((pronoun,), ModuleKind.FIND),) if coref else ())
        dial_prog = Program(DIALOGUE, steps + (ProgramStep((), ModuleKind.SUMMARIZE),))

        turns.append({
            "history": list(history),
            "question": question,
            "dial_program": dial_prog,
            "video_program": video_prog,
            "response": response,
            "turn_index": t,
        })
        history.extend(question)
        history.extend(response)
        mentioned.append(slot)
    return turns


def generate_corpus(spec, n_dialogues, seed, out_dir):
    """Write train/val/test records, per-video sidecars, and the vocabulary.

    Pure function of (spec, n_dialogues, seed): re-running produces
    byte-identical files.
    """
    if n_dialogues < 1:
        raise ConfigError("need at least one dialogue")
    out = Path(out_dir)
    (out / "videos").mkdir(parents=True, exist_ok=True)
    protos = _Prototypes(spec, seed)

    n_eval = n_dialogues // 10 if n_dialogues >= 10 else (1 if n_dialogues >= 3 else 0)
    bounds = {
        "train": range(0, n_dialogues - 2 * n_eval),
        "val": range(n_dialogues - 2 * n_eval, n_dialogues - n_eval),
        "test": range(n_dialogues - n_eval, n_dialogues),
    }

    tokens = set()
    for split, idxs in bounds.items():
        lines = []
        for i in idxs:
            rng = np.random.default_rng((seed, i))
            entity_idx = rng.choice(len(spec.entities), size=spec.objects, replace=False)
            action_idx = rng.integers(len(spec.actions), size=spec.objects)
            sides = ["left" if rng.random() < 0.5 else "right" for _ in range(spec.objects)]
            video_id = f"v{i:06d}"
            video = _render_video(spec, protos, rng, entity_idx, action_idx, sides)
            save_video_features(out / "videos" / f"{video_id}.bin", video)
            for turn in _dialogue_turns(spec, rng, entity_idx, action_idx, sides):
                fields = [
                    video_id,
                    " ".join(turn["history"]),
                    " ".join(turn["question"]),
                    " ".join(serialize_program(turn["dial_program"])),
                    " ".join(serialize_program(turn["video_program"])),
                    " ".join(turn["response"]),
                ]
                lines.append("\t".join(fields) + "\n")
                tokens.update(turn["question"])
                tokens.update(turn["response"])
                for prog in (turn["dial_program"], turn["video_program"]):
                    for s in prog.steps:
                        tokens.update(s.param)
        with open(out / f"{split}.txt", "w", encoding="utf-8") as f:
            f.writelines(lines)

    vocab = Vocab(tokens - set(RESERVED))
    vocab.save(out / "vocab.txt")
    with open(out / "world.txt", "w", encoding="utf-8") as f:
        f.write(spec.to_text())
    return load_corpus(out)


# ---------------------------------------------------------------------------
# disk format


def save_video_features(path, video):
    parts = []
    for arr in (video.obj, video.obj_coords, video.cnn, video.aud):
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_video_features(path):
    with open(path, "rb") as f:
        buf = f.read()
    pos = 0
    arrays = []
    for _ in range(4):
        if pos + 4 > len(buf):
            raise DataError(f"truncated feature file {path}")
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape))
        if pos + 4 * size > len(buf):
            raise DataError(f"truncated feature file {path}")
        arrays.append(np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape))
        pos += 4 * size
    if pos != len(buf):
        raise DataError(f"trailing bytes in feature file {path}")
    return VideoFeatures(obj=arrays[0], obj_coords=arrays[1], cnn=arrays[2], aud=arrays[3])


def parse_record(line, lineno, videos):
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 6:
        raise DataError(f"record line {lineno} has {len(parts)} fields, expected 6")
    video_id, history, question, dial, vid, response = parts
    if video_id not in videos:
        raise DataError(f"record line {lineno} references unknown video {video_id!r}")
    return DialogueSample(
        video_id=video_id,
        video=videos[video_id],
        history=tokenize(history),
        question=tokenize(question),
        dial_program=parse_program(tokenize(dial), DIALOGUE),
        video_program=parse_program(tokenize(vid), VIDEO),
        response=tokenize(response),
        turn_index=-1,
    )


def load_split(root, name, videos):
    path = Path(root) / f"{name}.txt"
    if not path.exists():
        raise DataError(f"missing split file {path}")
    samples = []
    turn_of = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            sample = parse_record(line, lineno, videos)
            sample.turn_index = turn_of.get(sample.video_id, 0)
            turn_of[sample.video_id] = sample.turn_index + 1
            samples.append(sample)
    return samples


def load_corpus(root):
    root = Path(root)
    videos = {}
    vdir = root / "videos"
    if not vdir.is_dir():
        raise DataError(f"missing video feature directory {vdir}")
    for p in sorted(vdir.glob("*.bin")):
        videos[p.stem] = load_video_features(p)
    vocab = Vocab.load(root / "vocab.txt")
    return Corpus(
        train=load_split(root, "train", videos),
        val=load_split(root, "val", videos),
        test=load_split(root, "test", videos),
        vocab=vocab,
        root=root,
    )


def corpus_digest(root):
    """SHA-256 over every corpus file, for determinism checks."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
