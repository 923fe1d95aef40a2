"""Joint optimization of parsers, module weights, and the response decoder.

One loss, three label-smoothed cross-entropy terms: dialogue program, video
program, response, combined as ``alpha * L_dial + beta * L_vid + L_res``.
Contexts during training come from executing the gold programs. Everything
is seeded: same (seed, corpus, config) reproduces logs and checkpoints
bit-for-bit on one platform.
"""

import dataclasses
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .encoders import Vocab
from .errors import CheckpointError, ConfigError, DataError, DivergenceError
from .model import Model, param_specs
from .tensor import ParamStore, Tape, Tensor, add, backward, scale

log = logging.getLogger(__name__)

_MAGIC = b"WDCP"
_VERSION = 1


@dataclass
class TrainConfig:
    d: int = 128
    heads: int = 8
    depth: int = 1
    batch: int = 32
    alpha: float = 1.0
    beta: float = 1.0
    eps_ls: float = 0.1
    dropout: float = 0.2
    warmup_steps: int = 15000
    max_epochs: int = 50
    seed: int = 0
    beam_width: int = 5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    clip_norm: float = 5.0
    dtype: str = "float32"
    d_vis: int = 16
    d_aud: int = 8
    max_program_len: int = 24
    max_response_len: int = 20

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights alpha and beta must be non-negative")
        if self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        if not 0.0 <= self.eps_ls < 1.0:
            raise ConfigError("label smoothing must be in [0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout rate must be in [0, 1)")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_text(self):
        lines = []
        for f in sorted(dataclasses.fields(self), key=lambda f: f.name):
            lines.append(f"{f.name} = {getattr(self, f.name)!r}\n")
        return "".join(lines)

    @classmethod
    def from_text(cls, text):
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for ln, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if not sep or key not in types:
                raise ConfigError(f"bad config line {ln}: {line!r}")
            tp = types[key]
            if tp in (int, "int"):
                kwargs[key] = int(value)
            elif tp in (float, "float"):
                kwargs[key] = float(value)
            else:
                kwargs[key] = value.strip("'\"")
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read())


def noam_lr(step, d, warmup):
    """Inverse-sqrt schedule with linear warmup: d^-0.5 * min(s^-0.5, s*w^-1.5)."""
    if step < 1:
        raise ValueError(f"schedule is defined for step >= 1, got {step}")
    return d ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def glorot_bound(fan_in, fan_out):
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(config, vocab_size, seed=None):
    """Draw the full parameter set; weight matrices uniform in the Glorot
    bound, biases zero, norm gains one. Same seed, same bits."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    dt = config.np_dtype
    params = ParamStore()
    for name, shape, kind, fan_in, fan_out in param_specs(config, vocab_size):
        if kind == "glorot":
            b = glorot_bound(fan_in, fan_out)
            data = rng.uniform(-b, b, size=shape).astype(dt)
        elif kind == "ones":
            data = np.ones(shape, dt)
        else:
            data = np.zeros(shape, dt)
        params.add(name, Tensor(data))
    return params


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros(cls, params):
        state = cls()
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params, state, lr, betas=(0.9, 0.98), eps=1e-9):
    """Standard bias-corrected Adam update applied in place."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_global_norm(params, max_norm):
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for _, p in params.items():
        if p.grad is not None:
            total += float(np.square(p.grad, dtype=np.float64).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        factor = max_norm / norm
        for _, p in params.items():
            if p.grad is not None:
                p.grad = (p.grad * p.grad.dtype.type(factor))
        log.info("gradient norm %.3f clipped to %.1f", norm, max_norm)
        return True
    return False


def joint_loss(model, samples, rng=None, train=False):
    """Batch-mean joint loss and its per-term breakdown.

    The breakdown is exact: parts["total"] equals
    ``alpha * parts["dial"] + beta * parts["vid"] + parts["res"]`` evaluated
    in the model dtype, because the optimized tensor is built the same way.
    """
    if not samples:
        raise DataError("joint_loss needs a nonempty batch")
    cfg = model.config
    d_sum = v_sum = r_sum = None
    for s in samples:
        if s.dial_program is None or s.video_program is None:
            raise DataError(f"sample {s.video_id} is missing a gold program")
        ld, lv, lr_ = model.sample_loss_terms(s, rng=rng, train=train)
        d_sum = ld if d_sum is None else add(d_sum, ld)
        v_sum = lv if v_sum is None else add(v_sum, lv)
        r_sum = lr_ if r_sum is None else add(r_sum, lr_)
    inv = 1.0 / len(samples)
    d_mean = scale(d_sum, inv)
    v_mean = scale(v_sum, inv)
    r_mean = scale(r_sum, inv)
    loss = add(add(scale(d_mean, cfg.alpha), scale(v_mean, cfg.beta)), r_mean)
    dt = model.config.np_dtype.type
    parts = {
        "dial": dt(d_mean.data),
        "vid": dt(v_mean.data),
        "res": dt(r_mean.data),
        "total": dt(loss.data),
    }
    return loss, parts


@dataclass
class Checkpoint:
    """Config + vocab + named float32 tensors, serialized canonically."""

    config: TrainConfig
    vocab: Vocab
    tensors: dict

    def model_tensors(self):
        return {k: v for k, v in self.tensors.items() if not k.startswith("opt.")}


def save_checkpoint(path, ckpt):
    blob = [_MAGIC, struct.pack("<I", _VERSION)]
    for text in (ckpt.config.to_text(), ckpt.vocab.to_text()):
        raw = text.encode("utf-8")
        blob.append(struct.pack("<I", len(raw)))
        blob.append(raw)
    names = sorted(ckpt.tensors)
    blob.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.asarray(ckpt.tensors[name])
        raw = name.encode("utf-8")
        blob.append(struct.pack("<I", len(raw)))
        blob.append(raw)
        blob.append(struct.pack("<I", arr.ndim))
        blob.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blob.append(arr.astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(blob))


def load_checkpoint(path):
    with open(path, "rb") as f:
        buf = f.read()
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes at offset {pos}")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4)) != _MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", take(4))
    config = TrainConfig.from_text(bytes(take(n)).decode("utf-8"))
    (n,) = struct.unpack("<I", take(4))
    vocab = Vocab.from_text(bytes(take(n)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = bytes(take(n)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).copy()
        tensors[name] = data
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after tensor block")
    return Checkpoint(config=config, vocab=vocab, tensors=tensors)


def model_from_checkpoint(ckpt):
    """Rebuild a runnable model from a checkpoint's config, vocab, tensors."""
    params = init_params(ckpt.config, len(ckpt.vocab))
    params.load_values(ckpt.model_tensors())
    return Model(ckpt.config, ckpt.vocab, params)


@dataclass
class TrainResult:
    best_checkpoint: Checkpoint  # lowest validation loss; what `train` ships
    last_checkpoint: Checkpoint  # end-of-run state incl. optimizer tensors
    log: list


def _epoch_rng(seed, epoch, stream):
    return np.random.default_rng((seed, epoch, stream))


def _first_nonfinite(params):
    for name, p in params.items():
        if not np.isfinite(p.data).all():
            return name
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            return name + ".grad"
    return "loss"


def train(corpus, config, resume_from=None):
    """Epoch loop: joint loss, backward, clipped Adam step on a Noam schedule.

    Keeps the parameters of the best validation epoch for the shipped
    checkpoint; ``last_checkpoint`` additionally carries optimizer state so a
    run can resume from an epoch boundary and continue bit-exactly.
    """
    if not corpus.train or not corpus.val:
        raise DataError("corpus needs nonempty train and val splits")
    video = corpus.train[0].video
    config = dataclasses.replace(
        config, d_vis=video.obj.shape[2], d_aud=video.aud.shape[1]
    )
    vocab = corpus.vocab
    step = 0
    start_epoch = 1
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from) if isinstance(resume_from, str) else resume_from
        if "opt.step" not in ckpt.tensors:
            raise CheckpointError("checkpoint has no optimizer state; cannot resume")
        config = ckpt.config
        params = init_params(config, len(vocab))
        params.load_values(ckpt.model_tensors())
        state = AdamState.zeros(params)
        for name in params.names():
            state.m[name] = ckpt.tensors["opt.m." + name].astype(config.np_dtype)
            state.v[name] = ckpt.tensors["opt.v." + name].astype(config.np_dtype)
        state.step = step = int(ckpt.tensors["opt.step"][()])
        start_epoch = int(ckpt.tensors["opt.epoch"][()]) + 1
    else:
        params = init_params(config, len(vocab))
        state = AdamState.zeros(params)

    model = Model(config, vocab, params)
    records = []
    best_val = np.inf
    best_values = params.copy_values()
    lr = 0.0

    for epoch in range(start_epoch, config.max_epochs + 1):
        order = _epoch_rng(config.seed, epoch, 0).permutation(len(corpus.train))
        drop_rng = _epoch_rng(config.seed, epoch, 1)
        sums = {"dial": 0.0, "vid": 0.0, "res": 0.0, "total": 0.0}
        n_batches = 0
        for lo in range(0, len(order), config.batch):
            batch = [corpus.train[i] for i in order[lo : lo + config.batch]]
            step += 1
            lr = noam_lr(step, config.d, config.warmup_steps)
            params.zero_grads()
            with Tape() as tape:
                loss, parts = joint_loss(model, batch, rng=drop_rng, train=True)
            if not np.isfinite(parts["total"]):
                raise DivergenceError(
                    f"non-finite loss at step {step}; first non-finite tensor: "
                    f"{_first_nonfinite(params)}"
                )
            backward(loss, tape, params)
            clip_global_norm(params, config.clip_norm)
            adam_step(params, state, lr,
                      betas=(config.adam_beta1, config.adam_beta2), eps=config.adam_eps)
            for k in sums:
                sums[k] += float(parts[k])
            n_batches += 1
        _, val_parts = joint_loss(model, corpus.val, train=False)
        val_total = float(val_parts["total"])
        records.append({
            "epoch": epoch,
            "step": step,
            "lr": lr,
            "L_dial": sums["dial"] / n_batches,
            "L_vid": sums["vid"] / n_batches,
            "L_res": sums["res"] / n_batches,
            "total": sums["total"] / n_batches,
            "val_total": val_total,
        })
        if val_total < best_val:
            best_val = val_total
            best_values = params.copy_values()

    best = Checkpoint(config=config, vocab=vocab, tensors=best_values)
    last_tensors = params.copy_values()
    for name in params.names():
        last_tensors["opt.m." + name] = state.m[name].copy()
        last_tensors["opt.v." + name] = state.v[name].copy()
    last_tensors["opt.step"] = np.asarray(float(state.step), dtype=np.float32)
    last_tensors["opt.epoch"] = np.asarray(float(config.max_epochs), dtype=np.float32)
    last = Checkpoint(config=config, vocab=vocab, tensors=last_tensors)
    return TrainResult(best_checkpoint=best, last_checkpoint=last, log=records)
