"""The reasoning-program DSL: parsing, validation, serialization.

A program is an alternating sequence of parameter spans and module keywords,
e.g. ``a boy FIND a backpack FIND SUMMARIZE``. Two program kinds exist:

* dialogue: ``(param FIND)*  SUMMARIZE``
* video:    ``(param WHERE)+  (param WHEN)*  (param DESCRIBE | EXIST)``

Module keywords are reserved uppercase tokens; parameters are ordinary
lowercase word tokens. Parsing is greedy left to right: each keyword closes
the step whose parameter is the maximal run of non-keyword tokens since the
previous keyword.
"""

from dataclasses import dataclass
from enum import Enum

from .errors import ProgramError

DIALOGUE = "dialogue"
VIDEO = "video"


class ModuleKind(Enum):
    FIND = "FIND"
    SUMMARIZE = "SUMMARIZE"
    WHERE = "WHERE"
    WHEN = "WHEN"
    DESCRIBE = "DESCRIBE"
    EXIST = "EXIST"

    @property
    def keyword(self):
        return self.value

    @property
    def program_kind(self):
        """Which program kind this module belongs to."""
        return DIALOGUE if self in (ModuleKind.FIND, ModuleKind.SUMMARIZE) else VIDEO

    @property
    def takes_param(self):
        """True for modules instantiated with a token span, false for the two
        that consume only previously computed context."""
        return self not in (ModuleKind.SUMMARIZE, ModuleKind.EXIST)


KEYWORDS = tuple(m.keyword for m in ModuleKind)
_BY_KEYWORD = {m.keyword: m for m in ModuleKind}


@dataclass(frozen=True)
class ProgramStep:
    param: tuple
    module: ModuleKind

    def tokens(self):
        return list(self.param) + [self.module.keyword]


@dataclass(frozen=True)
class Program:
    kind: str
    steps: tuple

    @property
    def n_find(self):
        return sum(1 for s in self.steps if s.module is ModuleKind.FIND)

    @property
    def n_where(self):
        return sum(1 for s in self.steps if s.module is ModuleKind.WHERE)

    @property
    def n_when(self):
        return sum(1 for s in self.steps if s.module is ModuleKind.WHEN)

    def __str__(self):
        return " ".join(serialize_program(self))


@dataclass(frozen=True)
class Violation:
    code: str
    step: int
    message: str


# violation codes
EMPTY_PARAM = "empty-param"  # module needs a parameter span and got none
NONEMPTY_PARAM = "nonempty-param"  # module must not carry a parameter span
WRONG_KIND = "wrong-kind"  # module from the other program kind
KEYWORD_PARAM = "keyword-param"  # a reserved keyword inside a parameter span
DANGLING_PARAM = "dangling-param"  # trailing tokens with no closing module
MISSING_TERMINAL = "missing-terminal"  # program does not end in its terminal
STEP_AFTER_TERMINAL = "step-after-terminal"  # anything after the terminal
NO_ENTITY = "no-entity"  # video program with nothing to ground
BAD_ORDER = "bad-order"  # WHERE after WHEN started
BAD_KIND = "bad-kind"  # program kind is neither dialogue nor video


def parse_program(tokens, kind):
    """Parse a token sequence into a validated :class:`Program`.

    Raises :class:`ProgramError` (with the violation code and offending step
    index) on any grammar violation, including trailing parameter tokens that
    no module keyword ever closes.
    """
    if isinstance(tokens, str):
        tokens = tokens.split()
    steps = []
    param = []
    for tok in tokens:
        if tok in _BY_KEYWORD:
            steps.append(ProgramStep(tuple(param), _BY_KEYWORD[tok]))
            param = []
        else:
            param.append(tok)
    if param:
        raise ProgramError(
            DANGLING_PARAM,
            f"trailing parameter tokens {param!r} with no module keyword",
            step=len(steps),
        )
    program = Program(kind, tuple(steps))
    violations = validate_program(program)
    if violations:
        v = violations[0]
        raise ProgramError(v.code, v.message, step=v.step)
    return program


def validate_program(program):
    """Check the grammar; returns a list of violations (empty when valid).

    Total: never raises, whatever the step contents.
    """
    out = []
    if program.kind not in (DIALOGUE, VIDEO):
        return [Violation(BAD_KIND, -1, f"unknown program kind {program.kind!r}")]

    for i, step in enumerate(program.steps):
        if step.module.takes_param and not step.param:
            out.append(
                Violation(EMPTY_PARAM, i, f"{step.module.keyword} requires a nonempty param")
            )
        if not step.module.takes_param and step.param:
            out.append(
                Violation(NONEMPTY_PARAM, i, f"{step.module.keyword} must have empty param")
            )
        if any(tok in _BY_KEYWORD for tok in step.param):
            out.append(Violation(KEYWORD_PARAM, i, "module keyword inside a parameter span"))
        if step.module.program_kind != program.kind:
            out.append(
                Violation(
                    WRONG_KIND,
                    i,
                    f"{program.kind} program contains {step.module.program_kind}-kind "
                    f"module {step.module.keyword}",
                )
            )

    mods = [s.module for s in program.steps]
    if program.kind == DIALOGUE:
        if ModuleKind.SUMMARIZE not in mods:
            out.append(Violation(MISSING_TERMINAL, len(mods), "dialogue program lacks SUMMARIZE"))
        else:
            t = mods.index(ModuleKind.SUMMARIZE)
            if t != len(mods) - 1:
                out.append(Violation(STEP_AFTER_TERMINAL, t + 1, "steps after SUMMARIZE"))
            if any(m is not ModuleKind.FIND for m in mods[:t] if m.program_kind == DIALOGUE):
                i = next(i for i, m in enumerate(mods[:t]) if m is not ModuleKind.FIND)
                out.append(Violation(BAD_ORDER, i, "only FIND may precede SUMMARIZE"))
    else:
        terminals = [
            i for i, m in enumerate(mods) if m in (ModuleKind.DESCRIBE, ModuleKind.EXIST)
        ]
        if not terminals:
            out.append(
                Violation(MISSING_TERMINAL, len(mods), "video program lacks DESCRIBE or EXIST")
            )
        elif terminals[0] != len(mods) - 1:
            out.append(Violation(STEP_AFTER_TERMINAL, terminals[0] + 1, "steps after terminal"))
        body = mods[: terminals[0]] if terminals else mods
        if not any(m is ModuleKind.WHERE for m in mods):
            out.append(Violation(NO_ENTITY, 0, "video program has no WHERE step to ground"))
        seen_when = False
        for i, m in enumerate(body):
            if m is ModuleKind.WHEN:
                seen_when = True
            elif m is ModuleKind.WHERE and seen_when:
                out.append(Violation(BAD_ORDER, i, "WHERE after WHEN"))
    return out


def serialize_program(program):
    """Flatten a valid program back to its token sequence (parse round-trips)."""
    violations = validate_program(program)
    if violations:
        v = violations[0]
        raise ProgramError(v.code, f"cannot serialize invalid program: {v.message}", step=v.step)
    tokens = []
    for step in program.steps:
        tokens.extend(step.tokens())
    return tokens


def program_exact_match(pred, gold):
    """Token-for-token equality of two programs of the same kind."""
    if pred.kind != gold.kind or len(pred.steps) != len(gold.steps):
        return False
    return all(
        a.module is b.module and tuple(a.param) == tuple(b.param)
        for a, b in zip(pred.steps, gold.steps)
    )
