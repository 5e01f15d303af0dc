"""Dataset ingestion and generation.

Covers the SCAN text format ("IN: ... OUT: ..."), a deterministic
generator for the full SCAN command set and its standard splits, and a
synthetic copy task exercising the phrase-copy mechanism.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import Vocabulary


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ExamplePair:
    source: tuple[str, ...]
    target: tuple[str, ...]

    def __post_init__(self):
        if not self.source or not self.target:
            raise DataError("empty source or target")


def replicate_singleton(pair: ExamplePair) -> ExamplePair:
    """Double both sides when the target is a single token.

    The transducer assigns zero mass to length-one targets, so
    "jump -> JUMP" becomes "jump jump -> JUMP JUMP".
    """
    if len(pair.target) == 1:
        return ExamplePair(pair.source * 2, pair.target * 2)
    return pair


def load_scan(path: str, replicate_singletons: bool = True) -> list[ExamplePair]:
    pairs: list[ExamplePair] = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            if not line.startswith("IN:") or " OUT: " not in line:
                raise DataError(f"{path}:{lineno}: expected 'IN: ... OUT: ...'")
            src_part, tgt_part = line[len("IN:"):].split(" OUT: ", 1)
            source = tuple(src_part.split())
            target = tuple(tgt_part.split())
            if not source or not target:
                raise DataError(f"{path}:{lineno}: empty source or target")
            pair = ExamplePair(source, target)
            pairs.append(replicate_singleton(pair) if replicate_singletons else pair)
    if not pairs:
        raise DataError(f"{path}: no examples")
    return pairs


def write_scan(path: str, pairs: Iterable[ExamplePair]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for pair in pairs:
            handle.write(f"IN: {' '.join(pair.source)} OUT: {' '.join(pair.target)}\n")


def encode_pairs(
    pairs: Sequence[ExamplePair], src_vocab: Vocabulary, tgt_vocab: Vocabulary
) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    return [(src_vocab.encode(p.source), tgt_vocab.encode(p.target)) for p in pairs]


# --------------------------------------------------------------------------
# SCAN command generation

_PRIMITIVES = {"walk": "I_WALK", "look": "I_LOOK", "run": "I_RUN", "jump": "I_JUMP"}
_LTURN, _RTURN = "I_TURN_LEFT", "I_TURN_RIGHT"


def _interpret_verb(words: tuple[str, ...]) -> tuple[str, ...]:
    """Action sequence for a verb phrase (no twice/thrice/and/after)."""
    turn = {"left": (_LTURN,), "right": (_RTURN,)}
    if len(words) == 1:
        return (_PRIMITIVES[words[0]],)
    if len(words) == 2:
        head, direction = words
        t = turn[direction]
        if head == "turn":
            return t
        return t + (_PRIMITIVES[head],)
    head, mod, direction = words
    t = turn[direction]
    if mod == "opposite":
        unit = t + t
        return unit if head == "turn" else unit + (_PRIMITIVES[head],)
    # around: four quarter turns, acting after each
    step = t if head == "turn" else t + (_PRIMITIVES[head],)
    return step * 4


def _verb_phrases() -> list[tuple[str, ...]]:
    heads = list(_PRIMITIVES)
    out: list[tuple[str, ...]] = [(h,) for h in heads]
    for head in heads + ["turn"]:
        for direction in ("left", "right"):
            out.append((head, direction))
            out.append((head, "opposite", direction))
            out.append((head, "around", direction))
    return out


def _simple_phrases() -> list[tuple[tuple[str, ...], tuple[str, ...]]]:
    out = []
    for verb in _verb_phrases():
        actions = _interpret_verb(verb)
        out.append((verb, actions))
        out.append((verb + ("twice",), actions * 2))
        out.append((verb + ("thrice",), actions * 3))
    return out


def generate_scan() -> list[ExamplePair]:
    """Every SCAN command with its action sequence (20,910 pairs)."""
    simple = _simple_phrases()
    pairs = [ExamplePair(cmd, act) for cmd, act in simple]
    for cmd1, act1 in simple:
        for cmd2, act2 in simple:
            pairs.append(ExamplePair(cmd1 + ("and",) + cmd2, act1 + act2))
            pairs.append(ExamplePair(cmd1 + ("after",) + cmd2, act2 + act1))
    return pairs


def scan_split(name: str, seed: int = 0) -> tuple[list[ExamplePair], list[ExamplePair]]:
    """(train, test) for the standard split names.

    simple: seeded 80/20 shuffle.  addprim_jump: composed jump commands
    are held out; the bare "jump" primitive stays in training.
    template_around_right: commands containing "around right" held out.
    length: action sequences longer than 22 held out.
    """
    pairs = generate_scan()
    if name == "simple":
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(pairs))
        cut = int(0.8 * len(pairs))
        return [pairs[i] for i in order[:cut]], [pairs[i] for i in order[cut:]]
    if name == "addprim_jump":
        train = [p for p in pairs if "jump" not in p.source or p.source == ("jump",)]
        test = [p for p in pairs if "jump" in p.source and p.source != ("jump",)]
        return train, test
    if name == "template_around_right":
        def has_template(p):
            s = p.source
            return any(s[i] == "around" and s[i + 1] == "right" for i in range(len(s) - 1))
        return [p for p in pairs if not has_template(p)], [p for p in pairs if has_template(p)]
    if name == "length":
        return [p for p in pairs if len(p.target) <= 22], [p for p in pairs if len(p.target) > 22]
    raise DataError(f"unknown SCAN split {name!r}")


def filter_by_length(
    pairs: Sequence[ExamplePair], max_source: Optional[int] = None, max_target: Optional[int] = None
) -> list[ExamplePair]:
    out = []
    for p in pairs:
        if max_source is not None and len(p.source) > max_source:
            continue
        if max_target is not None and len(p.target) > max_target:
            continue
        out.append(p)
    return out


def augment_with_repeats(pairs: Sequence[ExamplePair], extra: ExamplePair, times: int) -> list[ExamplePair]:
    """Append ``times`` copies of one pair (heavy-replication recipe)."""
    return list(pairs) + [extra] * times


# --------------------------------------------------------------------------
# Synthetic copy task

def copy_task_tokens(vocab_size: int = 50) -> tuple[list[str], list[str]]:
    """(copy-class tokens, mapped-class tokens); the first half copies."""
    if vocab_size < 4:
        raise DataError("copy task needs vocab_size >= 4")
    half = vocab_size // 2
    return [f"c{i}" for i in range(half)], [f"m{i}" for i in range(vocab_size - half)]


def copy_task_bijection(mapped_tokens: Sequence[str], bijection_seed: int = 12345) -> dict[str, str]:
    """Fixed random bijection from mapped-class tokens to their images."""
    rng = np.random.default_rng(bijection_seed)
    images = [f"M{i}" for i in range(len(mapped_tokens))]
    perm = rng.permutation(len(images))
    return {tok: images[perm[i]] for i, tok in enumerate(mapped_tokens)}


def make_copy_task(
    count: int,
    seed: int,
    vocab_size: int = 50,
    min_length: int = 4,
    max_length: int = 8,
    copy_fraction: float = 0.5,
    copy_token_choices: Optional[Sequence[str]] = None,
    bijection_seed: int = 12345,
) -> list[ExamplePair]:
    """Seed-deterministic copy-task pairs.

    Each source is a contiguous block of copy-class tokens (transferred
    verbatim) inside mapped-class tokens (pushed through the fixed
    bijection).  ``copy_fraction`` sets the block's share of the length;
    restricting ``copy_token_choices`` lets callers hold copy tokens out
    of training and test on unseen ones.
    """
    if not 0.0 <= copy_fraction <= 1.0:
        raise DataError("copy_fraction must be in [0, 1]")
    if not 1 <= min_length <= max_length:
        raise DataError("invalid length range")
    copy_tokens, mapped_tokens = copy_task_tokens(vocab_size)
    bijection = copy_task_bijection(mapped_tokens, bijection_seed)
    if copy_token_choices is None:
        copy_token_choices = copy_tokens
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        length = int(rng.integers(min_length, max_length + 1))
        n_copy = round(copy_fraction * length)
        start = int(rng.integers(0, length - n_copy + 1)) if n_copy < length else 0
        source, target = [], []
        for pos in range(length):
            if start <= pos < start + n_copy:
                tok = str(rng.choice(copy_token_choices))
                source.append(tok)
                target.append(tok)
            else:
                tok = str(rng.choice(mapped_tokens))
                source.append(tok)
                target.append(bijection[tok])
        pairs.append(ExamplePair(tuple(source), tuple(target)))
    return pairs
