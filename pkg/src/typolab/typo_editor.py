"""Rule-based text editor: word-level typo injection and MLM sampling.

Produces the paired input views used by bottlenecked pre-training: a
perturbed/masked encoder view and the set of words the decoder must
reconstruct. All randomness flows through an explicit numpy Generator,
so identical (words, config, seed) yield identical plans.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ContractViolation


class NotEligible(ValueError):
    """Word or query has no position where a typo can be injected."""


class NoNeighbor(ValueError):
    """SwapAdjacent hit a character with no keyboard neighbors."""


class TypoType(Enum):
    RAND_INSERT = "RandInsert"
    RAND_DELETE = "RandDelete"
    RAND_SUB = "RandSub"
    SWAP_NEIGHBOR = "SwapNeighbor"
    SWAP_ADJACENT = "SwapAdjacent"


class MlmSub(Enum):
    MASK_TOKEN = "mask"
    RANDOM_TOKEN = "random"
    UNCHANGED = "unchanged"


@dataclass(frozen=True)
class Keep:
    pass


@dataclass(frozen=True)
class Mlm:
    sub: MlmSub


@dataclass(frozen=True)
class Typo:
    type: TypoType
    char_pos: int
    replacement_char: Optional[str] = None


Action = Union[Keep, Mlm, Typo]

LOWERCASE = "abcdefghijklmnopqrstuvwxyz"


@lru_cache(maxsize=1)
def qwerty_adjacency() -> dict[str, str]:
    """Keyboard adjacency map, one line per key: `<char>:<neighbors>`."""
    text = resources.files("typolab.data").joinpath("qwerty_adjacency.txt").read_text()
    table = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, neighbors = line.partition(":")
        table[key] = neighbors
    return table


@lru_cache(maxsize=1)
def default_stopwords() -> frozenset[str]:
    text = resources.files("typolab.data").joinpath("stopwords.txt").read_text()
    return frozenset(w for w in text.split() if w)


def load_stopwords(path) -> frozenset[str]:
    """Stopword file: one lowercase word per line."""
    with open(path, encoding="utf-8") as fh:
        return frozenset(line.strip() for line in fh if line.strip())


@dataclass(frozen=True)
class EditorConfig:
    """Knobs of the text editor.

    alpha is the MLM word-sampling ratio, beta the typo injection ratio;
    a word receives at most one action, hence alpha + beta <= 1.
    """

    alpha: float = 0.3
    beta: float = 0.3
    decoder_mask_floor: float = 0.5
    min_typo_word_len: int = 3
    stopwords: frozenset[str] = field(default_factory=default_stopwords)

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ContractViolation(f"alpha/beta must lie in [0,1], got {self.alpha}/{self.beta}")
        if self.alpha + self.beta > 1.0 + 1e-12:
            raise ContractViolation(f"alpha + beta must be <= 1, got {self.alpha + self.beta}")
        if not 0.0 <= self.decoder_mask_floor <= 1.0:
            raise ContractViolation(f"decoder_mask_floor must lie in [0,1], got {self.decoder_mask_floor}")
        if self.min_typo_word_len < 2:
            raise ContractViolation(f"min_typo_word_len must be >= 2, got {self.min_typo_word_len}")


@dataclass(frozen=True)
class EditPlan:
    """Per-word action assignment for one input text."""

    actions: tuple[Action, ...]
    extra_decoder_masks: frozenset[int] = frozenset()

    def mlm_word_indices(self) -> set[int]:
        return {i for i, a in enumerate(self.actions) if isinstance(a, Mlm)}

    def typo_word_indices(self) -> set[int]:
        return {i for i, a in enumerate(self.actions) if isinstance(a, Typo)}


def is_typo_eligible(word: str, min_typo_word_len: int = 3) -> bool:
    return word.isalpha() and len(word) >= min_typo_word_len


def apply_typo(
    word: str,
    type: TypoType,
    char_pos: int,
    replacement: Optional[str] = None,
) -> str:
    """Apply one deterministic character-level perturbation to a word.

    `replacement` supplies the inserted/substituting character for
    RandInsert and RandSub, and optionally the neighbor for SwapAdjacent
    (first table neighbor when omitted).
    """
    n = len(word)
    if type is TypoType.RAND_INSERT:
        if not 0 <= char_pos <= n:
            raise ContractViolation(f"insert position {char_pos} out of range for length {n}")
        if replacement is None:
            raise ContractViolation("RandInsert requires a replacement character")
        return word[:char_pos] + replacement + word[char_pos:]
    if not 0 <= char_pos < n:
        raise ContractViolation(f"position {char_pos} out of range for length {n}")
    if type is TypoType.RAND_DELETE:
        return word[:char_pos] + word[char_pos + 1 :]
    if type is TypoType.RAND_SUB:
        if replacement is None:
            raise ContractViolation("RandSub requires a replacement character")
        return word[:char_pos] + replacement + word[char_pos + 1 :]
    if type is TypoType.SWAP_NEIGHBOR:
        if char_pos > n - 2:
            raise ContractViolation(f"swap position {char_pos} out of range for length {n}")
        return word[:char_pos] + word[char_pos + 1] + word[char_pos] + word[char_pos + 2 :]
    if type is TypoType.SWAP_ADJACENT:
        ch = word[char_pos]
        neighbors = qwerty_adjacency().get(ch.lower(), "")
        if not neighbors:
            raise NoNeighbor(f"no keyboard neighbors for {ch!r}")
        if replacement is None:
            replacement = neighbors[0]
        sub = replacement.upper() if ch.isupper() else replacement
        return word[:char_pos] + sub + word[char_pos + 1 :]
    raise ContractViolation(f"unknown typo type {type!r}")


def _sample_typo_params(
    word: str, rng: np.random.Generator
) -> tuple[TypoType, int, Optional[str]]:
    """Draw (type, position, replacement) uniformly over the five types."""
    n = len(word)
    for _ in range(32):
        type = list(TypoType)[int(rng.integers(5))]
        if type is TypoType.RAND_INSERT:
            pos = int(rng.integers(n + 1))
            return type, pos, LOWERCASE[int(rng.integers(26))]
        if type is TypoType.RAND_DELETE:
            return type, int(rng.integers(n)), None
        if type is TypoType.RAND_SUB:
            pos = int(rng.integers(n))
            pool = LOWERCASE.replace(word[pos].lower(), "") or LOWERCASE
            return type, pos, pool[int(rng.integers(len(pool)))]
        if type is TypoType.SWAP_NEIGHBOR:
            return type, int(rng.integers(n - 1)), None
        # SwapAdjacent: resample the type if the drawn char has no neighbors
        # (cannot happen for purely alphabetic words).
        candidates = [i for i, c in enumerate(word) if qwerty_adjacency().get(c.lower())]
        if candidates:
            pos = candidates[int(rng.integers(len(candidates)))]
            neighbors = qwerty_adjacency()[word[pos].lower()]
            return type, pos, neighbors[int(rng.integers(len(neighbors)))]
    raise NoNeighbor(f"could not place a typo in {word!r}")


def sample_typo(
    word: str, rng: np.random.Generator, min_typo_word_len: int = 3
) -> tuple[str, TypoType]:
    """Perturb a word with a typo type drawn uniformly from the five kinds."""
    if not is_typo_eligible(word, min_typo_word_len):
        raise NotEligible(f"{word!r} is not eligible for typo injection")
    type, pos, replacement = _sample_typo_params(word, rng)
    return apply_typo(word, type, pos, replacement), type


def plan_edits(
    words: Sequence[str], cfg: EditorConfig, rng: np.random.Generator
) -> EditPlan:
    """Assign one action per word: Mlm w.p. alpha, Typo w.p. beta, else Keep.

    Mlm and Typo are disjoint by construction (one categorical draw per
    word). If fewer than `decoder_mask_floor` of the words end up in
    Mlm-MaskToken or Typo, Keep words are promoted into
    `extra_decoder_masks` until the floor is met or Keep words run out.
    """
    if not words:
        raise ContractViolation("plan_edits requires a non-empty word sequence")
    actions: list[Action] = []
    for word in words:
        u = rng.random()
        if u < cfg.alpha:
            v = rng.random()
            sub = MlmSub.MASK_TOKEN if v < 0.8 else MlmSub.RANDOM_TOKEN if v < 0.9 else MlmSub.UNCHANGED
            actions.append(Mlm(sub))
        elif u < cfg.alpha + cfg.beta and is_typo_eligible(word, cfg.min_typo_word_len):
            type, pos, repl = _sample_typo_params(word, rng)
            actions.append(Typo(type, pos, repl))
        else:
            actions.append(Keep())

    floor_set = {
        i
        for i, a in enumerate(actions)
        if isinstance(a, Typo) or (isinstance(a, Mlm) and a.sub is MlmSub.MASK_TOKEN)
    }
    extra: frozenset[int] = frozenset()
    need = math.ceil(cfg.decoder_mask_floor * len(words)) - len(floor_set)
    if need > 0:
        keep_indices = [i for i, a in enumerate(actions) if isinstance(a, Keep)]
        if keep_indices:
            take = min(need, len(keep_indices))
            chosen = rng.choice(len(keep_indices), size=take, replace=False)
            extra = frozenset(keep_indices[j] for j in chosen)
    return EditPlan(tuple(actions), extra)


def render_encoder_text(words: Sequence[str], plan: EditPlan) -> list[str]:
    """Word sequence as the encoder sees it: typos applied, rest verbatim.

    Mlm words stay textually unchanged here; their mask/random-token
    resolution happens at the subword level after tokenization, driven by
    the plan.
    """
    if len(words) != len(plan.actions):
        raise ContractViolation(
            f"plan length {len(plan.actions)} does not match word count {len(words)}"
        )
    out = []
    for word, action in zip(words, plan.actions):
        if isinstance(action, Typo):
            out.append(apply_typo(word, action.type, action.char_pos, action.replacement_char))
        else:
            out.append(word)
    return out


def render_decoder_mask_set(plan: EditPlan) -> set[int]:
    """Words the decoder must reconstruct: Mlm, Typo, and top-up masks."""
    return plan.mlm_word_indices() | plan.typo_word_indices() | set(plan.extra_decoder_masks)


def make_eval_typo_query(
    query: str,
    stopwords: frozenset[str],
    rng: np.random.Generator,
    min_typo_word_len: int = 3,
) -> str:
    """Inject exactly one typo into one non-stopword of an evaluation query."""
    words = query.split()
    eligible = [
        i
        for i, w in enumerate(words)
        if is_typo_eligible(w, min_typo_word_len) and w.lower() not in stopwords
    ]
    if not eligible:
        raise NotEligible(f"no typo-eligible non-stopword in {query!r}")
    idx = int(eligible[int(rng.integers(len(eligible)))])
    original = words[idx]
    for _ in range(64):
        perturbed, _ = sample_typo(original, rng, min_typo_word_len)
        if perturbed != original:
            words[idx] = perturbed
            return " ".join(words)
    raise NotEligible(f"could not produce a differing typo for {original!r}")
