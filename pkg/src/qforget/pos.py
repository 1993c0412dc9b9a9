"""Deterministic lexicon + suffix part-of-speech counter.

Only three classes matter for the question features: verbs, personal pronouns and
nouns.  Lookup order is pronoun, verb, noun, function word; unseen words fall
back to suffix rules and finally to noun.
"""
from __future__ import annotations

import re
from functools import lru_cache
from importlib import resources

LEXICON_VERSION = "pos_lexicon_v1"
_WORD = re.compile(r"[a-z]+")
_VERB_SUFFIXES = ("ing", "ed", "ize", "izes", "ized", "ise")
_NOUN_SUFFIXES = ("tion", "tions", "ness", "ment", "ments")


def _load(name: str) -> frozenset[str]:
    text = resources.files("qforget.data").joinpath(LEXICON_VERSION, name).read_text()
    return frozenset(ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#"))


@lru_cache(maxsize=1)
def lexicon() -> dict[str, frozenset[str]]:
    return {
        "PRP": _load("pronouns.txt"),
        "VERB": _load("verbs.txt"),
        "NOUN": _load("nouns.txt"),
        "OTHER": _load("function_words.txt"),
    }


@lru_cache(maxsize=65536)
def tag_word(word: str) -> str:
    lex = lexicon()
    for cls in ("PRP", "VERB", "NOUN", "OTHER"):
        if word in lex[cls]:
            return cls
    if len(word) > 4 and word.endswith(_NOUN_SUFFIXES):
        return "NOUN"
    if len(word) > 4 and word.endswith(_VERB_SUFFIXES):
        return "VERB"
    if len(word) > 4 and word.endswith("ly"):
        return "OTHER"
    return "NOUN"


def pos_counts(text: str) -> tuple[int, int, int]:
    """``(n_verbs, n_pronouns, n_nouns)`` over the alphabetic words of ``text``."""
    verbs = prp = nouns = 0
    for word in _WORD.findall(text.lower()):
        cls = tag_word(word)
        if cls == "VERB":
            verbs += 1
        elif cls == "PRP":
            prp += 1
        elif cls == "NOUN":
            nouns += 1
    return verbs, prp, nouns
