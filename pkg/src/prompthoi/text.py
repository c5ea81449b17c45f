"""Prompt templates, verb morphology and tokenization."""
from __future__ import annotations

import re

VOWELS = set("aeiou")
_TOKEN = re.compile(r"[a-z0-9]+")


def _ing_word(w: str) -> str:
    if w.endswith("ing") and len(w) > 4:
        return w
    if w.endswith("ie"):
        return w[:-2] + "ying"
    if w.endswith("e") and not w.endswith(("ee", "ye", "oe")) and len(w) > 2:
        return w[:-1] + "ing"
    vowel_groups = len(re.findall(r"[aeiou]+", w))
    if (
        len(w) >= 3
        and vowel_groups == 1
        and w[-1] not in VOWELS | set("wxy")
        and w[-2] in VOWELS
        and w[-3] not in VOWELS
    ):
        return w + w[-1] + "ing"
    return w + "ing"


def verb_ing(verb: str) -> str:
    """Present participle of a (possibly multi-word) verb phrase.

    Rules, applied to the first word only ("look at" -> "looking at"):
    ``-ie`` -> ``-ying``; silent final ``e`` dropped (not after e/y/o);
    a single-vowel word ending consonant-vowel-consonant (not w/x/y) doubles its
    last letter ("sit" -> "sitting"); otherwise append ``-ing``.
    """
    first, *rest = verb.split()
    return " ".join([_ing_word(first.lower()), *rest])


def article(noun_phrase: str) -> str:
    return "an" if noun_phrase[:1].lower() in VOWELS else "a"


def object_sentence(obj: str) -> str:
    return f"A photo of {article(obj)} {obj}"


def interaction_sentence(verb: str, obj: str, person: str = "person") -> str:
    return f"A photo of {article(person)} {person} {verb_ing(verb)} {article(obj)} {obj}"


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())
