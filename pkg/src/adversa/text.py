"""Closed template grammar for scenario descriptions and its fixed tokenizer.

Every text in the synthetic corpus is built from a handful of slots (actor,
action, location, target) so tokenization is a plain vocabulary lookup.
"""

from __future__ import annotations

from .errors import DomainError

MAX_TOKENS = 77
PAD = "<pad>"
UNK = "<unk>"

ACTORS = ("car", "pedestrian", "cyclist", "truck")
TARGETS = ("car", "truck")
LOCATIONS = ("city", "highway", "rural")

# action id -> phrase used in the accident reason
ACTION_PHRASES = (
    "crosses from the left",
    "crosses from the right",
    "stops suddenly ahead",
    "drives in the wrong direction",
)

LOCATION_PHRASES = {
    "city": "in the city",
    "highway": "on the highway",
    "rural": "on a rural road",
}

NEGATION = "not"

_WORDS = """
the a car pedestrian cyclist truck crosses from left right stops suddenly ahead
drives in wrong direction city on highway rural road should yield to keep safe
distance steer away oncoming is not hitting ego
""".split()

VOCAB: tuple[str, ...] = (PAD, UNK, *dict.fromkeys(_WORDS))
_INDEX = {w: i for i, w in enumerate(VOCAB)}


def reason_text(actor: str, action: int, location: str) -> str:
    return f"the {actor} {ACTION_PHRASES[action]} {LOCATION_PHRASES[location]}"


def prevention_text(actor: str, action: int, target: str, location: str) -> str:
    if action == 0:
        advice = f"yield to the {actor} on the left"
    elif action == 1:
        advice = f"yield to the {actor} on the right"
    elif action == 2:
        advice = f"keep a safe distance from the {actor} ahead"
    else:
        advice = f"steer away from the oncoming {actor}"
    return f"the {target} should {advice} {LOCATION_PHRASES[location]}"


def category_text(actor: str, target: str) -> str:
    return f"a {actor} is hitting a {target}"


def negate(category: str) -> str:
    """Insert the negation token after the copula ("is" -> "is not")."""
    words = category.split()
    if "is" not in words:
        raise DomainError(f"cannot negate {category!r}: no copula")
    k = words.index("is")
    return " ".join(words[: k + 1] + [NEGATION] + words[k + 1 :])


def tokenize(text: str) -> list[int]:
    ids = [_INDEX.get(w, _INDEX[UNK]) for w in text.lower().split()]
    if len(ids) > MAX_TOKENS:
        raise DomainError(f"text has {len(ids)} tokens, limit is {MAX_TOKENS}")
    return ids


def detokenize(ids) -> str:
    return " ".join(VOCAB[i] for i in ids if i != 0)
