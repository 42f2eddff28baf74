"""Articulatory attribute inventory and speech attribute units (SAUs).

A SAU is a distinct (manner, place) pair.  Phonemes are mapped onto SAUs
through a plain-text attribute table (``phoneme manner place`` per line).
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import DataError, ParseError

MANNERS = (
    "affricate",
    "fricative",
    "nasal",
    "vowel",
    "voice-stop",
    "unvoiced-stop",
    "glide",
    "liquid",
    "diphthong",
    "sibilant",
)

PLACES = (
    "alveolar",
    "alveo-palatal",
    "dental",
    "glottal",
    "high",
    "bilabial",
    "labio-dental",
    "low",
    "mid",
    "palatal",
    "velar",
)


class UnknownPhonemeError(DataError):
    def __init__(self, phoneme, position=None):
        msg = f"unknown phoneme {phoneme!r}"
        if position is not None:
            msg += f" at position {position}"
        super().__init__(msg)
        self.phoneme = phoneme
        self.position = position


@dataclass(frozen=True, order=True)
class SAU:
    manner: str
    place: str
    id: int

    @property
    def name(self) -> str:
        return f"{self.place}_{self.manner}"


@dataclass(frozen=True)
class AttributeMap:
    """phoneme -> (manner, place); immutable once built."""

    entries: Mapping[str, tuple[str, str]]
    manners: tuple[str, ...] = MANNERS
    places: tuple[str, ...] = PLACES

    def __len__(self):
        return len(self.entries)

    def __contains__(self, phoneme):
        return phoneme in self.entries

    def __getitem__(self, phoneme):
        return self.entries[phoneme]


def parse_attribute_map(lines: Iterable[str], source=None,
                        manners=MANNERS, places=PLACES) -> AttributeMap:
    manner_set, place_set = set(manners), set(places)
    entries: dict[str, tuple[str, str]] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 3:
            raise ParseError(f"expected 'phoneme manner place', got {len(fields)} fields",
                             source, lineno)
        phoneme, manner, place = fields
        if manner not in manner_set:
            raise ParseError(f"unknown manner {manner!r}", source, lineno)
        if place not in place_set:
            raise ParseError(f"unknown place {place!r}", source, lineno)
        if phoneme in entries:
            raise ParseError(f"duplicate phoneme {phoneme!r}", source, lineno)
        entries[phoneme] = (manner, place)
    return AttributeMap(entries, tuple(manners), tuple(places))


def load_attribute_map(path) -> AttributeMap:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        return parse_attribute_map(fh, source=str(path))


def default_attribute_map() -> AttributeMap:
    """The shipped English (ARPAbet) table."""
    text = resources.files("attrxvec").joinpath("data/english_attributes.txt").read_text("utf-8")
    return parse_attribute_map(text.splitlines(), source="english_attributes.txt")


def derive_saus(amap: AttributeMap) -> list[SAU]:
    """One SAU per distinct (manner, place) pair, ids in lexicographic order."""
    if len(amap) == 0:
        raise DataError("cannot derive SAUs from an empty attribute map")
    pairs = sorted(set(amap.entries.values()))
    return [SAU(manner, place, i) for i, (manner, place) in enumerate(pairs)]


def _index(inventory: Sequence[SAU]) -> dict[tuple[str, str], SAU]:
    return {(s.manner, s.place): s for s in inventory}


def sau_of(phoneme: str, amap: AttributeMap, inventory: Sequence[SAU]) -> SAU:
    if phoneme not in amap:
        raise UnknownPhonemeError(phoneme)
    try:
        return _index(inventory)[amap[phoneme]]
    except KeyError:
        raise DataError(f"SAU inventory lacks {amap[phoneme]} for phoneme {phoneme!r}") from None


def map_transcript(phonemes: Sequence[str], amap: AttributeMap,
                   inventory: Sequence[SAU]) -> list[int]:
    index = _index(inventory)
    out = []
    for pos, ph in enumerate(phonemes):
        if ph not in amap:
            raise UnknownPhonemeError(ph, pos)
        out.append(index[amap[ph]].id)
    return out


def format_inventory(inventory: Sequence[SAU]) -> str:
    """Export lines ``id name manner place``."""
    return "".join(f"{s.id} {s.name} {s.manner} {s.place}\n" for s in inventory)


def parse_inventory(text: str) -> list[SAU]:
    saus = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 4:
            raise ParseError("expected 'id name manner place'", line=lineno)
        sau = SAU(fields[2], fields[3], int(fields[0]))
        if sau.name != fields[1] or sau.id != len(saus):
            raise ParseError("inconsistent SAU inventory entry", line=lineno)
        saus.append(sau)
    return saus
