"""TF-IDF statistics over patient narratives and thresholded keyword selection."""
from __future__ import annotations

import hashlib
import json
import math
import os
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .encoding import tokenize
from .errors import InvalidInput

DEFAULT_THETA = 0.05
FALLBACK_SIZE = 3


@dataclass(frozen=True)
class CorpusStats:
    doc_count: int
    doc_frequency: dict[str, int]

    @property
    def vocabulary(self) -> frozenset[str]:
        return frozenset(self.doc_frequency)

    def idf(self, term: str) -> float:
        # +1 smoothing in the denominator; negative for terms in every narrative
        return math.log(self.doc_count / (self.doc_frequency.get(term, 0) + 1))

    def fingerprint(self) -> str:
        blob = json.dumps([self.doc_count, sorted(self.doc_frequency.items())])
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class KeywordSet:
    terms: tuple[tuple[str, float], ...]
    theta: float
    fallback: bool = False

    @property
    def words(self) -> list[str]:
        return [t for t, _ in self.terms]

    def __len__(self):
        return len(self.terms)


def build_stats(narratives: Sequence[str]) -> CorpusStats:
    if len(narratives) == 0:
        raise InvalidInput("cannot build TF-IDF statistics from an empty corpus")
    df: Counter = Counter()
    for text in narratives:
        df.update(set(tokenize(text)))
    return CorpusStats(len(narratives), dict(df))


def term_frequencies(narrative: str) -> dict[str, float]:
    toks = tokenize(narrative)
    if not toks:
        return {}
    counts = Counter(toks)
    total = len(toks)
    return {k: c / total for k, c in counts.items()}


def tfidf(term: str, narrative: str, stats: CorpusStats) -> float:
    if not narrative or not narrative.strip():
        raise InvalidInput("tfidf needs a non-empty narrative")
    tf = term_frequencies(narrative).get(term, 0.0)
    if tf == 0.0:
        return 0.0
    return tf * stats.idf(term)


def score_terms(narrative: str, stats: CorpusStats) -> dict[str, float]:
    return {k: tf * stats.idf(k) for k, tf in term_frequencies(narrative).items()}


def extract_keywords(narrative: str, stats: CorpusStats, theta: float = DEFAULT_THETA) -> KeywordSet:
    """Terms scoring strictly above ``theta``, best first.

    When nothing clears the threshold the top three terms are returned and the set
    is flagged ``fallback`` (query construction needs at least one keyword).
    """
    scores = score_terms(narrative, stats)
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    picked = tuple((k, s) for k, s in ranked if s > theta)
    if picked:
        return KeywordSet(picked, theta)
    return KeywordSet(tuple(ranked[:FALLBACK_SIZE]), theta, fallback=True)


def dumps_stats(stats: CorpusStats, corpus_key: str = "") -> str:
    payload = {"corpus_hash": corpus_key, "doc_count": stats.doc_count,
               "doc_frequency": dict(sorted(stats.doc_frequency.items()))}
    return json.dumps(payload, ensure_ascii=False, indent=1) + "\n"


def save_stats(stats: CorpusStats, path: str | os.PathLike, corpus_key: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_stats(stats, corpus_key))


def load_stats(path: str | os.PathLike, corpus_key: str | None = None) -> CorpusStats | None:
    """Load a stats cache; returns None when the cache belongs to another corpus."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if corpus_key is not None and payload.get("corpus_hash") != corpus_key:
        return None
    return CorpusStats(int(payload["doc_count"]), {k: int(v) for k, v in payload["doc_frequency"].items()})
