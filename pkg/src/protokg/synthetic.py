"""Deterministic synthetic corpus for desk-scale end-to-end runs.

Every disease tag owns a private keyword vocabulary. Reference descriptions plant
pattern-extractable triplets linking the disease to its keywords, keywords to
tag-specific findings, and the disease to a body site shared by its category.
Narratives draw tag keywords with probability ``keyword_signal_strength`` and
shared background words otherwise.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoding import STOP_WORDS
from .kg_construction import (RELATION_FAMILIES, KnowledgeTriplet, RelationDefinition,
                              build_definition_prompt, build_triplet_prompt, distinct_relations,
                              dumps_jsonl, prompt_key, rule_based_definition, triplets_to_rows)
from .model import derive_seed
from .patient import PatientRecord

CLINICAL_FIELDS = ("smoking", "bmi", "symptom_days", "family_history")
GENDERS = ("female", "male")

_ONSETS = ["b", "br", "d", "dr", "f", "g", "gr", "k", "kr", "l", "m", "n", "p", "pr", "r",
           "s", "st", "t", "tr", "v", "z", "ch", "sh", "th"]
_VOWELS = ["a", "e", "i", "o", "u", "ae", "io", "ou"]
_CODAS = ["", "", "n", "r", "l", "s", "m", "x"]
_SYMPTOM_RELATIONS = ("causes", "leads to", "results in", "presents with", "manifests as")
_OPENERS = ("i have", "lately i notice", "my doctor mentioned", "for days there is",
            "i keep having", "recently")


@dataclass
class SyntheticSpec:
    categories: int = 6
    tags_per_category: int = 5
    records_per_tag: tuple = (40, 10, 10)
    keyword_signal_strength: float = 0.9
    seed: int = 0
    keywords_per_tag: int = 6
    findings_per_keyword: int = 1
    background_vocab: int = 80
    finding_signal: float = 0.0
    kg_coverage: float = 1.0
    sentences: tuple = (2, 4)
    words_per_sentence: tuple = (3, 6)

    def __post_init__(self):
        self.records_per_tag = tuple(int(x) for x in self.records_per_tag)
        self.sentences = tuple(self.sentences)
        self.words_per_sentence = tuple(self.words_per_sentence)
        if min(self.categories, self.tags_per_category, self.keywords_per_tag) <= 0:
            raise ValueError("category, tag and keyword counts must be positive")
        if len(self.records_per_tag) != 3 or min(self.records_per_tag) < 0:
            raise ValueError("records_per_tag is (train, valid, test)")
        if not 0.0 <= self.keyword_signal_strength <= 1.0:
            raise ValueError("keyword_signal_strength must lie in [0, 1]")


@dataclass
class DiseaseTag:
    label: str
    category: str
    keywords: list[str]
    findings: list[str]
    site: str
    treatment: str


@dataclass
class SyntheticData:
    spec: SyntheticSpec
    tags: list[DiseaseTag]
    corpus: list[dict]
    train: list[PatientRecord]
    valid: list[PatientRecord]
    test: list[PatientRecord]
    gold_triplets: list[KnowledgeTriplet]
    gold_definitions: list[RelationDefinition]
    transcripts: dict[str, str] = field(default_factory=dict)

    @property
    def categories(self) -> dict[str, str]:
        return {t.label: t.category for t in self.tags}

    @property
    def labels(self) -> list[str]:
        return sorted(t.label for t in self.tags)


class _WordFactory:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.used: set[str] = set(STOP_WORDS)

    def word(self, syllables=(2, 3)) -> str:
        while True:
            n = int(self.rng.integers(syllables[0], syllables[1] + 1))
            w = "".join(self.rng.choice(_ONSETS) + self.rng.choice(_VOWELS) + self.rng.choice(_CODAS)
                        for _ in range(n))
            if len(w) >= 4 and w not in self.used:
                self.used.add(w)
                return w


def _capitalize(s: str) -> str:
    return s[:1].upper() + s[1:]


def _description(tag: DiseaseTag, rng: np.random.Generator, coverage: float) -> tuple[str, list[tuple]]:
    name = _capitalize(tag.label)
    facts = []
    n_kw = max(1, int(round(coverage * len(tag.keywords))))
    for kw in tag.keywords[:n_kw]:
        facts.append((name, str(rng.choice(_SYMPTOM_RELATIONS)), kw))
    per = len(tag.findings) // len(tag.keywords) if tag.keywords else 0
    for i, kw in enumerate(tag.keywords[:n_kw]):
        for f in tag.findings[i * per:(i + 1) * per]:
            # sentence-initial capitals give the fusion step case variants to merge
            facts.append((_capitalize(kw), "is associated with", f))
    facts.append((name, "affects", tag.site))
    facts.append((name, "is treated with", tag.treatment))
    text = " ".join(f"{h} {r} {t}." for h, r, t in facts)
    return text, facts


def _narrative(tag: DiseaseTag, background: list[str], spec: SyntheticSpec,
               rng: np.random.Generator) -> str:
    sentences = []
    n_sent = int(rng.integers(spec.sentences[0], spec.sentences[1] + 1))
    for _ in range(n_sent):
        n_words = int(rng.integers(spec.words_per_sentence[0], spec.words_per_sentence[1] + 1))
        words = []
        for _ in range(n_words):
            u = rng.random()
            if u < spec.keyword_signal_strength:
                words.append(str(rng.choice(tag.keywords)))
            elif tag.findings and rng.random() < spec.finding_signal:
                words.append(str(rng.choice(tag.findings)))
            else:
                words.append(str(rng.choice(background)))
        sentences.append(f"{rng.choice(_OPENERS)} {' '.join(words)}")
    return ". ".join(_capitalize(s) for s in sentences) + "."


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    rng = np.random.default_rng(derive_seed(spec.seed, "data"))
    words = _WordFactory(rng)
    background = [words.word((1, 2)) for _ in range(spec.background_vocab)]
    tags: list[DiseaseTag] = []
    cat_profiles = {}
    for c in range(spec.categories):
        category = f"cat{c + 1}"
        site = f"{words.word()} tissue"
        cat_profiles[category] = {
            "p_female": float(rng.uniform(0.2, 0.8)),
            "age_mean": float(rng.uniform(20, 75)),
            "clinical": rng.uniform(0.15, 0.85, size=len(CLINICAL_FIELDS)),
        }
        for _ in range(spec.tags_per_category):
            kws = [words.word() for _ in range(spec.keywords_per_tag)]
            findings = [words.word() for _ in range(spec.keywords_per_tag * spec.findings_per_keyword)]
            tags.append(DiseaseTag(words.word((3, 3)), category, kws, findings, site, words.word()))

    corpus, gold = [], []
    transcripts: dict[str, str] = {}
    for i, tag in enumerate(tags):
        text, facts = _description(tag, rng, spec.kg_coverage)
        corpus.append({"label": tag.label, "category": tag.category, "description": text})
        trips = [KnowledgeTriplet(h, r, t, tag.label) for h, r, t in facts]
        gold.extend(trips)
        lines = "".join(f"{t.head} | {t.relation} | {t.tail}\n" for t in trips)
        if i == 0:
            lines = "Here are the extracted triplets:\n" + lines
        transcripts[prompt_key(build_triplet_prompt(tag.label, text))] = lines
    relations = distinct_relations(gold)
    definitions = [RelationDefinition(r, rule_based_definition(r)) for r in relations]
    transcripts[prompt_key(build_definition_prompt(relations))] = "".join(
        f"{d.relation} | {d.definition}\n" for d in definitions)

    splits: dict[str, list[PatientRecord]] = {"train": [], "valid": [], "test": []}
    counter = 0
    for tag in tags:
        prof = cat_profiles[tag.category]
        for split, n in zip(("train", "valid", "test"), spec.records_per_tag):
            for _ in range(n):
                gender = "female" if rng.random() < prof["p_female"] else "male"
                age = int(np.clip(rng.normal(prof["age_mean"], 10.0), 1, 99))
                clin = np.clip(rng.normal(prof["clinical"], 0.1), 0.0, 1.0)
                splits[split].append(PatientRecord(
                    f"p{counter:05d}", _narrative(tag, background, spec, rng), gender, age,
                    {k: round(float(v), 4) for k, v in zip(CLINICAL_FIELDS, clin)}, tag.label))
                counter += 1
    return SyntheticData(spec, tags, corpus, splits["train"], splits["valid"], splits["test"],
                         gold, definitions, transcripts)


def write_synthetic(data: SyntheticData, directory: str | os.PathLike) -> dict[str, Path]:
    """Write corpus, splits, gold facts and mock transcripts; returns the paths."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    paths = {
        "corpus": root / "corpus.jsonl",
        "train": root / "train.jsonl",
        "valid": root / "valid.jsonl",
        "test": root / "test.jsonl",
        "gold_triplets": root / "gold_triplets.jsonl",
        "meta": root / "meta.json",
        "transcripts": root / "transcripts",
    }
    paths["corpus"].write_text(dumps_jsonl(data.corpus), encoding="utf-8")
    for split in ("train", "valid", "test"):
        rows = [r.to_dict() for r in getattr(data, split)]
        paths[split].write_text(dumps_jsonl(rows), encoding="utf-8")
    paths["gold_triplets"].write_text(dumps_jsonl(triplets_to_rows(data.gold_triplets)), encoding="utf-8")
    meta = {"spec": asdict(data.spec), "clinical_fields": list(CLINICAL_FIELDS),
            "genders": list(GENDERS), "categories": data.categories,
            "relation_families": sorted(RELATION_FAMILIES)}
    paths["meta"].write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    tdir = paths["transcripts"]
    tdir.mkdir(exist_ok=True)
    prompts = {prompt_key(build_triplet_prompt(c["label"], c["description"])):
               build_triplet_prompt(c["label"], c["description"]) for c in data.corpus}
    rels = distinct_relations(data.gold_triplets)
    prompts[prompt_key(build_definition_prompt(rels))] = build_definition_prompt(rels)
    for key, response in sorted(data.transcripts.items()):
        payload = json.dumps({"prompt": prompts[key], "response": response}, ensure_ascii=False, indent=1)
        (tdir / f"{key}.json").write_text(payload + "\n", encoding="utf-8")
    return paths
