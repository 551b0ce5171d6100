"""Two-stage knowledge extraction from disease reference descriptions.

Stage one turns a description into ``head | relation | tail`` triplets; stage two
asks for a disease-independent definition of every distinct relation. Both go
through a :class:`ChatClient`, which is either a live chat-completion endpoint or
a recorded transcript store keyed by prompt hash.
"""
from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ChatUnavailable, EmptyExtractionWarning, ExtractionUnavailable, InvalidInput


@dataclass(frozen=True)
class KnowledgeTriplet:
    head: str
    relation: str
    tail: str
    source_disease: str

    def __post_init__(self):
        for name in ("head", "relation", "tail", "source_disease"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value.strip():
                raise InvalidInput(f"triplet {name} must be a non-empty string")
            object.__setattr__(self, name, " ".join(value.split()))
        if self.head == self.tail:
            raise InvalidInput("triplet head and tail must differ")


@dataclass(frozen=True)
class RelationDefinition:
    relation: str
    definition: str


@dataclass
class ExtractionResult:
    disease: str
    triplets: list[KnowledgeTriplet] = field(default_factory=list)
    malformed: int = 0

    @property
    def empty(self) -> bool:
        return not self.triplets


# -- prompts ---------------------------------------------------------------

TRIPLET_PROMPT = """\
You are a medical knowledge engineer. Read the reference description of a disease
and extract every medically relevant fact as a knowledge triplet.

Disease: {disease}
Description:
{description}

Rules:
- Entities are concise noun phrases (for example "chronic inflammation").
- Relations are short, clear semantic links (for example "causes").
- Write one triplet per line as: head | relation | tail
- Output nothing except the triplet lines.
"""

DEFINITION_PROMPT = """\
Below is a list of relation types extracted from medical knowledge triplets.
For each relation, remove any disease-specific content and write one concise,
disease-independent definition of what the relation means.

Write one line per relation as: relation | definition
Output nothing except those lines.

Relations:
{relations}
"""


def build_triplet_prompt(disease: str, description: str) -> str:
    return TRIPLET_PROMPT.format(disease=disease.strip(), description=description.strip())


def build_definition_prompt(relations: Sequence[str]) -> str:
    return DEFINITION_PROMPT.format(relations="\n".join(relations))


def prompt_key(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


# -- chat clients ----------------------------------------------------------

class ChatClient:
    kind = "abstract"
    max_retries = 3
    rate_limit = 60.0

    def complete(self, prompt: str) -> str:
        raise NotImplementedError


class RecordedChatClient(ChatClient):
    """Replays responses stored as ``<sha256(prompt)>.json`` files.

    With ``upstream`` set, cache misses are forwarded to it and recorded.
    """

    kind = "recorded-mock"

    def __init__(self, directory: str | os.PathLike, upstream: ChatClient | None = None):
        self.directory = Path(directory)
        self.upstream = upstream
        self._lock = threading.Lock()

    def path_for(self, prompt: str) -> Path:
        return self.directory / f"{prompt_key(prompt)}.json"

    def record(self, prompt: str, response: str) -> Path:
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.path_for(prompt)
        payload = json.dumps({"prompt": prompt, "response": response}, ensure_ascii=False, indent=1)
        path.write_text(payload + "\n", encoding="utf-8")
        return path

    def complete(self, prompt: str) -> str:
        path = self.path_for(prompt)
        if path.exists():
            return json.loads(path.read_text(encoding="utf-8"))["response"]
        if self.upstream is None:
            raise ChatUnavailable(f"no recorded transcript for prompt {prompt_key(prompt)[:12]}")
        response = self.upstream.complete(prompt)
        with self._lock:
            self.record(prompt, response)
        return response


class MemoryChatClient(ChatClient):
    """In-memory transcript replay keyed like :class:`RecordedChatClient`."""

    kind = "recorded-mock"

    def __init__(self, transcripts: dict[str, str]):
        self.transcripts = dict(transcripts)

    def complete(self, prompt: str) -> str:
        try:
            return self.transcripts[prompt_key(prompt)]
        except KeyError:
            raise ChatUnavailable(f"no recorded transcript for prompt {prompt_key(prompt)[:12]}") from None


class LiveChatClient(ChatClient):
    """OpenAI-compatible chat-completions client with backoff and a rate limit."""

    kind = "live"

    def __init__(self, endpoint: str, model: str, credential_env: str = "PROTOKG_API_KEY",
                 max_retries: int = 3, rate_limit: float = 60.0, backoff: float = 1.0,
                 timeout: float = 60.0, transport=None, sleep=time.sleep):
        import httpx

        self.endpoint = endpoint
        self.model = model
        self.max_retries = int(max_retries)
        self.rate_limit = float(rate_limit)
        self.backoff = backoff
        self._sleep = sleep
        self._httpx = httpx
        headers = {}
        key = os.environ.get(credential_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(headers=headers, timeout=timeout, transport=transport)
        self._lock = threading.Lock()
        self._last_request = float("-inf")

    def _throttle(self):
        if self.rate_limit <= 0:
            return
        with self._lock:
            wait = self._last_request + 60.0 / self.rate_limit - time.monotonic()
            if wait > 0:
                self._sleep(wait)
            self._last_request = time.monotonic()

    def complete(self, prompt: str) -> str:
        body = {"model": self.model, "temperature": 0,
                "messages": [{"role": "user", "content": prompt}]}
        last_error = None
        for attempt in range(self.max_retries):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            self._throttle()
            try:
                resp = self._client.post(self.endpoint, json=body)
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except (self._httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
                last_error = exc
        raise ChatUnavailable(f"chat endpoint failed after {self.max_retries} attempts: {last_error}")


class DisabledChatClient(ChatClient):
    kind = "disabled"

    def complete(self, prompt: str) -> str:
        raise ChatUnavailable("chat client disabled")


# -- parsing ---------------------------------------------------------------

_BULLET_RE = re.compile(r"^\s*(?:[-*•]+|\d+[.)])\s*")


def _clean_line(line: str) -> str:
    return _BULLET_RE.sub("", line).strip().strip("`").strip()


def _split_triplet(line: str) -> tuple[str, str, str] | None:
    text = _clean_line(line)
    if "|" in text:
        parts = [p.strip() for p in text.strip("|").split("|")]
    elif text.startswith("(") and text.endswith(")"):
        parts = [p.strip().strip("'\"") for p in text[1:-1].split(",")]
    else:
        return None
    if len(parts) != 3 or not all(parts):
        return None
    return parts[0], parts[1], parts[2]


def parse_triplets(response: str, disease: str) -> tuple[list[KnowledgeTriplet], int]:
    """Parse a stage-one response; returns (triplets, malformed line count). Never raises."""
    triplets: list[KnowledgeTriplet] = []
    malformed = 0
    for line in str(response).splitlines():
        if not line.strip():
            continue
        parts = _split_triplet(line)
        if parts is None:
            malformed += 1
            continue
        try:
            triplets.append(KnowledgeTriplet(*parts, source_disease=disease))
        except InvalidInput:
            malformed += 1
    return triplets, malformed


def parse_definitions(response: str) -> tuple[dict[str, str], int]:
    out: dict[str, str] = {}
    malformed = 0
    for line in str(response).splitlines():
        if not line.strip():
            continue
        text = _clean_line(line)
        rel, sep, definition = text.partition("|")
        if not sep and ":" in text:
            rel, sep, definition = text.partition(":")
        rel, definition = " ".join(rel.split()), " ".join(definition.split())
        if not sep or not rel or not definition:
            malformed += 1
            continue
        out.setdefault(rel, definition)
    return out, malformed


# -- operations ------------------------------------------------------------

def extract_triplets(client: ChatClient, disease: str, description: str) -> ExtractionResult:
    if not description or not description.strip():
        raise InvalidInput(f"empty description for {disease!r}")
    try:
        response = client.complete(build_triplet_prompt(disease, description))
    except ChatUnavailable as exc:
        raise ExtractionUnavailable(f"triplet extraction failed for {disease!r}: {exc}") from exc
    triplets, malformed = parse_triplets(response, disease)
    result = ExtractionResult(disease, triplets, malformed)
    if result.empty:
        warnings.warn(f"no parseable triplets for {disease!r}; marked knowledge-poor",
                      EmptyExtractionWarning, stacklevel=2)
    return result


def extract_corpus(client: ChatClient, corpus: Sequence[dict], workers: int = 1) -> list[ExtractionResult]:
    """Run stage one over ``[{label, description}, ...]``; results keep corpus order."""
    def one(rec):
        return extract_triplets(client, rec["label"], rec["description"])

    if workers <= 1:
        return [one(rec) for rec in corpus]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, corpus))


def distinct_relations(triplets: Iterable[KnowledgeTriplet]) -> list[str]:
    return sorted({t.relation for t in triplets})


def scrub_disease_names(text: str, disease_labels: Iterable[str]) -> str:
    for label in sorted(disease_labels, key=len, reverse=True):
        if label.strip():
            text = re.sub(rf"(?i)\b{re.escape(label.strip())}\b", "a condition", text)
    return text


def define_relations(client: ChatClient, triplets: Sequence[KnowledgeTriplet],
                     disease_labels: Iterable[str] | None = None) -> list[RelationDefinition]:
    """One disease-independent definition per distinct relation surface string.

    Relations the client skips get the rule-based definition so that every relation
    ends up defined exactly once.
    """
    if not triplets:
        raise InvalidInput("define_relations needs at least one triplet")
    relations = distinct_relations(triplets)
    try:
        response = client.complete(build_definition_prompt(relations))
    except ChatUnavailable as exc:
        raise ExtractionUnavailable(f"relation definition failed: {exc}") from exc
    parsed, _ = parse_definitions(response)
    lowered = {k.lower(): v for k, v in parsed.items()}
    labels = set(disease_labels or ()) | {t.source_disease for t in triplets}
    out = []
    for rel in relations:
        definition = parsed.get(rel) or lowered.get(rel.lower()) or rule_based_definition(rel)
        out.append(RelationDefinition(rel, scrub_disease_names(definition, labels)))
    return out


# -- offline rule-based extraction -------------------------------------------

RELATION_FAMILIES = {
    "causal": (
        ("causes", "leads to", "results in", "triggers", "produces"),
        "the first concept brings about or produces the second concept as its effect",
    ),
    "manifestation": (
        ("presents with", "manifests as", "shows"),
        "the first concept is observed clinically through the second concept as a sign",
    ),
    "association": (
        ("is associated with", "is linked to", "correlates with"),
        "the first concept tends to occur together with the second concept",
    ),
    "location": (
        ("affects", "involves", "targets"),
        "the first concept acts upon or damages the second concept as a body site",
    ),
    "treatment": (
        ("is treated with", "is managed with"),
        "the first concept is relieved or controlled by applying the second concept",
    ),
    "composition": (
        ("includes", "comprises"),
        "the first concept contains the second concept as one of its parts",
    ),
}

_PATTERN_RELATIONS = sorted(
    (rel for rels, _ in RELATION_FAMILIES.values() for rel in rels), key=len, reverse=True
)
_RULE_RE = re.compile(
    r"^\s*(?P<head>.+?)\s+(?P<rel>" + "|".join(re.escape(r) for r in _PATTERN_RELATIONS)
    + r")\s+(?P<tail>.+?)\s*$",
    re.IGNORECASE,
)


def rule_based_definition(relation: str) -> str:
    key = " ".join(relation.lower().split())
    for rels, definition in RELATION_FAMILIES.values():
        if key in rels:
            return definition
    return f"the first concept is linked to the second concept by the relation {key}"


def rule_based_triplets(disease: str, description: str) -> ExtractionResult:
    """Pattern extractor for ``X <relation> Y.`` sentences (offline corpora)."""
    if not description or not description.strip():
        raise InvalidInput(f"empty description for {disease!r}")
    result = ExtractionResult(disease)
    for sentence in re.split(r"[.;\n]+", description):
        if not sentence.strip():
            continue
        m = _RULE_RE.match(sentence)
        if not m:
            result.malformed += 1
            continue
        try:
            result.triplets.append(
                KnowledgeTriplet(m["head"], m["rel"].lower(), m["tail"], source_disease=disease))
        except InvalidInput:
            result.malformed += 1
    return result


class RuleBasedChatClient(ChatClient):
    """Answers the two stage prompts offline using the pattern extractor."""

    kind = "rule-based"

    def complete(self, prompt: str) -> str:
        if prompt.startswith(TRIPLET_PROMPT[:40]):
            disease = re.search(r"^Disease: (.*)$", prompt, re.M).group(1)
            description = prompt.split("Description:\n", 1)[1].split("\n\nRules:", 1)[0]
            res = rule_based_triplets(disease, description)
            return "".join(f"{t.head} | {t.relation} | {t.tail}\n" for t in res.triplets)
        if prompt.startswith(DEFINITION_PROMPT[:40]):
            rels = [r for r in prompt.split("Relations:\n", 1)[1].splitlines() if r.strip()]
            return "".join(f"{r} | {rule_based_definition(r)}\n" for r in rels)
        raise ChatUnavailable("rule-based client only answers extraction prompts")


# -- files -----------------------------------------------------------------

def read_jsonl(path: str | os.PathLike) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise InvalidInput(f"{path}:{lineno}: {exc}") from exc
    return rows


def dumps_jsonl(rows: Iterable[dict]) -> str:
    return "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in rows)


def triplets_to_rows(triplets: Iterable[KnowledgeTriplet]) -> list[dict]:
    return [asdict(t) for t in triplets]


def triplets_from_rows(rows: Iterable[dict]) -> list[KnowledgeTriplet]:
    return [KnowledgeTriplet(r["head"], r["relation"], r["tail"], r["source_disease"]) for r in rows]


def definitions_to_rows(defs: Iterable[RelationDefinition]) -> list[dict]:
    return [asdict(d) for d in defs]


def definitions_from_rows(rows: Iterable[dict]) -> list[RelationDefinition]:
    return [RelationDefinition(r["relation"], r["definition"]) for r in rows]
