import json
import warnings

import httpx
import pytest

from protokg.errors import ChatUnavailable, EmptyExtractionWarning, ExtractionUnavailable, InvalidInput
from protokg.kg_construction import (DisabledChatClient, KnowledgeTriplet, LiveChatClient, MemoryChatClient,
                                     RecordedChatClient, RuleBasedChatClient, build_definition_prompt,
                                     build_triplet_prompt, define_relations, definitions_from_rows,
                                     definitions_to_rows, distinct_relations, dumps_jsonl, extract_corpus,
                                     extract_triplets, parse_definitions, parse_triplets, prompt_key,
                                     read_jsonl, rule_based_triplets, triplets_from_rows, triplets_to_rows)


class FixedClient:
    kind = "recorded-mock"

    def __init__(self, response):
        self.response = response
        self.prompts = []

    def complete(self, prompt):
        self.prompts.append(prompt)
        return self.response


def test_triplet_trims_and_rejects():
    t = KnowledgeTriplet("  chronic  inflammation ", "causes", " tissue damage", "d")
    assert t.head == "chronic inflammation" and t.tail == "tissue damage"
    with pytest.raises(InvalidInput):
        KnowledgeTriplet("a", "causes", "a", "d")
    with pytest.raises(InvalidInput):
        KnowledgeTriplet("", "causes", "b", "d")


def test_extract_tuple_form():
    res = extract_triplets(FixedClient("(chronic inflammation, causes, tissue damage)"), "gastritis",
                           "Chronic inflammation causes tissue damage.")
    assert [(t.head, t.relation, t.tail) for t in res.triplets] == [
        ("chronic inflammation", "causes", "tissue damage")]
    assert res.triplets[0].source_disease == "gastritis"


def test_one_good_one_malformed_line():
    res = extract_triplets(FixedClient("a | causes | b\nthis line has no structure"), "d", "text")
    assert len(res.triplets) == 1 and res.malformed == 1


def test_empty_description_rejected():
    with pytest.raises(InvalidInput):
        extract_triplets(FixedClient(""), "d", "   ")


def test_zero_triplets_warns_knowledge_poor():
    with pytest.warns(EmptyExtractionWarning):
        res = extract_triplets(FixedClient("nothing useful"), "d", "text")
    assert res.empty


def test_client_failure_becomes_extraction_unavailable():
    with pytest.raises(ExtractionUnavailable):
        extract_triplets(DisabledChatClient(), "d", "text")


@pytest.mark.parametrize("response", ["", "|||", "a|b", "(x, y)", "- 1. | | |", "\x00￿", "(a, b, a)",
                                      "a | b | c | d", None, 12345])
def test_parser_is_total(response):
    triplets, malformed = parse_triplets(response, "d")
    assert isinstance(triplets, list) and malformed >= 0


def test_parser_strips_bullets():
    triplets, _ = parse_triplets("- fever | causes | chills\n2. cough | leads to | pain", "d")
    assert [t.head for t in triplets] == ["fever", "cough"]


def test_define_relations_one_per_surface_form():
    trips = [KnowledgeTriplet("a", "leads to", "b", "d"), KnowledgeTriplet("c", "results in", "e", "d"),
             KnowledgeTriplet("f", "leads to", "g", "d")]
    client = FixedClient("leads to | x brings about y\nresults in | y follows from x")
    defs = define_relations(client, trips)
    assert [d.relation for d in defs] == ["leads to", "results in"]
    # duplicates collapsed before prompting
    assert client.prompts[0].count("leads to") == 1


def test_define_relations_empty_rejected():
    with pytest.raises(InvalidInput):
        define_relations(FixedClient(""), [])


def test_every_relation_gets_exactly_one_definition():
    trips = [KnowledgeTriplet("a", "causes", "b", "d"), KnowledgeTriplet("a", "weird link", "c", "d")]
    defs = define_relations(FixedClient("causes | produces an effect"), trips)
    assert sorted(d.relation for d in defs) == ["causes", "weird link"]
    assert all(d.definition for d in defs)


def test_definitions_scrubbed_of_disease_names():
    trips = [KnowledgeTriplet("a", "causes", "b", "Asthma")]
    defs = define_relations(FixedClient("causes | how asthma causes symptoms"), trips, ["Asthma"])
    assert "asthma" not in defs[0].definition.lower()


def test_recorded_client_replay_and_record(tmp_path):
    prompt = build_triplet_prompt("d", "desc")
    rec = RecordedChatClient(tmp_path, upstream=FixedClient("a | causes | b"))
    assert rec.complete(prompt) == "a | causes | b"
    path = tmp_path / f"{prompt_key(prompt)}.json"
    assert json.loads(path.read_text())["prompt"] == prompt
    replay = RecordedChatClient(tmp_path)
    assert replay.complete(prompt) == "a | causes | b"
    with pytest.raises(ChatUnavailable):
        replay.complete("unknown prompt")


def test_memory_client():
    c = MemoryChatClient({prompt_key("p"): "r"})
    assert c.complete("p") == "r"
    with pytest.raises(ChatUnavailable):
        c.complete("q")


def _chat_response(text):
    return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})


def test_live_client_retries_with_backoff(monkeypatch):
    monkeypatch.setenv("TEST_CHAT_KEY", "k")
    attempts, sleeps = [], []

    def handler(request):
        attempts.append(request)
        return httpx.Response(500) if len(attempts) < 3 else _chat_response("a | causes | b")

    c = LiveChatClient("http://chat.local/v1/chat/completions", "m", credential_env="TEST_CHAT_KEY",
                       rate_limit=0, backoff=0.5, transport=httpx.MockTransport(handler), sleep=sleeps.append)
    assert c.complete("hi") == "a | causes | b"
    assert len(attempts) == 3 and sleeps == [0.5, 1.0]
    body = json.loads(attempts[0].content)
    assert body["model"] == "m" and body["messages"][0]["content"] == "hi"
    assert attempts[0].headers["authorization"] == "Bearer k"


def test_live_client_gives_up_after_three_attempts():
    attempts = []

    def handler(request):
        attempts.append(1)
        return httpx.Response(429)

    c = LiveChatClient("http://chat.local", "m", rate_limit=0, transport=httpx.MockTransport(handler),
                       sleep=lambda s: None)
    with pytest.raises(ChatUnavailable):
        c.complete("hi")
    assert len(attempts) == 3
    with pytest.raises(ExtractionUnavailable):
        extract_triplets(c, "d", "text")


def test_live_client_rate_limit_sleeps():
    sleeps = []
    c = LiveChatClient("http://chat.local", "m", rate_limit=60.0,
                       transport=httpx.MockTransport(lambda r: _chat_response("x")), sleep=sleeps.append)
    c.complete("a")
    c.complete("b")
    assert len(sleeps) == 1 and 0 < sleeps[0] <= 1.0


def test_rule_based_extractor():
    res = rule_based_triplets("Flu", "Flu causes fever. Fever leads to chills. Nothing to see here.")
    assert [(t.head, t.relation, t.tail) for t in res.triplets] == [("Flu", "causes", "fever"),
                                                                   ("Fever", "leads to", "chills")]
    assert res.malformed == 1


def test_rule_based_client_answers_both_stages():
    c = RuleBasedChatClient()
    res = extract_triplets(c, "Flu", "Flu causes fever.")
    defs = define_relations(c, res.triplets, ["Flu"])
    assert defs[0].relation == "causes" and "first concept" in defs[0].definition


def test_corpus_extraction_deterministic_with_workers(small_data):
    client = MemoryChatClient(small_data.transcripts)
    a = extract_corpus(client, small_data.corpus)
    b = extract_corpus(client, small_data.corpus, workers=4)
    assert dumps_jsonl(triplets_to_rows(t for r in a for t in r.triplets)) == dumps_jsonl(
        triplets_to_rows(t for r in b for t in r.triplets))
    assert a[0].malformed == 1  # the junk header line in the first transcript


def test_jsonl_round_trip(tmp_path):
    trips = [KnowledgeTriplet("a", "causes", "b", "d")]
    p = tmp_path / "t.jsonl"
    p.write_text(dumps_jsonl(triplets_to_rows(trips)))
    assert triplets_from_rows(read_jsonl(p)) == trips
    defs = define_relations(FixedClient("causes | x makes y"), trips)
    assert definitions_from_rows(definitions_to_rows(defs)) == defs


def test_parse_definitions_colon_form():
    parsed, bad = parse_definitions("causes: x makes y\nnonsense")
    assert parsed == {"causes": "x makes y"} and bad == 1


def test_definition_prompt_lists_relations():
    assert "leads to\nresults in" in build_definition_prompt(distinct_relations(
        [KnowledgeTriplet("a", "results in", "b", "d"), KnowledgeTriplet("a", "leads to", "c", "d")]))
