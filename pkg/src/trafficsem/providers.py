"""Language providers used for concept generation and paraphrasing.

``StubProvider`` is fully deterministic and offline. ``HttpProvider``
talks to any chat-completion style endpoint.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import re
import urllib.error
import urllib.request
from functools import lru_cache
from importlib import resources

from .errors import ProviderError

KEY_CONCEPT_PROMPT = (
    "List {v} typical vocabularies to represent {mission}? "
    "Note: Everything should be a single word."
)
ASSOCIATION_PROMPT = "What are associated words with vocabularies in set {words}?"
PARAPHRASE_PROMPT = (
    "Paraphrase the following description of network traffic. Keep every number "
    "and address unchanged and reply with the paraphrase only.\n\n{text}"
)

_PREFIXES = ("Notably,", "Observed:", "Reportedly,", "Overall,")
_CLAUSE_SPLIT = re.compile(
    r",\s+(?=(?:involving|while|with|which|where|from|over|totaling)\b)|;\s+")
_WORD = re.compile(r"[A-Za-z]+")


@lru_cache(maxsize=None)
def _data(name):
    return json.loads(resources.files("trafficsem").joinpath("data", name).read_text())


def _rng(*parts) -> random.Random:
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def parse_word_list(reply: str) -> list:
    """Split an LLM list reply (numbered, bulleted or comma separated)."""
    items = []
    for line in reply.splitlines():
        for part in line.split(","):
            part = re.sub(r"^\s*(?:\d+[.)]|[-*•])\s*", "", part).strip().strip(".\"'")
            if part:
                items.append(part)
    return items


def _tokens(text):
    return [t.lower() for t in _WORD.findall(text)]


def token_overlap(a: str, b: str) -> float:
    """Multiset token overlap ``|A & B| / max(|A|, |B|)``."""
    from collections import Counter
    ca, cb = Counter(_tokens(a)), Counter(_tokens(b))
    denom = max(sum(ca.values()), sum(cb.values()))
    return sum((ca & cb).values()) / denom if denom else 1.0


class StubProvider:
    """Offline provider; every output is a pure function of (seed, input)."""

    kind = "stub"

    def __init__(self, seed: int = 0):
        self.seed = seed

    # -- concepts ---------------------------------------------------------
    def _stream(self, mission):
        data = _data("concepts.json")
        bank = list(data["missions"].get(mission.strip().lower(), []))
        _rng(self.seed, "bank", mission).shuffle(bank)
        pool = [w for w in data["pool"] if w not in bank]
        _rng(self.seed, "pool", mission).shuffle(pool)
        return bank + pool

    def key_concepts(self, mission: str, v: int, attempt: int = 0) -> list:
        stream = self._stream(mission)
        start = (attempt * v) % len(stream)
        return (stream + stream)[start:start + v]

    def associated(self, words, attempt: int = 0) -> list:
        data = _data("concepts.json")
        out = []
        for w in words:
            assoc = data["associations"].get(w)
            if assoc is None:
                assoc = _rng(self.seed, "assoc", w, attempt).sample(data["pool"], 2)
            out.extend(assoc)
        return out

    # -- paraphrase -------------------------------------------------------
    def paraphrase_text(self, text: str) -> str:
        rng = _rng(self.seed, "para", text)
        body, end = (text[:-1], text[-1]) if text and text[-1] in ".!?" else (text, "")
        clauses = _CLAUSE_SPLIT.split(body)
        if len(clauses) > 1:
            r = 1 + rng.randrange(len(clauses) - 1)
            first = clauses[0]
            if len(first) > 1 and first[0].isupper() and first[1].islower():
                clauses[0] = first[0].lower() + first[1:]
            clauses = clauses[r:] + clauses[:r]
            body = ", ".join(clauses)
            body = body[:1].upper() + body[1:]

        words = list(_WORD.finditer(body))
        syn = _data("synonyms.json")
        candidates = [m for m in words if m.group().lower() in syn]
        budget = len(words) // 4
        chosen = sorted(rng.sample(candidates, min(budget, len(candidates))), key=lambda m: m.start())
        pieces, last = [], 0
        for m in chosen:
            repl = rng.choice(syn[m.group().lower()])
            if m.group()[0].isupper():
                repl = repl[0].upper() + repl[1:]
            pieces += [body[last:m.start()], repl]
            last = m.end()
        body = "".join(pieces) + body[last:]

        out = body + end
        if out == text or not out.strip():
            out = f"{rng.choice(_PREFIXES)} {text}" if text.strip() else "Observed: traffic."
        return out


class HttpProvider:
    """Chat-completion client: POST ``{model, messages}``, read ``choices[0]``.

    The bearer token is read from the environment variable ``token_env``.
    """

    kind = "http"

    def __init__(self, endpoint: str, model: str = "gpt-4o", timeout: float = 30.0,
                 token_env: str = "LLM_API_TOKEN", max_in_flight: int = 4):
        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout
        self.token_env = token_env
        self.max_in_flight = max_in_flight

    def chat(self, content: str) -> str:
        body = json.dumps({"model": self.model,
                           "messages": [{"role": "user", "content": content}]}).encode()
        req = urllib.request.Request(self.endpoint, data=body, method="POST",
                                     headers={"Content-Type": "application/json"})
        token = os.environ.get(self.token_env)
        if token:
            req.add_header("Authorization", f"Bearer {token}")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                raw = resp.read()
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise ProviderError(f"request to {self.endpoint} failed: {exc}", content) from exc
        try:
            text = json.loads(raw)["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProviderError("malformed chat-completion response", content) from exc
        if not text or not text.strip():
            raise ProviderError("empty completion", content)
        return text.strip()

    def key_concepts(self, mission: str, v: int, attempt: int = 0) -> list:
        return parse_word_list(self.chat(KEY_CONCEPT_PROMPT.format(v=v, mission=mission)))

    def associated(self, words, attempt: int = 0) -> list:
        return parse_word_list(self.chat(ASSOCIATION_PROMPT.format(words="{" + ", ".join(words) + "}")))

    def paraphrase_text(self, text: str) -> str:
        try:
            return self.chat(PARAPHRASE_PROMPT.format(text=text))
        except ProviderError as exc:
            exc.original = text
            raise


def make_provider(kind: str = "stub", **kwargs):
    if kind == "stub":
        return StubProvider(seed=kwargs.get("seed", 0))
    if kind == "http":
        if not kwargs.get("endpoint"):
            raise ValueError("http provider requires an endpoint")
        keys = ("endpoint", "model", "timeout", "token_env", "max_in_flight")
        return HttpProvider(**{k: kwargs[k] for k in keys if k in kwargs})
    raise ValueError(f"unknown provider kind {kind!r}")
