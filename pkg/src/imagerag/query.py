"""Question analysis: pull key phrases out of the query text.

The primary extractor is a chat-completion LLM; a reply counts only if it is
a bracketed, comma-separated, quoted list. After too many malformed replies
the analyzer switches to a deterministic n-gram extractor ranked by sentence
embedding similarity.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import requests

from .errors import AnalysisError, DataError, ProviderError

logger = logging.getLogger(__name__)

KEYPHRASE_PROMPT = """Task: Extract keywords or key phrases from a given query sentence.

Guidelines:
- Analyze the sentence and identify the important keywords or phrases. These words or phrases should represent the core content or main information of the sentence.
- Ensure that the extracted words or phrases are meaningful. Focus on the names of ground targets from a remote sensing perspective.
- All adjectives should be part of a phrase that includes a target.
- Do not include standalone adjectives such as adjectives that describe size, shape, color, texture, etc. unless they are paired with a target.
- Do not include keywords or phrases that relate to position and orientation.
- Avoid including overly vague words such as 'image', 'picture', 'photo', 'object', etc., unless they are part of a more specific phrase that provides additional context.

Example:
Input query: "How many aircraft are heading in the up-right direction? What is the color of the building rooftop below them?"
Output: ["aircraft", "building rooftop", "aircraft are heading in the up-right direction", "color of the building rooftop"]

Your task is to apply the same process to the following sentence:

Input query: {question}
Output:"""

STOPWORDS = frozenset(
    """a an the and or but if then else of in on at to from by with for as is
    are was were be been being am do does did doing have has had having this
    that these those it its they them their there here what which who whom
    whose when where why how not no nor so than too very can will just should
    would could may might must shall about into over under again further once
    all any both each more most other some such only own same s t don now
    up down out off above below between during before after""".split()
)

_NGRAM_RANGE = (2, 4)
_MAX_FALLBACK_PHRASES = 3

DEFAULT_FILTER_FILE = Path(__file__).parent / "data" / "filter_words.json"


class TaskKind(str, Enum):
    POSITION = "position"
    COLOR = "color"
    COUNT = "count"
    OTHER = "other"


class PhraseSource(str, Enum):
    LLM = "llm"
    FALLBACK = "fallback"


@dataclass(frozen=True)
class Question:
    question_id: str
    text: str
    options: tuple[tuple[str, str], ...] = ()
    task_kind: TaskKind = TaskKind.OTHER

    def __post_init__(self):
        if not self.text.strip():
            raise DataError("question text must be non-empty")
        letters = [letter for letter, _ in self.options]
        if len(letters) > 5:
            raise DataError(f"at most 5 options (A-E) allowed in {self.question_id!r}")
        if len(set(letters)) != len(letters):
            raise DataError(f"duplicate option letters in {self.question_id!r}")
        expected = [chr(ord("A") + i) for i in range(len(letters))]
        if letters and letters != expected:
            raise DataError(
                f"option letters must be contiguous from A, got {letters}"
            )

    @property
    def option_letters(self) -> str:
        return "".join(letter for letter, _ in self.options)


@dataclass(frozen=True)
class KeyPhraseSet:
    phrases: tuple[str, ...]
    source: PhraseSource
    combined_sentence: str
    degraded: bool = False

    def __post_init__(self):
        if not self.phrases:
            raise DataError("a key phrase set must hold at least one phrase")
        folded = [p.casefold() for p in self.phrases]
        if len(set(folded)) != len(folded):
            raise DataError("duplicate phrases after case folding")
        for p in self.phrases:
            if p not in self.combined_sentence:
                raise DataError(f"combined sentence does not contain {p!r}")


def combine_phrases(phrases: list[str]) -> str:
    return ", ".join(phrases)


def load_filter_words(path: str | Path | None = None) -> frozenset[str]:
    """Union of the standalone-adjective / orientation / vague word lists,
    case-folded. Ships as an editable data file."""
    path = Path(path) if path else DEFAULT_FILTER_FILE
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    words = set()
    for group in data.values():
        words.update(w.casefold() for w in group)
    return frozenset(words)


def parse_phrase_list(reply: str) -> list[str]:
    """Parse a bracketed, comma-separated, quoted list from an LLM reply.

    Anything that does not contain such a list of non-empty strings raises
    ProviderError (counted as a parse failure by the caller).
    """
    start, end = reply.find("["), reply.rfind("]")
    if start == -1 or end == -1 or end <= start:
        raise ProviderError("reply has no bracketed list")
    try:
        parsed = json.loads(reply[start : end + 1])
    except json.JSONDecodeError as exc:
        raise ProviderError(f"bracketed list is not valid JSON: {exc}")
    if not isinstance(parsed, list) or not parsed:
        raise ProviderError("bracketed list is empty or not a list")
    phrases = []
    for item in parsed:
        if not isinstance(item, str) or not item.strip():
            raise ProviderError("list items must be non-empty strings")
        phrases.append(item.strip())
    return phrases


def _dedupe_casefold(phrases: list[str]) -> list[str]:
    seen: set[str] = set()
    out = []
    for p in phrases:
        k = p.casefold()
        if k not in seen:
            seen.add(k)
            out.append(p)
    return out


class HttpChatProvider:
    """Minimal chat-completions client (base URL + model from config/env)."""

    def __init__(
        self,
        base_url: str,
        model: str,
        temperature: float = 1.0,
        top_p: float = 0.99,
        max_tokens: int = 512,
        timeout: float = 120.0,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.temperature = temperature
        self.top_p = top_p
        self.max_tokens = max_tokens
        self.timeout = timeout

    def complete(self, prompt: str) -> str:
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
        }
        try:
            resp = requests.post(
                f"{self.base_url}/chat/completions", json=payload, timeout=self.timeout
            )
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
        except (requests.RequestException, KeyError, IndexError, ValueError) as exc:
            raise ProviderError(f"chat completion failed: {exc}")


class StubChatProvider:
    """Replays canned replies keyed by the question text inside the prompt
    (JSON file or dict: {"default": ..., <question text>: ...})."""

    def __init__(self, replies: dict[str, str] | str | Path):
        if isinstance(replies, (str, Path)):
            with open(replies, encoding="utf-8") as fh:
                replies = json.load(fh)
        self.replies = dict(replies)

    def complete(self, prompt: str) -> str:
        marker = "Input query: "
        idx = prompt.rfind(marker)
        if idx != -1:
            tail = prompt[idx + len(marker):]
            key = tail.rsplit("\nOutput:", 1)[0].strip().strip('"')
        else:
            key = prompt
        if key in self.replies:
            return self.replies[key]
        if "default" in self.replies:
            return self.replies["default"]
        raise ProviderError(f"stub has no reply for question {key!r} and no default")


class QueryAnalyzer:
    """Extracts key phrases via a provider, with the n-gram fallback wired in.

    ``sentence_embed`` is a callable text -> unit vector used to rank fallback
    candidates; pass the gateway's embed_sentence.
    """

    def __init__(
        self,
        provider=None,
        sentence_embed=None,
        filter_words: frozenset[str] | None = None,
        max_retries: int = 10,
        fallback_enabled: bool = True,
    ):
        self.provider = provider
        self.sentence_embed = sentence_embed
        self.filter_words = filter_words if filter_words is not None else load_filter_words()
        self.max_retries = max_retries
        self.fallback_enabled = fallback_enabled

    def _filter(self, phrases: list[str]) -> list[str]:
        kept = [p for p in phrases if p.casefold() not in self.filter_words]
        dropped = len(phrases) - len(kept)
        if dropped:
            logger.debug("filtered %d standalone adjective/orientation phrases", dropped)
        return kept

    def extract(self, question: Question) -> KeyPhraseSet:
        """Provider extraction with retry, then fallback, then hard error."""
        if self.provider is not None:
            prompt = KEYPHRASE_PROMPT.format(question=question.text)
            for attempt in range(1, self.max_retries + 1):
                try:
                    reply = self.provider.complete(prompt)
                    phrases = self._filter(_dedupe_casefold(parse_phrase_list(reply)))
                    if not phrases:
                        raise ProviderError("all parsed phrases were filtered out")
                    return KeyPhraseSet(
                        phrases=tuple(phrases),
                        source=PhraseSource.LLM,
                        combined_sentence=combine_phrases(phrases),
                    )
                except ProviderError as exc:
                    logger.debug("phrase extraction attempt %d failed: %s", attempt, exc)
        if self.fallback_enabled:
            return self.fallback(question.text)
        raise AnalysisError(
            f"question {question.question_id!r} cannot be analyzed: "
            "provider failed and fallback is disabled"
        )

    def fallback(self, text: str) -> KeyPhraseSet:
        """Deterministic n-gram extractor: 2-4 token candidates, at most 3,
        ranked by cosine similarity of candidate vs whole-text sentence
        embeddings."""
        if not text.strip():
            raise DataError("cannot extract phrases from empty text")
        tokens = re.findall(r"[A-Za-z0-9'-]+", text.lower())
        if len(tokens) < _NGRAM_RANGE[0]:
            return KeyPhraseSet(
                phrases=(text.strip(),),
                source=PhraseSource.FALLBACK,
                combined_sentence=text.strip(),
                degraded=True,
            )
        candidates: list[tuple[str, int]] = []
        seen: set[str] = set()
        for n in range(_NGRAM_RANGE[0], _NGRAM_RANGE[1] + 1):
            for i in range(len(tokens) - n + 1):
                gram = tokens[i : i + n]
                if all(t in STOPWORDS for t in gram):
                    continue
                phrase = " ".join(gram)
                if phrase in self.filter_words or phrase in seen:
                    continue
                seen.add(phrase)
                candidates.append((phrase, i))
        if not candidates:
            # Stopword-only input: degrade to the raw text.
            return KeyPhraseSet(
                phrases=(text.strip(),),
                source=PhraseSource.FALLBACK,
                combined_sentence=text.strip(),
                degraded=True,
            )
        if self.sentence_embed is None:
            raise AnalysisError("fallback extraction needs a sentence embedder")
        full_vec = self.sentence_embed(text)
        scored = []
        for phrase, pos in candidates:
            vec = self.sentence_embed(phrase)
            score = float(np.dot(vec, full_vec))
            scored.append((-score, pos, len(phrase.split()), phrase))
        scored.sort()
        picked = [item[3] for item in scored[:_MAX_FALLBACK_PHRASES]]
        return KeyPhraseSet(
            phrases=tuple(picked),
            source=PhraseSource.FALLBACK,
            combined_sentence=combine_phrases(picked),
        )
