"""Pathology report cleaning through a chat-completion service, plus the
keyword-token matcher that feeds manifest keyword indices."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import httpx

log = logging.getLogger(__name__)

TOKEN_ENV = "RASA_LLM_API_KEY"
BASE_URL_ENV = "RASA_LLM_BASE_URL"
DEFAULT_BASE_URL = "https://api.openai.com/v1"
DEFAULT_MODEL = "gpt-4"

DEFAULT_SYSTEM = (
    "You are a pathology assistant. You rewrite surgical pathology reports into "
    "descriptions of what is visible on the whole-slide image."
)
DEFAULT_TASK = (
    "Rewrite the report below as a detailed description of the microscopic visual "
    "characteristics of the tissue: architecture, cell morphology, differentiation, "
    "invasion depth, stroma, necrosis and inflammation. Do not mention lymph node "
    "findings or counts, immunohistochemistry results, or genetic and molecular data. "
    "Return plain prose only."
)
DEFAULT_KEYWORDS = ("tumor", "cancer")
DEFAULT_EXCLUSIONS = (
    "lymph node", "lymph nodes", "immunohistochemistry", "immunohistochemical",
    "ihc", "genetic", "mutation", "msi", "microsatellite", "kras", "braf",
)

_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


class TransportError(RuntimeError):
    pass


class ContentError(RuntimeError):
    pass


class MissingTokenError(RuntimeError):
    pass


@dataclass(frozen=True)
class CleaningPrompt:
    system: str = DEFAULT_SYSTEM
    task: str = DEFAULT_TASK
    keywords: tuple = DEFAULT_KEYWORDS
    exclusions: tuple = DEFAULT_EXCLUSIONS

    def __post_init__(self):
        if not self.exclusions:
            raise ValueError("exclusion list must not be empty")
        if not self.system.strip() or not self.task.strip():
            raise ValueError("prompt text must not be empty")

    def canonical(self) -> str:
        return json.dumps({"system": self.system, "task": self.task,
                           "keywords": list(self.keywords),
                           "exclusions": list(self.exclusions)}, sort_keys=True)

    @classmethod
    def from_file(cls, path) -> "CleaningPrompt":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        unknown = set(doc) - {"system", "task", "keywords", "exclusions"}
        if unknown:
            raise ValueError(f"unknown prompt keys: {sorted(unknown)}")
        for key in ("keywords", "exclusions"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)


@dataclass
class CleaningRecord:
    case_id: str
    raw: str
    cleaned: str
    provider: str
    digest: str
    from_cache: bool = field(default=False, compare=False)

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("from_cache")
        return json.dumps(d, indent=2, sort_keys=True)


@dataclass
class Endpoint:
    """Where and how to reach the chat-completion service."""

    provider: str = "mock"
    base_url: str = ""
    model: str = DEFAULT_MODEL
    temperature: float = 0.0
    timeout: float = 60.0
    max_attempts: int = 3
    backoff: float = 1.0
    token_env: str = TOKEN_ENV
    transport: Optional[httpx.BaseTransport] = None
    sleep: Callable[[float], None] = time.sleep

    def resolved_base_url(self) -> str:
        return (self.base_url or os.environ.get(BASE_URL_ENV, "") or DEFAULT_BASE_URL).rstrip("/")

    def token(self) -> str:
        tok = os.environ.get(self.token_env, "").strip()
        if not tok:
            raise MissingTokenError(f"environment variable {self.token_env} is not set")
        return tok


def report_digest(raw: str, prompt: CleaningPrompt) -> str:
    h = hashlib.sha256()
    h.update(prompt.canonical().encode("utf-8"))
    h.update(b"\0")
    h.update(raw.encode("utf-8"))
    return h.hexdigest()


class ReportCache:
    """One JSON file per (digest, provider). Writes are serialized."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, digest: str, provider: str) -> Path:
        return self.directory / f"{digest}.{provider}.json"

    def get(self, digest: str, provider: str) -> Optional[CleaningRecord]:
        p = self._path(digest, provider)
        if not p.is_file():
            return None
        rec = CleaningRecord(**json.loads(p.read_text(encoding="utf-8")))
        rec.from_cache = True
        return rec

    def put(self, rec: CleaningRecord) -> None:
        p = self._path(rec.digest, rec.provider)
        with self._lock:
            tmp = p.with_suffix(".tmp")
            tmp.write_text(rec.to_json() + "\n", encoding="utf-8")
            tmp.replace(p)


def mock_clean(raw: str, prompt: CleaningPrompt) -> str:
    """Drop every sentence that mentions an exclusion term."""
    terms = [t.lower() for t in prompt.exclusions]
    sentences = [s.strip() for s in _SENTENCE_END.split(raw.strip()) if s.strip()]
    kept = [s for s in sentences if not any(t in s.lower() for t in terms)]
    return " ".join(kept)


def build_request(raw: str, prompt: CleaningPrompt, endpoint: Endpoint) -> dict:
    return {
        "model": endpoint.model,
        "temperature": endpoint.temperature,
        "messages": [
            {"role": "system", "content": prompt.system},
            {"role": "user", "content": f"{prompt.task}\n\nReport:\n{raw}"},
        ],
    }


def _live_clean(raw: str, prompt: CleaningPrompt, endpoint: Endpoint) -> str:
    token = endpoint.token()
    url = endpoint.resolved_base_url() + "/chat/completions"
    body = build_request(raw, prompt, endpoint)
    headers = {"Authorization": f"Bearer {token}"}
    last: Optional[Exception] = None
    with httpx.Client(timeout=endpoint.timeout, transport=endpoint.transport) as client:
        for attempt in range(endpoint.max_attempts):
            try:
                resp = client.post(url, json=body, headers=headers)
                if resp.status_code >= 500 or resp.status_code == 429:
                    raise httpx.HTTPStatusError(f"status {resp.status_code}",
                                                request=resp.request, response=resp)
                resp.raise_for_status()
                break
            except (httpx.TransportError, httpx.HTTPStatusError) as exc:
                last = exc
                retryable = not isinstance(exc, httpx.HTTPStatusError) or \
                    exc.response.status_code >= 500 or exc.response.status_code == 429
                if not retryable:
                    raise TransportError(f"request rejected: {exc}") from exc
                log.warning("cleaning request attempt %d/%d failed: %s",
                            attempt + 1, endpoint.max_attempts, exc)
                if attempt + 1 < endpoint.max_attempts:
                    endpoint.sleep(endpoint.backoff * 2 ** attempt)
        else:
            raise TransportError(
                f"request failed after {endpoint.max_attempts} attempts: {last}") from last
    try:
        content = resp.json()["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError):
        raise ContentError("malformed chat-completion response") from None
    if content is not None and not isinstance(content, str):
        raise ContentError("chat-completion content is not text")
    return content or ""


def clean_report(raw: str, prompt: CleaningPrompt, endpoint: Endpoint,
                 case_id: str = "", cache: Optional[ReportCache] = None) -> CleaningRecord:
    if not raw.strip():
        raise ValueError("raw report text is empty")
    digest = report_digest(raw, prompt)
    if cache is not None:
        hit = cache.get(digest, endpoint.provider)
        if hit is not None:
            hit.case_id = case_id or hit.case_id
            return hit
    if endpoint.provider == "mock":
        cleaned = mock_clean(raw, prompt)
    elif endpoint.provider == "live":
        cleaned = _live_clean(raw, prompt, endpoint)
    else:
        raise ValueError(f"unknown provider {endpoint.provider!r}")
    cleaned = cleaned.strip()
    if not cleaned:
        raise ContentError(f"empty cleaned text for case {case_id!r}")
    rec = CleaningRecord(case_id, raw, cleaned, endpoint.provider, digest)
    if cache is not None:
        cache.put(rec)
    return rec


def find_keyword_tokens(token_strings: Sequence[str], keywords: Sequence[str]) -> list:
    """Indices of tokens belonging to a word that contains a keyword.

    WordPiece continuations (``##xx``) are glued onto the preceding token to
    rebuild whole words, and every piece of a matching word is returned.
    Matching is case-insensitive.
    """
    if not keywords:
        raise ValueError("keyword list must not be empty")
    if not token_strings:
        raise ValueError("token list must not be empty")
    kws = [k.lower() for k in keywords if k]
    words: list[tuple[str, list]] = []
    for i, tok in enumerate(token_strings):
        low = tok.lower()
        if low.startswith("##") and words:
            text, idx = words[-1]
            words[-1] = (text + low[2:], idx + [i])
        else:
            words.append((low.lstrip("#"), [i]))
    hits = []
    for text, idx in words:
        if text and any(k in text for k in kws):
            hits.extend(idx)
    return hits
