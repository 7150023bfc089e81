"""
Remote text-completion clients.

Acquisition and judging both talk to a chat-style completion endpoint through
the same small interface: send a system text and a user text, get a completion
string back. Recorded fixtures and an offline client keep every command usable
without network access.
"""

import hashlib
import json
import logging
import os
import re
import threading
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Dict, Optional

import requests
from requests.adapters import HTTPAdapter, Retry
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential, wait_none

from evidencemap.errors import RemoteError

logger = logging.getLogger(__name__)

DEFAULT_API_BASE = "https://api.openai.com/v1"
API_KEY_ENV = "EVIDENCEMAP_API_KEY"
USER_AGENT = "evidencemap/0.1 (+requests)"


def request_hash(model_name: str, system_text: str, user_text: str) -> str:
    payload = json.dumps([model_name, system_text, user_text], ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class CompletionClient(ABC):
    model_name: str = ""

    @abstractmethod
    def complete(self, system_text: str, user_text: str) -> str:
        """Return the completion text for one request."""


# -------------------- HTTP session --------------------
def make_session() -> requests.Session:
    s = requests.Session()
    s.headers.update({"User-Agent": USER_AGENT, "Content-Type": "application/json"})
    retries = Retry(total=5, backoff_factor=0.6,
                    status_forcelist=[429, 500, 502, 503, 504],
                    allowed_methods=["POST"], raise_on_status=False)
    s.mount("https://", HTTPAdapter(max_retries=retries))
    s.mount("http://", HTTPAdapter(max_retries=retries))
    return s


class HttpCompletionClient(CompletionClient):
    """OpenAI-compatible chat-completions endpoint."""

    def __init__(self, model_name: str, api_base: str = DEFAULT_API_BASE,
                 api_key: Optional[str] = None, timeout_seconds: int = 60,
                 session: Optional[requests.Session] = None):
        self.model_name = model_name
        self.api_base = api_base.rstrip("/")
        self._api_key = api_key if api_key is not None else os.getenv(API_KEY_ENV, "")
        self.timeout_seconds = timeout_seconds
        self._session = session or make_session()

    def complete(self, system_text: str, user_text: str) -> str:
        if not self._api_key:
            raise RemoteError(f"no API key configured; set {API_KEY_ENV}")
        body = {
            "model": self.model_name,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": system_text},
                {"role": "user", "content": user_text},
            ],
        }
        try:
            response = self._session.post(
                f"{self.api_base}/chat/completions",
                json=body,
                headers={"Authorization": f"Bearer {self._api_key}"},
                timeout=self.timeout_seconds,
            )
            response.raise_for_status()
            payload = response.json()
        except requests.RequestException as exc:
            raise RemoteError(f"completion request failed: {exc}") from exc
        except ValueError as exc:
            raise RemoteError(f"completion response was not JSON: {exc}") from exc

        try:
            return payload["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise RemoteError(f"unexpected completion payload shape: {exc}") from exc


class FixtureClient(CompletionClient):
    """Replays recorded completions; optionally records misses from a live client."""

    def __init__(self, path: Path, model_name: str = "fixture", delegate: Optional[CompletionClient] = None):
        self.path = Path(path)
        self.model_name = delegate.model_name if delegate else model_name
        self.delegate = delegate
        self.calls = 0
        self._lock = threading.Lock()
        self._replies: Dict[str, str] = {}
        if self.path.exists():
            try:
                self._replies = json.loads(self.path.read_text(encoding="utf-8"))
            except (OSError, ValueError) as exc:
                raise RemoteError(f"cannot read fixture file {self.path}: {exc}") from exc

    def complete(self, system_text: str, user_text: str) -> str:
        key = request_hash(self.model_name, system_text, user_text)
        with self._lock:
            self.calls += 1
            if key in self._replies:
                return self._replies[key]
        if self.delegate is None:
            raise RemoteError(f"no recorded completion for request {key[:12]} in {self.path}")
        reply = self.delegate.complete(system_text, user_text)
        with self._lock:
            self._replies[key] = reply
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(json.dumps(self._replies, indent=2, sort_keys=True), encoding="utf-8")
        return reply


_WORD = re.compile(r"[A-Za-z0-9]+")
_JUDGE_FIELD = re.compile(r"^(Question|Generated answer|Reference answer): ?(.*)$", re.MULTILINE)


class OfflineClient(CompletionClient):
    """
    Deterministic stand-in for a hosted model.

    Acquisition requests get key points built from the question words; judge
    requests get a verdict from token overlap between generated and reference
    answers. Meant for desk-scale runs and demos, not for reported scores.
    """

    model_name = "offline"

    def complete(self, system_text: str, user_text: str) -> str:
        fields = dict(_JUDGE_FIELD.findall(user_text))
        if "Generated answer" in fields and "Reference answer" in fields:
            generated = set(_WORD.findall(fields["Generated answer"].lower()))
            reference = set(_WORD.findall(fields["Reference answer"].lower()))
            overlap = len(generated & reference) / len(reference) if reference else 0.0
            fluency = 1.0 if generated else 0.0
            return json.dumps({"accuracy": round(overlap, 4), "fluency": fluency})

        question = user_text.rsplit("Question:", 1)[-1].replace("Summary:", "").strip()
        words = _WORD.findall(question)
        if not words:
            return "No key points available."
        return " ".join(f"Key point: {word}." for word in words[:8])


def complete_with_retry(client: CompletionClient, system_text: str, user_text: str,
                        attempts: int = 3, backoff_seconds: float = 1.0) -> str:
    """Call the client, retrying RemoteError with exponential backoff."""
    retrying = Retrying(
        stop=stop_after_attempt(attempts),
        wait=wait_exponential(multiplier=backoff_seconds, max=30) if backoff_seconds > 0 else wait_none(),
        retry=retry_if_exception_type(RemoteError),
        reraise=True,
    )
    for attempt in retrying:
        with attempt:
            if attempt.retry_state.attempt_number > 1:
                logger.warning("Retrying completion request (attempt %d/%d)",
                               attempt.retry_state.attempt_number, attempts)
            return client.complete(system_text, user_text)
    raise RemoteError("completion retries exhausted")  # pragma: no cover


def make_client(backend: str, model_name: str, api_base: str = DEFAULT_API_BASE,
                timeout_seconds: int = 60) -> CompletionClient:
    """Build a client from a backend key: offline | http | fixture:<path> | record:<path>."""
    if backend == "offline":
        return OfflineClient()
    if backend == "http":
        return HttpCompletionClient(model_name, api_base=api_base, timeout_seconds=timeout_seconds)
    if backend.startswith("fixture:"):
        return FixtureClient(Path(backend.split(":", 1)[1]), model_name=model_name)
    if backend.startswith("record:"):
        live = HttpCompletionClient(model_name, api_base=api_base, timeout_seconds=timeout_seconds)
        return FixtureClient(Path(backend.split(":", 1)[1]), delegate=live)
    raise RemoteError(f"unknown remote backend {backend!r}")
