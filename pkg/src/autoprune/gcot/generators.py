"""Text generators that expand reasoning nodes.

A generator maps ``(stage, prompt, chain, temperature)`` to one text
continuation, where ``chain`` is the list of ancestor contents from the root.
"""

import abc
import logging
import os
import threading
import time

import httpx

from ..errors import GeneratorFailure
from ..metric import BUILTIN_TEXT
from .prompts import Stage

logger = logging.getLogger(__name__)

DEFAULT_FIXTURE_CANDIDATES = (
    BUILTIN_TEXT["magnitude"],
    BUILTIN_TEXT["wanda"],
    BUILTIN_TEXT["autoprune"],
)


class CandidateGenerator(abc.ABC):
    @abc.abstractmethod
    def generate(self, stage, prompt, chain, temperature):
        """Return the text of one child node."""


class FixtureGenerator(CandidateGenerator):
    """Deterministic stand-in for an LLM.

    Intermediate stages get short synthetic text derived from the inputs.
    Every computable-concept request (including repair requests) returns the
    next entry of ``candidates`` in a fenced block, starting at ``seed``.
    """

    def __init__(self, candidates=DEFAULT_FIXTURE_CANDIDATES, seed=0):
        if not candidates:
            raise ValueError("fixture generator needs at least one candidate")
        self.candidates = tuple(candidates)
        self.seed = seed
        self._counter = seed
        self._lock = threading.Lock()

    def generate(self, stage, prompt, chain, temperature):
        stage = Stage(stage)
        if stage is Stage.COMPUTABLE_CONCEPT:
            with self._lock:
                text = self.candidates[self._counter % len(self.candidates)]
                self._counter += 1
            return (
                "1. weight_magnitude(W) -> |W|\n"
                "2. activation_statistics(X) -> column norms\n"
                f"3. combine -> importance score\n\n```\n{text}\n```"
            )
        parent = chain[-1] if chain else ""
        return f"{stage.value} at T={temperature:.2f} following [{parent[:48]}]"


class HttpChatGenerator(CandidateGenerator):
    """Chat-completion client: POST ``{model, messages, temperature}`` to ``endpoint``.

    The API key is read from the environment variable ``api_key_env``.
    Transport errors, 429 and 5xx responses are retried with exponential
    backoff; at most ``max_in_flight`` requests run at once.
    """

    def __init__(
        self,
        endpoint,
        model,
        api_key_env="AUTOPRUNE_API_KEY",
        timeout=60.0,
        retries=3,
        backoff=1.0,
        max_in_flight=4,
        transport=None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def _headers(self):
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env) if self.api_key_env else None
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def request_body(self, prompt, temperature):
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": float(temperature),
        }

    def generate(self, stage, prompt, chain, temperature):
        body = self.request_body(prompt, temperature)
        last = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                with self._slots:
                    resp = self._client.post(self.endpoint, json=body, headers=self._headers())
            except httpx.TransportError as exc:
                last = exc
                logger.warning("LLM request failed (attempt %d): %s", attempt + 1, exc)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = GeneratorFailure(f"HTTP {resp.status_code}")
                logger.warning("LLM endpoint returned %d (attempt %d)", resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise GeneratorFailure(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise GeneratorFailure(f"malformed chat-completion response: {exc}") from exc
        raise GeneratorFailure(f"LLM endpoint unavailable after {self.retries + 1} attempts: {last}")

    def close(self):
        self._client.close()
