"""Text-generation clients used to write differential comparisons.

Two implementations share the ``generate_text(prompt) -> str`` contract: a
deterministic template mock and a client for OpenAI-style chat-completion
endpoints.
"""

from __future__ import annotations

import logging
import os
import re
import time
from typing import Protocol

import httpx

logger = logging.getLogger(__name__)

DEFAULT_CREDENTIAL_ENV = "HIERDX_API_KEY"


class GenerationError(RuntimeError):
    def __init__(self, message: str, retries: int = 0) -> None:
        super().__init__(f"{message} (after {retries} retries)")
        self.retries = retries


class TextGenerator(Protocol):
    def generate_text(self, prompt: str) -> str: ...


_FIELD = re.compile(r"^(Primary|Differential|Anchor) diagnosis:\s*(.+?)\s*$", re.MULTILINE)


class TemplateGenerator:
    """Deterministic stand-in: output is a pure function of the prompt.

    With no ``template`` the text names the diagnoses found in the prompt's
    ``Primary/Differential/Anchor diagnosis:`` lines. A custom template may use
    ``{primary}``, ``{differential}`` and ``{anchor}`` placeholders; a template
    without placeholders is returned verbatim.
    """

    DEFAULT = (
        "The observed features were weighed against both candidates. The findings typical of "
        "{other} are not the best fit here, whereas the presentation is most consistent with {anchor}."
    )

    def __init__(self, template: str | None = None) -> None:
        self.template = template

    def generate_text(self, prompt: str) -> str:
        fields = {k.lower(): v for k, v in _FIELD.findall(prompt)}
        fields.setdefault("primary", "the primary diagnosis")
        fields.setdefault("differential", "the differential diagnosis")
        fields.setdefault("anchor", fields["primary"])
        fields["other"] = fields["differential"] if fields["anchor"] == fields["primary"] else fields["primary"]
        if self.template is None:
            return self.DEFAULT.format(**fields)
        if "{" not in self.template:
            return self.template
        return self.template.format(**fields)


class ChatCompletionGenerator:
    """Client for a ``POST {base_url}/chat/completions`` endpoint.

    ``retries`` is the number of extra attempts after the first one; every
    failure mode (timeout, non-2xx status, malformed body) is retried.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        *,
        temperature: float = 0.7,
        timeout: float = 30.0,
        retries: int = 2,
        backoff: float = 0.5,
        credential_env: str = DEFAULT_CREDENTIAL_ENV,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        if retries < 0:
            raise ValueError("retries must be >= 0")
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.temperature = temperature
        self.retries = retries
        self.backoff = backoff
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(credential_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> ChatCompletionGenerator:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def generate_text(self, prompt: str) -> str:
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
        }
        last = "no attempt made"
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(f"{self.base_url}/chat/completions", json=payload)
            except httpx.TimeoutException as exc:
                last = f"timeout: {exc}"
            except httpx.HTTPError as exc:
                last = f"transport error: {exc}"
            else:
                if resp.is_success:
                    try:
                        content = resp.json()["choices"][0]["message"]["content"]
                    except (ValueError, KeyError, IndexError, TypeError):
                        last = "malformed response body"
                    else:
                        if isinstance(content, str):
                            return content.rstrip()
                        last = "malformed response body"
                else:
                    last = f"status {resp.status_code}"
            logger.warning("generation attempt %d failed: %s", attempt + 1, last)
        raise GenerationError(last, retries=self.retries)
