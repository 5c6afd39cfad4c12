"""Client for a chat-completions style multimodal endpoint, plus a scripted mock."""
from __future__ import annotations

import base64
import io
import json
import logging
import os
import re
import time
from dataclasses import dataclass
from typing import Callable

import httpx
import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

SCHEDULING = "scheduling"
GRAPH_EVOLUTION = "graph_evolution"
REFLECTION = "reflection"


class GatewayError(RuntimeError):
    pass


class GatewayUnavailable(GatewayError):
    """Transport failure or timeout after all retries."""


class ScriptExhausted(GatewayError):
    pass


class GatewayConfigError(ValueError):
    pass


class ParseError(ValueError):
    pass


class TransportFailure(GatewayError):
    """Injected or real transport error on a single attempt."""


@dataclass
class GatewayConfig:
    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-4o"
    api_key_env: str = "LMM_API_KEY"
    timeout: float = 30.0
    max_retries: int = 2
    mode: str = "mock"                      # "mock" or "live"
    script_path: str | None = None


@dataclass
class LmmExchange:
    variant: str
    request: dict
    response: str
    latency: float
    attempts: int

    def to_record(self) -> dict:
        req = dict(self.request)
        if req.get("image_b64"):
            req["image_b64"] = f"<{len(req['image_b64'])} chars>"
        return {"variant": self.variant, "request": req, "response": self.response,
                "latency": round(self.latency, 6), "attempts": self.attempts}


def _png_bytes(image) -> bytes:
    if image is None:
        return b""
    if hasattr(image, "to_png"):
        return image.to_png()
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def _request_payload(bundle) -> dict:
    png = _png_bytes(getattr(bundle, "image", None))
    return {
        "system": bundle.system_message,
        "user": bundle.task_message,
        "image_b64": base64.b64encode(png).decode("ascii") if png else "",
        "exemplars": [{"prompt": e.prompt, "response": e.response} for e in bundle.exemplars],
    }


class MockGateway:
    """Deterministic offline gateway.

    ``script`` is either a list of responses consumed in order, or a mapping
    ``variant -> list``. ``responder(bundle, variant, index)`` computes a
    response instead. ``failures`` injects that many transport errors before
    each successful call, which exercises the retry path.
    """

    def __init__(self, script=None, responder: Callable | None = None, max_retries: int = 2,
                 failures: int = 0):
        if script is None and responder is None:
            raise GatewayConfigError("mock gateway needs a script or a responder")
        self.script = script
        self.responder = responder
        self.max_retries = max_retries
        self.failures = failures
        self.calls = {}
        self.log = []

    @classmethod
    def from_file(cls, path, **kw) -> "MockGateway":
        with open(path) as fh:
            return cls(script=json.load(fh), **kw)

    def _next(self, bundle, variant: str) -> str:
        key = variant if isinstance(self.script, dict) else "*"
        index = self.calls.get(key, 0)
        self.calls[key] = index + 1
        if self.responder is not None:
            return self.responder(bundle, variant, index)
        seq = self.script.get(variant, []) if isinstance(self.script, dict) else self.script
        if index >= len(seq):
            raise ScriptExhausted(f"mock script for {variant!r} exhausted after {len(seq)} calls")
        return seq[index]

    def query(self, bundle, variant: str | None = None) -> LmmExchange:
        variant = variant or getattr(bundle, "variant", SCHEDULING)
        attempts = 0
        for _ in range(self.failures):
            attempts += 1
            if attempts > self.max_retries:
                raise GatewayUnavailable(f"mock transport failed {attempts} times")
        attempts += 1
        text = self._next(bundle, variant)
        ex = LmmExchange(variant, _request_payload(bundle), text, 0.0, attempts)
        self.log.append(ex)
        return ex


class LiveGateway:
    """HTTP JSON chat endpoint; the image is sent base64-embedded."""

    def __init__(self, config: GatewayConfig, client: httpx.Client | None = None):
        key = os.environ.get(config.api_key_env)
        if not key:
            raise GatewayConfigError(f"environment variable {config.api_key_env} is not set")
        self.config = config
        self._key = key
        self._client = client or httpx.Client(timeout=config.timeout)
        self.log = []

    def _messages(self, payload: dict) -> list:
        msgs = [{"role": "system", "content": payload["system"]}]
        for ex in payload["exemplars"]:
            msgs.append({"role": "user", "content": ex["prompt"]})
            msgs.append({"role": "assistant", "content": ex["response"]})
        content = [{"type": "text", "text": payload["user"]}]
        if payload["image_b64"]:
            content.append({"type": "image_url",
                            "image_url": {"url": "data:image/png;base64," + payload["image_b64"]}})
        msgs.append({"role": "user", "content": content})
        return msgs

    def query(self, bundle, variant: str | None = None) -> LmmExchange:
        variant = variant or getattr(bundle, "variant", SCHEDULING)
        payload = _request_payload(bundle)
        body = {"model": self.config.model, "messages": self._messages(payload)}
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        headers = {"Authorization": f"Bearer {self._key}"}
        t0 = time.perf_counter()
        last = None
        for attempt in range(1, self.config.max_retries + 2):
            try:
                resp = self._client.post(url, json=body, headers=headers, timeout=self.config.timeout)
                if resp.status_code >= 500:
                    raise TransportFailure(f"server error {resp.status_code}")
                resp.raise_for_status()
                text = resp.json()["choices"][0]["message"]["content"]
            except (httpx.TransportError, TransportFailure) as exc:
                last = exc
                log.warning("gateway attempt %d failed: %s", attempt, exc)
                continue
            except (httpx.HTTPStatusError, KeyError, IndexError, ValueError) as exc:
                raise GatewayError(f"bad response from endpoint: {exc}") from exc
            ex = LmmExchange(variant, payload, text, time.perf_counter() - t0, attempt)
            self.log.append(ex)
            return ex
        raise GatewayUnavailable(f"gateway unavailable after {self.config.max_retries + 1} attempts: {last}")


def make_gateway(config: GatewayConfig, responder: Callable | None = None):
    if config.mode == "live":
        return LiveGateway(config)
    if config.mode != "mock":
        raise GatewayConfigError(f"unknown gateway mode {config.mode!r}")
    if config.script_path:
        return MockGateway.from_file(config.script_path, responder=responder, max_retries=config.max_retries)
    return MockGateway(responder=responder, max_retries=config.max_retries)


# ---------------------------------------------------------------------------
# structured response parsing

_FENCE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


def _as_int(value) -> int:
    if isinstance(value, bool):
        raise ParseError(f"boolean {value!r} is not an id")
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str) and re.fullmatch(r"\s*[+-]?\d+\s*", value):
        return int(value)
    raise ParseError(f"{value!r} is not an integer id")


def _candidates(text: str):
    for m in _FENCE.finditer(text):
        yield m.group(1).strip()
    decoder = json.JSONDecoder()
    for i, ch in enumerate(text):
        if ch == "{":
            try:
                obj, _ = decoder.raw_decode(text, i)
            except json.JSONDecodeError:
                continue
            yield obj


def _shape(obj, schema: str):
    if schema == SCHEDULING:
        pairs = obj.get("assign") if isinstance(obj, dict) else None
        if not isinstance(pairs, list):
            raise ParseError("missing 'assign' list")
        draft = {}
        for pair in pairs:
            if not isinstance(pair, (list, tuple)) or len(pair) != 2:
                raise ParseError(f"assignment entry {pair!r} is not a [request, vehicle] pair")
            r, v = _as_int(pair[0]), _as_int(pair[1])
            if r in draft:
                raise ParseError(f"request {r} assigned twice")
            draft[r] = v
        return draft
    if schema == GRAPH_EVOLUTION:
        groups = obj.get("groups") if isinstance(obj, dict) else None
        if not isinstance(groups, list):
            raise ParseError("missing 'groups' list")
        out = []
        for g in groups:
            if not isinstance(g, (list, tuple)):
                raise ParseError(f"group {g!r} is not a list")
            out.append([_as_int(x) for x in g])
        return out
    raise ValueError(f"unknown schema {schema!r}")


def parse_structured(text: str, schema: str):
    """First well-formed JSON block in ``text`` matching ``schema``.

    Scheduling blocks look like ``{"assign": [[request, vehicle], ...]}`` and
    give ``{request: vehicle}``; graph-evolution blocks look like
    ``{"groups": [[id, ...], ...]}`` and give the list of groups.
    """
    if not isinstance(text, str):
        raise ParseError("response is not text")
    reasons = []
    for cand in _candidates(text):
        obj = cand
        if isinstance(cand, str):
            try:
                obj = json.loads(cand)
            except json.JSONDecodeError as exc:
                reasons.append(f"fenced block is not JSON: {exc.msg}")
                continue
        try:
            return _shape(obj, schema)
        except ParseError as exc:
            reasons.append(str(exc))
    raise ParseError("no structured block found" + (f" ({'; '.join(reasons)})" if reasons else ""))
