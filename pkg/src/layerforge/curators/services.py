"""Tool-service contracts and the JSON-over-HTTP client that speaks them.

Every call is ``POST <service_url>/<operation>`` with a JSON body carrying
``request_id`` and ``seed`` next to the operation's arguments. Images travel
as base64 PNG. Replies are ``{"status": "ok", "payload": {...}}`` or
``{"status": "error", "error": {"code": ..., "message": ...}}``.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence
from urllib.parse import urlparse

import numpy as np
import requests

from ..core import LayeredSample
from ..dataset import decode_gray8, decode_rgb8, decode_shadow16, encode_gray8, encode_rgb8, encode_shadow16

logger = logging.getLogger(__name__)


class AgentService(Protocol):
    def detect_foreground(self, image: np.ndarray) -> dict: ...

    def removal_instruction(self, image: np.ndarray, description: str) -> str: ...

    def background_removal_instruction(self, image: np.ndarray, description: str) -> str: ...


class EditorService(Protocol):
    def apply(self, image: np.ndarray, instruction: str) -> np.ndarray: ...


class SegmenterService(Protocol):
    def segment(self, image: np.ndarray) -> np.ndarray: ...


class VerifierService(Protocol):
    def verify(self, rendered: np.ndarray, sample: LayeredSample) -> dict: ...


class ServiceError(Exception):
    """A service call that failed for good, after any retries."""

    def __init__(self, service: str, operation: str, message: str, attempts: int = 1, request_id: str = "", code: str = "error"):
        super().__init__(f"{service}.{operation} failed after {attempts} attempt(s): {message}")
        self.service = service
        self.operation = operation
        self.message = message
        self.attempts = attempts
        self.request_id = request_id
        self.code = code

    def to_dict(self) -> dict:
        return {
            "service": self.service,
            "operation": self.operation,
            "code": self.code,
            "message": self.message,
            "attempts": self.attempts,
            "request_id": self.request_id,
        }


# -- wire codecs ------------------------------------------------------------------

def b64_image(image: np.ndarray) -> str:
    return base64.b64encode(encode_rgb8(image)).decode("ascii")


def b64_mask(mask: np.ndarray) -> str:
    return base64.b64encode(encode_gray8(mask)).decode("ascii")


def b64_shadow(shadow: np.ndarray) -> str:
    return base64.b64encode(encode_shadow16(shadow)).decode("ascii")


def unb64_image(s: str) -> np.ndarray:
    return decode_rgb8(base64.b64decode(s))


def unb64_mask(s: str) -> np.ndarray:
    return decode_gray8(base64.b64decode(s))


def unb64_shadow(s: str) -> np.ndarray:
    return decode_shadow16(base64.b64decode(s))


def sample_to_wire(sample: LayeredSample) -> dict:
    return {
        "source": b64_image(sample.source),
        "background": b64_image(sample.background),
        "layers": [{"rgb": b64_image(l.rgb), "alpha": b64_mask(l.alpha), "order_index": l.order_index} for l in sample.layers],
        "shadow": None if sample.shadow is None else b64_shadow(sample.shadow),
    }


def sample_from_wire(d: dict) -> LayeredSample:
    from ..core import ForegroundLayer

    return LayeredSample(
        source=unb64_image(d["source"]),
        background=unb64_image(d["background"]),
        layers=[ForegroundLayer(unb64_image(l["rgb"]), unb64_mask(l["alpha"]), int(l["order_index"])) for l in d["layers"]],
        shadow=None if d.get("shadow") is None else unb64_shadow(d["shadow"]),
    )


def request_id_for(service: str, operation: str, body: dict, seed: int) -> str:
    """Content-addressed id: identical requests (including retries) share it."""
    h = hashlib.sha256()
    h.update(f"{service}/{operation}/{seed}/".encode())
    h.update(json.dumps(body, sort_keys=True).encode())
    return h.hexdigest()[:24]


# -- endpoints and client -----------------------------------------------------------

@dataclass
class ToolEndpoints:
    agent_url: str
    editor_url: str
    segmenter_urls: list
    embedder_url: str
    verifier_url: str
    timeout: float = 30.0
    retries: int = 2
    backoff: float = 0.5

    def __post_init__(self):
        if not self.segmenter_urls:
            raise ValueError("at least one segmenter URL is required")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        for url in [self.agent_url, self.editor_url, self.embedder_url, self.verifier_url, *self.segmenter_urls]:
            check_url(url)

    def to_dict(self) -> dict:
        return {
            "agent_url": self.agent_url,
            "editor_url": self.editor_url,
            "segmenter_urls": list(self.segmenter_urls),
            "embedder_url": self.embedder_url,
            "verifier_url": self.verifier_url,
            "timeout": self.timeout,
            "retries": self.retries,
            "backoff": self.backoff,
        }


def check_url(url: str) -> str:
    parsed = urlparse(url or "")
    if parsed.scheme not in ("http", "https") or not parsed.hostname:
        raise ValueError(f"invalid service URL {url!r}")
    try:
        parsed.port
    except ValueError as exc:
        raise ValueError(f"invalid service URL {url!r}: {exc}") from exc
    return url


RETRYABLE_STATUS = {408, 429, 500, 502, 503, 504}


class ServiceClient:
    """Blocking JSON client with exponential backoff.

    ``retries`` extra attempts follow the first, spaced ``backoff * 2**n``
    seconds apart. Retries reuse the request id so servers can dedupe.
    """

    service = "service"

    def __init__(self, url: str, timeout: float = 30.0, retries: int = 2, backoff: float = 0.5, seed: int = 0, session=None):
        self.url = check_url(url).rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.seed = seed
        self.session = session or requests.Session()

    @property
    def service_id(self) -> str:
        return f"{self.service}@{self.url}"

    def with_seed(self, seed: int):
        return type(self)(self.url, self.timeout, self.retries, self.backoff, seed, self.session)

    def call(self, operation: str, **args) -> dict:
        rid = request_id_for(self.service, operation, args, self.seed)
        body = {"request_id": rid, "seed": self.seed, **args}
        attempts = self.retries + 1
        last = "no attempt made"
        code = "error"
        for n in range(attempts):
            if n:
                time.sleep(self.backoff * 2 ** (n - 1))
            try:
                resp = self.session.post(f"{self.url}/{operation}", json=body, timeout=self.timeout)
            except requests.RequestException as exc:
                last, code = f"{type(exc).__name__}: {exc}", "transport"
                logger.info("%s.%s attempt %d/%d: %s", self.service, operation, n + 1, attempts, last)
                continue
            if resp.status_code in RETRYABLE_STATUS:
                last, code = f"HTTP {resp.status_code}", f"http_{resp.status_code}"
                logger.info("%s.%s attempt %d/%d: %s", self.service, operation, n + 1, attempts, last)
                continue
            try:
                reply = resp.json()
            except ValueError:
                raise ServiceError(self.service, operation, f"HTTP {resp.status_code}: non-JSON reply", n + 1, rid, "protocol")
            if reply.get("status") == "ok" and isinstance(reply.get("payload"), dict):
                return reply["payload"]
            err = reply.get("error") or {}
            raise ServiceError(
                self.service, operation, str(err.get("message", f"HTTP {resp.status_code}")), n + 1, rid, str(err.get("code", "error"))
            )
        raise ServiceError(self.service, operation, last, attempts, rid, code)


class HttpAgent(ServiceClient):
    service = "agent"

    def detect_foreground(self, image):
        p = self.call("detect_foreground", image=b64_image(image))
        return {"present": bool(p["present"]), "description": str(p.get("description", ""))}

    def removal_instruction(self, image, description):
        return str(self.call("removal_instruction", image=b64_image(image), description=description)["instruction"])

    def background_removal_instruction(self, image, description):
        p = self.call("background_removal_instruction", image=b64_image(image), description=description)
        return str(p["instruction"])


class HttpEditor(ServiceClient):
    service = "editor"

    def apply(self, image, instruction):
        out = unb64_image(self.call("apply", image=b64_image(image), instruction=instruction)["image"])
        if out.shape != np.shape(image):
            raise ServiceError(self.service, "apply", f"editor changed image size to {out.shape[:2]}", 1, code="protocol")
        return out


class HttpSegmenter(ServiceClient):
    service = "segmenter"

    def segment(self, image):
        return unb64_mask(self.call("segment", image=b64_image(image))["mask"])


class HttpEmbedder(ServiceClient):
    service = "embedder"

    def __call__(self, image):
        return np.asarray(self.call("embed", image=b64_image(image))["embedding"], dtype=np.float64)


class HttpVerifier(ServiceClient):
    service = "verifier"

    def verify(self, rendered, sample):
        p = self.call("verify", rendered=b64_image(rendered), sample=sample_to_wire(sample))
        return {"accept": bool(p["accept"]), "reasons": [str(r) for r in p.get("reasons", [])]}


@dataclass
class ServiceBundle:
    """The full set of tools one image job talks to."""

    agent: AgentService
    editor: EditorService
    segmenters: Sequence[SegmenterService]
    embedder: object
    verifier: VerifierService
    ids: dict = field(default_factory=dict)

    def for_seed(self, seed: int) -> "ServiceBundle":
        def rebind(s):
            return s.with_seed(seed) if hasattr(s, "with_seed") else s

        return ServiceBundle(
            rebind(self.agent),
            rebind(self.editor),
            [rebind(s) for s in self.segmenters],
            rebind(self.embedder),
            rebind(self.verifier),
            dict(self.ids),
        )


def http_services(endpoints: ToolEndpoints, seed: int = 0) -> ServiceBundle:
    kw = dict(timeout=endpoints.timeout, retries=endpoints.retries, backoff=endpoints.backoff, seed=seed)
    agent = HttpAgent(endpoints.agent_url, **kw)
    editor = HttpEditor(endpoints.editor_url, **kw)
    segs = [HttpSegmenter(u, **kw) for u in endpoints.segmenter_urls]
    embedder = HttpEmbedder(endpoints.embedder_url, **kw)
    verifier = HttpVerifier(endpoints.verifier_url, **kw)
    ids = {
        "agent": agent.service_id,
        "editor": editor.service_id,
        "segmenters": [s.service_id for s in segs],
        "embedder": embedder.service_id,
        "verifier": verifier.service_id,
    }
    return ServiceBundle(agent, editor, segs, embedder, verifier, ids)
