"""The escalation target: a simulated expert and a remote HTTP client.

The wire protocol is a single POST endpoint:

    POST {endpoint}/v1/expert/predict
    request  {"stream_id": str, "timestamp": int, "text": [str],
              "frame": {"kind": "b64"|"uri", "value": str} | null,
              "labels": [str]}
    response {"label": str, "confidence": float, "model_id": str}

Servers are untrusted: the client validates every response (label must be
one of the requested labels, confidence in [0.5, 1.0]) and converts every
failure mode into a typed ExpertError so the router can fall back instead
of crashing the stream. Env vars EXPERT_ENDPOINT and EXPERT_TIMEOUT_MS
supply defaults.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import requests

from .encoder import ConfidenceModel, SyntheticOracleScorer

DEFAULT_TIMEOUT_MS = 2000.0


class ExpertError(Exception):
    """Base for every failure of an expert backend."""


class ExpertTimeoutError(ExpertError):
    pass


class ExpertConnectionError(ExpertError):
    pass


class ExpertProtocolError(ExpertError):
    """The server answered, but not with a valid response."""


@dataclass(frozen=True)
class ExpertRequest:
    """Everything the expert gets to see for one escalated timestamp."""

    stream_id: str
    timestamp: int
    text: tuple[str, ...]
    labels: tuple[str, ...]
    frame: tuple[str, str] | None = None  # (kind, value)
    prior_decisions: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.timestamp < 0:
            raise ValueError(f"timestamp must be >= 0, got {self.timestamp}")
        if not self.labels:
            raise ValueError("label space must be non-empty")
        if self.frame is not None and self.frame[0] not in ("b64", "uri"):
            raise ValueError(f"frame kind must be b64 or uri, got {self.frame[0]!r}")

    def to_json(self) -> dict:
        return {
            "stream_id": self.stream_id,
            "timestamp": self.timestamp,
            "text": list(self.text),
            "frame": (
                {"kind": self.frame[0], "value": self.frame[1]}
                if self.frame is not None
                else None
            ),
            "labels": list(self.labels),
        }

    @staticmethod
    def from_json(obj: dict) -> "ExpertRequest":
        frame = obj.get("frame")
        return ExpertRequest(
            stream_id=str(obj["stream_id"]),
            timestamp=int(obj["timestamp"]),
            text=tuple(obj.get("text", [])),
            labels=tuple(obj["labels"]),
            frame=(frame["kind"], frame["value"]) if frame else None,
        )


@dataclass(frozen=True)
class ExpertOutput:
    """Validated expert answer plus latency bookkeeping."""

    label: int
    confidence: float
    latency_ms: float
    model_id: str
    class_probs: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if not 0.5 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0.5, 1.0]")
        if self.class_probs is None:
            object.__setattr__(self, "class_probs", np.array([]))


def validate_response(obj: dict, labels: tuple[str, ...], latency_ms: float) -> ExpertOutput:
    """Turn a raw response dict into an ExpertOutput or raise ExpertProtocolError."""
    if not isinstance(obj, dict):
        raise ExpertProtocolError(f"response must be an object, got {type(obj).__name__}")
    for key in ("label", "confidence", "model_id"):
        if key not in obj:
            raise ExpertProtocolError(f"response missing key {key!r}")
    label_name = obj["label"]
    if label_name not in labels:
        raise ExpertProtocolError(
            f"label {label_name!r} not in requested label space {list(labels)}"
        )
    try:
        confidence = float(obj["confidence"])
    except (TypeError, ValueError):
        raise ExpertProtocolError(f"confidence {obj['confidence']!r} is not a number") from None
    if not 0.5 <= confidence <= 1.0:
        raise ExpertProtocolError(f"confidence {confidence} outside [0.5, 1.0]")
    return ExpertOutput(
        label=labels.index(label_name),
        confidence=confidence,
        latency_ms=latency_ms,
        model_id=str(obj["model_id"]),
    )


class LocalOracleExpert:
    """Simulated high-quality expert (deterministic per seed/stream/t)."""

    def __init__(
        self,
        labels,
        flip_prob: float,
        confidence_model: ConfidenceModel,
        fixed_latency_ms: float = 800.0,
        seed: int = 0,
        n_classes: int = 2,
        model_id: str = "local-oracle",
    ):
        if fixed_latency_ms < 0:
            raise ValueError(f"fixed_latency_ms must be >= 0, got {fixed_latency_ms}")
        if isinstance(labels, dict):
            label_map = labels
        else:
            label_map = {"stream": np.asarray(labels)}
        self._oracle = SyntheticOracleScorer(
            label_map, flip_prob, confidence_model, seed, n_classes
        )
        self.fixed_latency_ms = fixed_latency_ms
        self.model_id = model_id

    def predict(self, request: ExpertRequest) -> ExpertOutput:
        out = self._oracle.score_at(request.stream_id, request.timestamp)
        return ExpertOutput(
            label=out.label,
            confidence=out.confidence,
            latency_ms=self.fixed_latency_ms,
            model_id=self.model_id,
            class_probs=out.class_probs,
        )


def make_local_oracle(
    labels,
    flip_prob: float,
    confidence_model: ConfidenceModel,
    fixed_latency_ms: float = 800.0,
    seed: int = 0,
    n_classes: int = 2,
) -> LocalOracleExpert:
    return LocalOracleExpert(
        labels, flip_prob, confidence_model, fixed_latency_ms, seed, n_classes
    )


class HttpExpert:
    """Client for a remote expert speaking the JSON protocol above."""

    def __init__(self, endpoint: str | None = None, timeout_ms: float | None = None):
        endpoint = endpoint or os.environ.get("EXPERT_ENDPOINT")
        if not endpoint:
            raise ValueError("no endpoint given and EXPERT_ENDPOINT is not set")
        if timeout_ms is None:
            timeout_ms = float(os.environ.get("EXPERT_TIMEOUT_MS", DEFAULT_TIMEOUT_MS))
        if timeout_ms <= 0:
            raise ValueError(f"timeout_ms must be > 0, got {timeout_ms}")
        self.endpoint = endpoint.rstrip("/")
        self.timeout_ms = timeout_ms
        self.model_id = f"remote:{self.endpoint}"

    @property
    def url(self) -> str:
        return f"{self.endpoint}/v1/expert/predict"

    def predict(self, request: ExpertRequest) -> ExpertOutput:
        start = time.monotonic()
        try:
            resp = requests.post(
                self.url, json=request.to_json(), timeout=self.timeout_ms / 1000.0
            )
        except requests.Timeout as exc:
            raise ExpertTimeoutError(
                f"expert at {self.url} exceeded {self.timeout_ms:.0f} ms"
            ) from exc
        except requests.ConnectionError as exc:
            raise ExpertConnectionError(f"cannot reach expert at {self.url}: {exc}") from exc
        latency_ms = (time.monotonic() - start) * 1000.0
        if resp.status_code != 200:
            raise ExpertProtocolError(
                f"expert at {self.url} returned HTTP {resp.status_code}"
            )
        try:
            obj = resp.json()
        except ValueError as exc:
            raise ExpertProtocolError(f"expert response is not JSON: {exc}") from exc
        return validate_response(obj, request.labels, latency_ms)


# ---------------------------------------------------------------------------
# Stub server (tests and the serve-stub-expert CLI command)
# ---------------------------------------------------------------------------


@dataclass
class StubBehavior:
    """What the stub answers with; oracle fields override the canned ones."""

    label: str = ""
    confidence: float = 0.9
    model_id: str = "stub-expert"
    delay_s: float = 0.0
    oracle: LocalOracleExpert | None = None
    raw_response: dict | None = None  # verbatim override, for protocol tests


class _StubHandler(BaseHTTPRequestHandler):
    behavior: StubBehavior

    def log_message(self, *args) -> None:  # quiet
        pass

    def do_POST(self) -> None:
        if self.path != "/v1/expert/predict":
            self.send_error(404)
            return
        length = int(self.headers.get("Content-Length", 0))
        try:
            request = ExpertRequest.from_json(json.loads(self.rfile.read(length)))
        except (ValueError, KeyError) as exc:
            self.send_error(400, str(exc))
            return
        b = self.behavior
        if b.delay_s > 0:
            time.sleep(b.delay_s)
        if b.raw_response is not None:
            payload = b.raw_response
        elif b.oracle is not None:
            out = b.oracle.predict(request)
            payload = {
                "label": request.labels[out.label],
                "confidence": out.confidence,
                "model_id": b.model_id,
            }
        else:
            payload = {
                "label": b.label or request.labels[0],
                "confidence": b.confidence,
                "model_id": b.model_id,
            }
        body = json.dumps(payload).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


class StubExpertServer:
    """In-process test server; use as a context manager or via serve()."""

    def __init__(self, behavior: StubBehavior, host: str = "127.0.0.1", port: int = 0):
        handler = type("Handler", (_StubHandler,), {"behavior": behavior})
        self._server = ThreadingHTTPServer((host, port), handler)
        self._thread: threading.Thread | None = None

    @property
    def endpoint(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self) -> "StubExpertServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def serve_forever(self) -> None:
        self._server.serve_forever()
