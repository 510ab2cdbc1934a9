import json
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from streamroute.encoder import ConfidenceModel
from streamroute.expert import (
    ExpertConnectionError,
    ExpertOutput,
    ExpertProtocolError,
    ExpertRequest,
    ExpertTimeoutError,
    HttpExpert,
    LocalOracleExpert,
    StubBehavior,
    StubExpertServer,
    make_local_oracle,
    validate_response,
)

LABELS = ("neg", "pos")


def request_at(t: int, stream="s0") -> ExpertRequest:
    return ExpertRequest(stream_id=stream, timestamp=t, text=("hello",), labels=LABELS)


class TestRequestType:
    def test_json_round_trip_identity(self):
        req = ExpertRequest(
            stream_id="vid", timestamp=12, text=("a", "b"), labels=LABELS,
            frame=("uri", "frames/12.jpg"),
        )
        back = ExpertRequest.from_json(json.loads(json.dumps(req.to_json())))
        assert back == req

    def test_null_frame_round_trip(self):
        req = request_at(0)
        assert ExpertRequest.from_json(req.to_json()) == req

    def test_validation(self):
        with pytest.raises(ValueError):
            ExpertRequest(stream_id="s", timestamp=-1, text=(), labels=LABELS)
        with pytest.raises(ValueError):
            ExpertRequest(stream_id="s", timestamp=0, text=(), labels=())
        with pytest.raises(ValueError):
            ExpertRequest(
                stream_id="s", timestamp=0, text=(), labels=LABELS,
                frame=("gif", "x"),
            )


class TestLocalOracle:
    def test_flip_zero_returns_truth(self):
        labels = np.array([0, 1, 0, 1])
        oracle = make_local_oracle(labels, 0.0, ConfidenceModel.constant(0.9))
        for t, y in enumerate(labels):
            assert oracle.predict(ExpertRequest("stream", t, (), LABELS)).label == y

    def test_empirical_error_rate(self):
        n = 10_000
        oracle = make_local_oracle(
            np.zeros(n, dtype=int), 0.05, ConfidenceModel.calibrated(), seed=11
        )
        errs = sum(
            oracle.predict(ExpertRequest("stream", t, (), LABELS)).label != 0
            for t in range(n)
        )
        assert abs(errs / n - 0.05) < 0.01

    def test_fixed_latency_reported(self):
        oracle = make_local_oracle(
            np.zeros(10, dtype=int), 0.0, ConfidenceModel.calibrated(),
            fixed_latency_ms=800.0,
        )
        for t in range(10):
            assert oracle.predict(ExpertRequest("stream", t, (), LABELS)).latency_ms == 800.0

    def test_calibrated_confidence(self):
        oracle = make_local_oracle(
            np.zeros(5, dtype=int), 0.2, ConfidenceModel.calibrated()
        )
        assert oracle.predict(ExpertRequest("stream", 0, (), LABELS)).confidence == pytest.approx(0.8)

    def test_concurrent_calls_match_serial(self):
        labels = {"a": np.zeros(200, dtype=int), "b": np.ones(200, dtype=int)}
        oracle = LocalOracleExpert(labels, 0.3, ConfidenceModel.uniform(0.6, 0.95), seed=5)
        requests = [
            ExpertRequest(s, t, (), LABELS) for s in ("a", "b") for t in range(200)
        ]
        serial = [(oracle.predict(r).label, oracle.predict(r).confidence) for r in requests]
        with ThreadPoolExecutor(max_workers=8) as pool:
            parallel = list(pool.map(lambda r: (oracle.predict(r).label, oracle.predict(r).confidence), requests))
        assert serial == parallel


class TestResponseValidation:
    def test_valid(self):
        out = validate_response(
            {"label": "pos", "confidence": 0.8, "model_id": "m"}, LABELS, 12.0
        )
        assert out.label == 1 and out.confidence == 0.8 and out.latency_ms == 12.0

    def test_missing_key(self):
        with pytest.raises(ExpertProtocolError, match="model_id"):
            validate_response({"label": "pos", "confidence": 0.8}, LABELS, 0.0)

    def test_unknown_label(self):
        with pytest.raises(ExpertProtocolError, match="'maybe'"):
            validate_response(
                {"label": "maybe", "confidence": 0.8, "model_id": "m"}, LABELS, 0.0
            )

    def test_out_of_range_confidence(self):
        for bad in (0.3, 1.2, -1.0):
            with pytest.raises(ExpertProtocolError, match="outside"):
                validate_response(
                    {"label": "pos", "confidence": bad, "model_id": "m"}, LABELS, 0.0
                )

    def test_expert_output_range_enforced(self):
        with pytest.raises(ValueError):
            ExpertOutput(label=0, confidence=0.2, latency_ms=1.0, model_id="m")


class TestHttpExpert:
    def test_round_trip_against_stub(self):
        with StubExpertServer(StubBehavior(label="pos", confidence=0.87)) as server:
            client = HttpExpert(endpoint=server.endpoint)
            out = client.predict(request_at(3))
            assert out.label == 1
            assert out.confidence == 0.87
            assert out.model_id == "stub-expert"
            assert out.latency_ms >= 0.0

    def test_oracle_backed_stub(self):
        oracle = make_local_oracle(
            {"s0": np.array([1, 0, 1])}, 0.0, ConfidenceModel.constant(0.9)
        )
        with StubExpertServer(StubBehavior(oracle=oracle)) as server:
            client = HttpExpert(endpoint=server.endpoint)
            assert client.predict(request_at(0)).label == 1
            assert client.predict(request_at(1)).label == 0

    def test_invalid_confidence_rejected(self):
        behavior = StubBehavior(
            raw_response={"label": "pos", "confidence": 0.3, "model_id": "m"}
        )
        with StubExpertServer(behavior) as server:
            client = HttpExpert(endpoint=server.endpoint)
            with pytest.raises(ExpertProtocolError, match="0.3"):
                client.predict(request_at(0))

    def test_unknown_label_rejected(self):
        behavior = StubBehavior(
            raw_response={"label": "teapot", "confidence": 0.9, "model_id": "m"}
        )
        with StubExpertServer(behavior) as server:
            client = HttpExpert(endpoint=server.endpoint)
            with pytest.raises(ExpertProtocolError, match="teapot"):
                client.predict(request_at(0))

    def test_timeout_is_typed_and_prompt(self):
        with StubExpertServer(StubBehavior(label="pos", delay_s=3.0)) as server:
            client = HttpExpert(endpoint=server.endpoint, timeout_ms=500)
            start = time.monotonic()
            with pytest.raises(ExpertTimeoutError):
                client.predict(request_at(0))
            elapsed = time.monotonic() - start
            assert abs(elapsed - 0.5) < 0.1

    def test_connection_error_typed(self):
        client = HttpExpert(endpoint="http://127.0.0.1:9", timeout_ms=500)
        with pytest.raises(ExpertConnectionError):
            client.predict(request_at(0))

    def test_env_configuration(self, monkeypatch):
        with StubExpertServer(StubBehavior(label="neg", confidence=0.75)) as server:
            monkeypatch.setenv("EXPERT_ENDPOINT", server.endpoint)
            monkeypatch.setenv("EXPERT_TIMEOUT_MS", "1500")
            client = HttpExpert()
            assert client.endpoint == server.endpoint
            assert client.timeout_ms == 1500.0
            assert client.predict(request_at(1)).label == 0

    def test_no_endpoint_anywhere(self, monkeypatch):
        monkeypatch.delenv("EXPERT_ENDPOINT", raising=False)
        with pytest.raises(ValueError, match="EXPERT_ENDPOINT"):
            HttpExpert()

    def test_http_error_status_is_protocol_error(self):
        behavior = StubBehavior(label="pos")
        with StubExpertServer(behavior) as server:
            client = HttpExpert(endpoint=server.endpoint)
            bad = ExpertRequest(stream_id="s", timestamp=0, text=(), labels=LABELS)
            object.__setattr__(bad, "labels", ())  # force a 400 from the stub
            with pytest.raises((ExpertProtocolError, ExpertConnectionError)):
                client.predict(bad)
