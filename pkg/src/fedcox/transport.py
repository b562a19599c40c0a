"""Polling message-queue transport between the coordinator and local nodes.

Envelopes are JSON objects with six message kinds; every float in a payload
travels as a hex-float string so round trips are bit-exact.  Two channels
are provided: an in-process log (exactly-once per consumer) and a
file-backed directory protocol (at-least-once, deduplicated on fetch).
Producers append, consumers keep independent cursors, so coordinator
requests fan out to every node.
"""

from __future__ import annotations

import json
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from fedcox.errors import TransportError, TransportTimeout

__all__ = [
    "Message",
    "KINDS",
    "SCHEMAS",
    "SCHEMA_VERSION",
    "encode_payload",
    "decode_payload",
    "validate_message",
    "InProcessChannel",
    "FileChannel",
    "await_all",
    "PrivacyAuditor",
    "validate_privacy",
]

SCHEMA_VERSION = 1

KINDS = (
    "PrepareRequest",
    "EvaluateRequest",
    "EvaluateResponse",
    "PerformanceRequest",
    "PerformanceResponse",
    "ErrorReport",
)

_HEXFLOAT = re.compile(r"^[+-]?0x[01](\.[0-9a-f]+)?p[+-]?\d+$")
_SPECIALS = {"inf": math.inf, "-inf": -math.inf, "nan": math.nan}


def _encode(value):
    if isinstance(value, (bool, int, str)) or value is None:
        return value
    if isinstance(value, float) or isinstance(value, np.floating):
        return float(value).hex()
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.ndarray):
        return [_encode(v) for v in value.tolist()]
    if isinstance(value, (list, tuple)):
        return [_encode(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _encode(v) for k, v in value.items()}
    raise TransportError(f"cannot serialise payload value of type {type(value).__name__}")


def _decode(value):
    if isinstance(value, str):
        if _HEXFLOAT.match(value):
            return float.fromhex(value)
        if value in _SPECIALS:
            return _SPECIALS[value]
        return value
    if isinstance(value, list):
        return [_decode(v) for v in value]
    if isinstance(value, dict):
        return {k: _decode(v) for k, v in value.items()}
    return value


def encode_payload(payload: dict) -> dict:
    """JSON-safe deep copy with all floats as hex-float strings."""
    return _encode(payload)


def decode_payload(payload: dict) -> dict:
    """Inverse of :func:`encode_payload` (hex-float strings become floats)."""
    return _decode(payload)


@dataclass(frozen=True)
class Message:
    """Typed envelope; ``payload`` is already wire-encoded (JSON-safe)."""

    kind: str
    sender: str
    round: int
    payload: dict
    schema_version: int = SCHEMA_VERSION
    seq: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": self.kind,
                "sender": self.sender,
                "round": self.round,
                "schema_version": self.schema_version,
                "seq": self.seq,
                "payload": self.payload,
            }
        )

    @staticmethod
    def from_json(text: str) -> "Message":
        obj = json.loads(text)
        return Message(
            kind=obj["kind"],
            sender=obj["sender"],
            round=obj["round"],
            payload=obj["payload"],
            schema_version=obj.get("schema_version", SCHEMA_VERSION),
            seq=obj.get("seq", 0),
        )

    def decoded(self) -> dict:
        return decode_payload(self.payload)


# --- wire schemas -----------------------------------------------------------
# Shipped as documentation of the protocol and used by the thorough
# validator below; routine pushes run the fast structural checks instead.

_HEX = {"type": "string"}
_HEX_ARRAY = {"type": "array", "items": _HEX}
_HEX_MATRIX = {"type": "array", "items": _HEX_ARRAY}
_CURVE = {
    "type": "object",
    "required": ["knots", "values", "lower", "upper", "coverage"],
    "additionalProperties": False,
    "properties": {
        "knots": _HEX_ARRAY,
        "values": _HEX_ARRAY,
        "lower": _HEX_ARRAY,
        "upper": _HEX_ARRAY,
        "coverage": {"type": "array", "items": {"type": "integer"}},
    },
}
_STATS = {
    "type": "object",
    "required": ["median", "lower", "upper"],
    "properties": {"median": _HEX, "lower": _HEX, "upper": _HEX},
}

SCHEMAS = {
    "PrepareRequest": {
        "type": "object",
        "required": ["phase", "n_boot", "global_seed", "features", "level_sets"],
        "properties": {
            "phase": {"type": "integer", "minimum": 0},
            "n_boot": {"type": "integer", "minimum": 1},
            "global_seed": {"type": "integer"},
            "n_allowed_missing": {"type": ["integer", "null"], "minimum": 0},
            "features": {"type": "array", "items": {"type": "string"}},
            "level_sets": {
                "type": "array",
                "items": {"type": "array", "items": {"type": "string"}},
            },
            "resample": {"type": "boolean"},
            "impute": {"type": "boolean"},
        },
    },
    "EvaluateRequest": {
        "type": "object",
        "required": ["models", "requests", "want_cv"],
        "properties": {
            "models": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["model_id", "columns"],
                    "properties": {
                        "model_id": {"type": "string"},
                        "columns": {"type": "array", "items": {"type": "string"}},
                    },
                },
            },
            "requests": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["model_id", "bootstrap", "beta"],
                    "properties": {
                        "model_id": {"type": "string"},
                        "bootstrap": {"type": "integer", "minimum": 0},
                        "beta": _HEX_ARRAY,
                    },
                },
            },
            "want_cv": {"type": "boolean"},
        },
    },
    "EvaluateResponse": {
        "type": "object",
        "required": ["n_local", "results"],
        "properties": {
            "n_local": {"type": "integer", "minimum": 0},
            "results": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["model_id", "bootstrap", "ok"],
                    "additionalProperties": False,
                    "properties": {
                        "model_id": {"type": "string"},
                        "bootstrap": {"type": "integer", "minimum": 0},
                        "ok": {"type": "boolean"},
                        "error": {"type": ["string", "null"]},
                        "loglik": _HEX,
                        "gradient": _HEX_ARRAY,
                        "hessian": _HEX_MATRIX,
                        "cv_loglik": {"type": ["string", "null"]},
                        "n_oob": {"type": "integer", "minimum": 0},
                    },
                },
            },
        },
    },
    "PerformanceRequest": {
        "type": "object",
        "required": ["columns", "beta_median", "betas", "cal_time_points",
                     "n_cal_groups", "alpha"],
        "properties": {
            "columns": {"type": "array", "items": {"type": "string"}},
            "beta_median": _HEX_ARRAY,
            "betas": _HEX_MATRIX,
            "pi_thresholds": {"type": ["array", "null"], "items": _HEX},
            "pi_quantiles": {"type": ["array", "null"], "items": _HEX},
            "cal_time_points": _HEX_ARRAY,
            "n_cal_groups": {"type": "integer", "minimum": 1},
            "alpha": _HEX,
        },
    },
    "PerformanceResponse": {
        "type": "object",
        "required": ["baseline", "baseline_beta_variant", "lp_cdf", "c_harrell",
                     "subgroups", "calibration", "warnings"],
        "additionalProperties": False,
        "properties": {
            "baseline": _CURVE,
            "baseline_beta_variant": _CURVE,
            "lp_cdf": _CURVE,
            "c_harrell": {
                "type": "object",
                "required": ["inbag", "oob"],
                "properties": {"inbag": _STATS, "oob": _STATS},
            },
            "subgroups": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["label", "km", "cox_values", "empty"],
                    "properties": {
                        "label": {"type": "string"},
                        "km": _CURVE,
                        "cox_values": _HEX_ARRAY,
                        "empty": {"type": "boolean"},
                    },
                },
            },
            "calibration": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["time", "groups", "flagged"],
                    "properties": {
                        "time": _HEX,
                        "flagged": {"type": "boolean"},
                        "groups": {
                            "type": "array",
                            "items": {
                                "type": "object",
                                "required": ["predicted", "observed", "lower",
                                             "upper", "count"],
                                "properties": {
                                    "predicted": _HEX,
                                    "observed": _HEX,
                                    "lower": _HEX,
                                    "upper": _HEX,
                                    "count": {"type": "integer", "minimum": 0},
                                },
                            },
                        },
                    },
                },
            },
            "warnings": {"type": "array", "items": {"type": "string"}},
        },
    },
    "ErrorReport": {
        "type": "object",
        "required": ["context", "error"],
        "properties": {
            "context": {"type": "string"},
            "error": {"type": "string"},
            "model_id": {"type": ["string", "null"]},
        },
    },
}


def validate_message(msg: Message):
    """Full schema validation (envelope and payload).  Raises TransportError."""
    import jsonschema

    if msg.kind not in KINDS:
        raise TransportError(f"unknown message kind {msg.kind!r}")
    if not isinstance(msg.round, int) or msg.round < 0:
        raise TransportError("round must be a nonnegative integer")
    try:
        jsonschema.validate(msg.payload, SCHEMAS[msg.kind])
    except jsonschema.ValidationError as exc:
        raise TransportError(f"payload does not match {msg.kind} schema: {exc.message}") from exc


def _fast_check(msg: Message):
    if msg.kind not in KINDS:
        raise TransportError(f"unknown message kind {msg.kind!r}")
    if not isinstance(msg.sender, str) or not msg.sender:
        raise TransportError("sender must be a nonempty string")
    if not isinstance(msg.round, int) or msg.round < 0:
        raise TransportError("round must be a nonnegative integer")
    if not isinstance(msg.payload, dict):
        raise TransportError("payload must be an object")
    required = {k for k in SCHEMAS[msg.kind].get("required", ())}
    missing = required - msg.payload.keys()
    if missing:
        raise TransportError(f"{msg.kind} payload lacks fields: {sorted(missing)}")


class _ChannelBase:
    """Shared consumer-cursor bookkeeping; subclasses store the log."""

    def __init__(self):
        self._cursors = {}
        self._lock = threading.RLock()
        self._last_round = {}
        self.history: list[Message] = []

    def push(self, msg: Message):
        """Validate and append; rejects out-of-order rounds per (sender, kind)."""
        _fast_check(msg)
        with self._lock:
            key = (msg.sender, msg.kind)
            last = self._last_round.get(key)
            if last is not None and msg.round < last:
                raise TransportError(
                    f"round {msg.round} for {key} not increasing (last {last})"
                )
            self._last_round[key] = msg.round
            seq = self._append(msg)
        return seq

    def fetch_new(self, consumer: str, sender: str, kind: str) -> list[Message]:
        """Messages from ``sender`` of ``kind`` not yet seen by ``consumer``."""
        with self._lock:
            log = self._log_for(sender, kind)
            key = (consumer, sender, kind)
            seen = self._cursors.get(key, set())
            fresh = [m for m in log if (m.round, m.seq) not in seen]
            seen = seen | {(m.round, m.seq) for m in fresh}
            self._cursors[key] = seen
        return fresh


class InProcessChannel(_ChannelBase):
    """Append-only in-memory log; exactly-once per (consumer, sender, kind)."""

    poll_interval = 0.05

    def __init__(self):
        super().__init__()
        self._logs = {}
        self._seq = 0

    def _append(self, msg: Message) -> int:
        self._seq += 1
        stored = Message(msg.kind, msg.sender, msg.round, msg.payload,
                         msg.schema_version, self._seq)
        self._logs.setdefault((msg.sender, msg.kind), []).append(stored)
        self.history.append(stored)
        return self._seq

    def _log_for(self, sender, kind):
        return list(self._logs.get((sender, kind), ()))


class FileChannel(_ChannelBase):
    """One directory per (sender, kind), one JSON file per message.

    Publishing writes to a temp name and renames atomically; fetching
    re-scans directories, so delivery is at-least-once and consumers
    deduplicate on (round, seq).
    """

    poll_interval = 0.5

    def __init__(self, root):
        super().__init__()
        self.root = str(root)
        os.makedirs(self.root, exist_ok=True)
        self._seq = 0

    def _dir(self, sender, kind):
        return os.path.join(self.root, sender, kind)

    def _append(self, msg: Message) -> int:
        self._seq += 1
        stored = Message(msg.kind, msg.sender, msg.round, msg.payload,
                         msg.schema_version, self._seq)
        d = self._dir(msg.sender, msg.kind)
        os.makedirs(d, exist_ok=True)
        final = os.path.join(d, f"{msg.round:06d}_{self._seq:06d}.json")
        tmp = final + ".tmp"
        with open(tmp, "w") as fh:
            fh.write(stored.to_json())
        os.replace(tmp, final)
        self.history.append(stored)
        return self._seq

    def _log_for(self, sender, kind):
        d = self._dir(sender, kind)
        if not os.path.isdir(d):
            return []
        out = []
        for name in sorted(os.listdir(d)):
            if not name.endswith(".json"):
                continue
            with open(os.path.join(d, name)) as fh:
                out.append(Message.from_json(fh.read()))
        return out


class AwaitResult(dict):
    """``{sender: Message}`` plus a count of superseded duplicates."""

    def __init__(self):
        super().__init__()
        self.duplicates = 0


def await_all(channel, expected_senders, kind, round_, timeout=30.0, consumer="coordinator"):
    """Block until one message of (kind, round) per sender is present.

    When a sender reports several times in the same round the latest wins
    and the duplicate is counted.  Raises :class:`TransportTimeout` naming
    the missing senders.
    """
    expected = list(expected_senders)
    if not expected:
        raise ValueError("expected_senders must be nonempty")
    got = AwaitResult()
    deadline = time.monotonic() + timeout
    while True:
        for sender in expected:
            for msg in channel.fetch_new(consumer, sender, kind):
                if msg.round == round_:
                    if sender in got:
                        got.duplicates += 1
                    got[sender] = msg  # latest wins
        if all(s in got for s in expected):
            return got
        if time.monotonic() >= deadline:
            missing = [s for s in expected if s not in got]
            raise TransportTimeout(
                f"timed out waiting for {kind} round {round_}; missing: {missing}",
                missing=missing,
            )
        time.sleep(channel.poll_interval)


@dataclass
class PrivacyAuditor:
    """Checks node-to-coordinator payloads for leak shapes.

    ``declared`` maps sender to that node's locally-known sizes:
    ``n`` (patient count), ``n_event_times`` (distinct event times) and
    ``bin`` (minimum patients per reported curve knot).  The auditor is a
    test/monitoring harness; the sizes never travel over the wire.
    """

    declared: dict

    def validate(self, msg: Message) -> list[str]:
        info = self.declared.get(msg.sender)
        if info is None or msg.kind not in (
            "EvaluateResponse", "PerformanceResponse", "ErrorReport"
        ):
            return []
        violations = []
        n = info.get("n")
        n_events = info.get("n_event_times")
        bin_size = info.get("bin")

        def walk(obj, path):
            if isinstance(obj, dict):
                coverage = obj.get("coverage")
                if coverage is not None and bin_size:
                    for c in coverage:
                        if c < bin_size:
                            violations.append(
                                f"{path}: curve knot covers {c} < {bin_size} patients"
                            )
                for k, v in obj.items():
                    walk(v, f"{path}.{k}")
            elif isinstance(obj, list):
                if n and len(obj) == n and _is_scalar_list(obj):
                    violations.append(f"{path}: array of length n={n} (per-patient shape)")
                if n_events and len(obj) == n_events and _is_scalar_list(obj):
                    violations.append(
                        f"{path}: array of length {n_events} (per-event-time shape)"
                    )
                for i, v in enumerate(obj):
                    walk(v, f"{path}[{i}]")

        walk(msg.payload, msg.kind)
        return violations


def _is_scalar_list(obj):
    return all(not isinstance(v, (dict, list)) for v in obj)


def validate_privacy(msg: Message, declared: dict) -> list[str]:
    """Convenience wrapper around :class:`PrivacyAuditor` for one message."""
    return PrivacyAuditor(declared).validate(msg)
