"""Newline-delimited JSON messages between the coordinator and workers.

Every message is one JSON object on one line with a ``type`` and a
``protocol_version``.  Unknown fields are dropped on decode so newer peers
can add fields without breaking older ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

PROTOCOL_VERSION = 1

FIELDS = {
    "HELLO": ("worker_id", "capabilities"),
    "DISPATCH": ("trial_id", "candidate", "seed", "evaluator"),
    "RESULT": ("trial_id", "y", "y_var", "c", "c_var"),
    "FAIL": ("trial_id", "reason"),
    "HEARTBEAT": ("worker_id",),
    "SHUTDOWN": (),
}
OPTIONAL = {"HELLO": {"capabilities": []}, "FAIL": {"reason": ""}}


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class Message:
    type: str
    fields: dict
    protocol_version: int = PROTOCOL_VERSION

    def __getitem__(self, key):
        return self.fields[key]

    def get(self, key, default=None):
        return self.fields.get(key, default)


def encode(kind: str, **fields) -> bytes:
    if kind not in FIELDS:
        raise ProtocolError(f"unknown message type {kind!r}")
    missing = [f for f in FIELDS[kind] if f not in fields and f not in OPTIONAL.get(kind, {})]
    if missing:
        raise ProtocolError(f"{kind} missing fields {missing}")
    body = {"type": kind, "protocol_version": PROTOCOL_VERSION}
    body.update(fields)
    return (json.dumps(body, sort_keys=True, separators=(",", ":")) + "\n").encode()


def decode(line: bytes | str) -> Message:
    if isinstance(line, bytes):
        line = line.decode()
    try:
        body = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"malformed message: {exc}") from None
    if not isinstance(body, dict):
        raise ProtocolError("message must be a JSON object")
    kind = body.get("type")
    if kind not in FIELDS:
        raise ProtocolError(f"unknown message type {kind!r}")
    if "protocol_version" not in body:
        raise ProtocolError("message lacks protocol_version")
    fields = dict(OPTIONAL.get(kind, {}))
    for name in FIELDS[kind]:
        if name in body:
            fields[name] = body[name]
        elif name not in fields:
            raise ProtocolError(f"{kind} missing field {name!r}")
    return Message(kind, fields, int(body["protocol_version"]))
