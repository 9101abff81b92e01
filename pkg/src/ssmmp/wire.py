"""SSMMP wire format: typed messages, templates, and the line codec.

A message is a sequence of ``name: contents`` lines. The first line carries
the message type, the second the message identifier; a route tag line
(``sub_type``) follows for the types that have one. The remaining lines are
fixed per (type, sub_type) template: same names, same order, nothing extra.

Framing: LF line endings, UTF-8, one empty line terminates a message. Shared
request/response/ack chains reuse one message_id; identifiers are generated
per originator by a monotonic counter starting at 1.
"""

from __future__ import annotations

import ipaddress
import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Sequence


class MessageType(Enum):
    INITIATION_REQUEST = "initiation_request"
    INITIATION_RESPONSE = "initiation_response"
    EXECUTION_REQUEST = "execution_request"
    EXECUTION_RESPONSE = "execution_response"
    SESSION_REQUEST = "session_request"
    SESSION_RESPONSE = "session_response"
    SESSION_ACK = "session_ack"
    SOURCE_SESSION_CLOSE_INFO = "source_service_session_close_info"
    DEST_SESSION_CLOSE_INFO = "dest_service_session_close_info"
    SOURCE_SESSION_CLOSE_REQUEST = "source_service_session_close_request"
    SOURCE_SESSION_CLOSE_RESPONSE = "source_service_session_close_response"
    DEST_SESSION_CLOSE_REQUEST = "dest_service_session_close_request"
    DEST_SESSION_CLOSE_RESPONSE = "dest_service_session_close_response"
    GRACEFUL_SHUTDOWN_REQUEST = "graceful_shutdown_request"
    GRACEFUL_SHUTDOWN_RESPONSE = "graceful_shutdown_response"
    HARD_SHUTDOWN_REQUEST = "hard_shutdown_request"
    HARD_SHUTDOWN_RESPONSE = "hard_shutdown_response"
    HEALTH_CONTROL_REQUEST = "health_control_request"
    HEALTH_CONTROL_RESPONSE = "health_control_response"


class SubType(Enum):
    SERVICE_TO_AGENT = "service_to_agent"
    AGENT_TO_MANAGER = "agent_to_Manager"
    MANAGER_TO_AGENT = "Manager_to_agent"
    AGENT_TO_SERVICE = "agent_to_service"
    SOURCE_SERVICE_TO_AGENT = "source_service_to_agent"
    DEST_SERVICE_TO_AGENT = "dest_service_to_agent"
    AGENT_TO_SOURCE_SERVICE = "agent_to_source_service"
    AGENT_TO_DEST_SERVICE = "agent_to_dest_service"
    AGENT_TO_SERVICE_INSTANCE = "agent_to_service_instance"
    SERVICE_INSTANCE_TO_AGENT = "service_instance_to_agent"


_MSG_TYPES = {t.value: t for t in MessageType}
_SUB_TYPES = {s.value: s for s in SubType}


class StatusClass(Enum):
    INFORMATIONAL = 1
    SUCCESSFUL = 2
    REDIRECTION = 3
    REQUESTER_ERROR = 4
    RESPONDENT_ERROR = 5


def status_class(code: int) -> StatusClass:
    """Class of a three-digit status code; raises ValueError outside 100-599."""
    if not 100 <= code <= 599:
        raise ValueError(f"status code out of range: {code}")
    return StatusClass(code // 100)


def is_success(code: int) -> bool:
    return 200 <= code <= 299


# Code assignments used by the actors (the protocol adopts HTTP classes,
# concrete values are this implementation's convention).
OK = 200
EXECUTED = 201
MALFORMED = 400
NOT_FOUND = 404
NO_BYTECODE = 406
CONFLICT = 409
ALREADY_CLOSED = 410
OVERLOADED = 429
INTERNAL_ERROR = 500
UNREACHABLE = 503
TIMEOUT = 504


# ---------------------------------------------------------------------------
# Field syntax

TOKEN_RE = re.compile(r"[A-Za-z0-9_.-]+\Z")
_LINE_RE = re.compile(r"([A-Za-z0-9_.-]+): (.*)\Z")

# line name -> value kind
FIELD_KINDS = {
    "agent_network_address": "address",
    "source_service_instance_network_address": "address",
    "dest_service_instance_network_address": "address",
    "service_repository": "name_list",
    "service_name": "token",
    "source_service_name": "token",
    "dest_service_name": "token",
    "service_instance_id": "id",
    "source_service_instance_id": "id",
    "dest_service_instance_id": "id",
    "socket_configuration": "socket_config",
    "plug_configuration": "plug_config",
    "source_plug_name": "token",
    "dest_socket_name": "token",
    "source_plug_port": "port",
    "dest_socket_port": "port",
    "dest_socket_new_port": "port",
    "status": "status",
}

_SOURCE_CLOSE_FIELDS = (
    "source_service_name",
    "source_service_instance_network_address",
    "source_service_instance_id",
    "source_plug_name",
    "source_plug_port",
    "dest_service_name",
    "dest_service_instance_network_address",
    "dest_socket_name",
    "dest_socket_port",
    "dest_socket_new_port",
)

_DEST_CLOSE_FIELDS = (
    "source_service_instance_network_address",
    "source_plug_name",
    "source_plug_port",
    "dest_service_name",
    "dest_service_instance_network_address",
    "dest_service_instance_id",
    "dest_socket_name",
    "dest_socket_port",
    "dest_socket_new_port",
)

# (msg_type, sub_type) -> ordered field names after the type/id/sub_type lines
TEMPLATES: dict[tuple[MessageType, SubType | None], tuple[str, ...]] = {
    (MessageType.INITIATION_REQUEST, None): (
        "agent_network_address",
        "service_repository",
    ),
    (MessageType.INITIATION_RESPONSE, None): ("status",),
    (MessageType.EXECUTION_REQUEST, None): (
        "agent_network_address",
        "service_name",
        "service_instance_id",
        "socket_configuration",
        "plug_configuration",
    ),
    (MessageType.EXECUTION_RESPONSE, None): ("status",),
    (MessageType.SESSION_REQUEST, SubType.SERVICE_TO_AGENT): (
        "source_service_name",
        "source_service_instance_id",
        "source_plug_name",
        "dest_service_name",
        "dest_socket_name",
    ),
    (MessageType.SESSION_REQUEST, SubType.AGENT_TO_MANAGER): (
        "agent_network_address",
        "source_service_name",
        "source_service_instance_id",
        "source_plug_name",
        "dest_service_name",
        "dest_socket_name",
    ),
    (MessageType.SESSION_RESPONSE, SubType.MANAGER_TO_AGENT): (
        "status",
        "dest_service_instance_network_address",
        "dest_socket_port",
    ),
    (MessageType.SESSION_RESPONSE, SubType.AGENT_TO_SERVICE): (
        "status",
        "dest_service_instance_network_address",
        "dest_socket_port",
    ),
    (MessageType.SESSION_ACK, SubType.SERVICE_TO_AGENT): (
        "status",
        "source_plug_port",
        "dest_socket_new_port",
    ),
    (MessageType.SESSION_ACK, SubType.AGENT_TO_MANAGER): (
        "status",
        "source_plug_port",
        "dest_socket_new_port",
    ),
    (MessageType.SOURCE_SESSION_CLOSE_INFO, SubType.SOURCE_SERVICE_TO_AGENT):
        _SOURCE_CLOSE_FIELDS,
    (MessageType.SOURCE_SESSION_CLOSE_INFO, SubType.AGENT_TO_MANAGER):
        _SOURCE_CLOSE_FIELDS,
    (MessageType.DEST_SESSION_CLOSE_INFO, SubType.DEST_SERVICE_TO_AGENT):
        _DEST_CLOSE_FIELDS,
    (MessageType.DEST_SESSION_CLOSE_INFO, SubType.AGENT_TO_MANAGER):
        _DEST_CLOSE_FIELDS,
    (MessageType.SOURCE_SESSION_CLOSE_REQUEST, SubType.MANAGER_TO_AGENT):
        _SOURCE_CLOSE_FIELDS,
    (MessageType.SOURCE_SESSION_CLOSE_REQUEST, SubType.AGENT_TO_SOURCE_SERVICE):
        _SOURCE_CLOSE_FIELDS,
    (MessageType.SOURCE_SESSION_CLOSE_RESPONSE, SubType.SOURCE_SERVICE_TO_AGENT):
        ("status",),
    (MessageType.SOURCE_SESSION_CLOSE_RESPONSE, SubType.AGENT_TO_MANAGER):
        ("status",),
    (MessageType.DEST_SESSION_CLOSE_REQUEST, SubType.MANAGER_TO_AGENT):
        _DEST_CLOSE_FIELDS,
    (MessageType.DEST_SESSION_CLOSE_REQUEST, SubType.AGENT_TO_DEST_SERVICE):
        _DEST_CLOSE_FIELDS,
    (MessageType.DEST_SESSION_CLOSE_RESPONSE, SubType.DEST_SERVICE_TO_AGENT):
        ("status",),
    (MessageType.DEST_SESSION_CLOSE_RESPONSE, SubType.AGENT_TO_MANAGER):
        ("status",),
    (MessageType.GRACEFUL_SHUTDOWN_REQUEST, SubType.MANAGER_TO_AGENT): (
        "service_name",
        "service_instance_id",
    ),
    (MessageType.GRACEFUL_SHUTDOWN_REQUEST, SubType.AGENT_TO_SERVICE_INSTANCE): (
        "service_name",
        "service_instance_id",
    ),
    (MessageType.GRACEFUL_SHUTDOWN_RESPONSE, SubType.SERVICE_INSTANCE_TO_AGENT):
        ("status",),
    (MessageType.GRACEFUL_SHUTDOWN_RESPONSE, SubType.AGENT_TO_MANAGER):
        ("status",),
    (MessageType.HARD_SHUTDOWN_REQUEST, SubType.MANAGER_TO_AGENT): (
        "service_name",
        "service_instance_id",
    ),
    (MessageType.HARD_SHUTDOWN_RESPONSE, SubType.AGENT_TO_MANAGER): ("status",),
    (MessageType.HEALTH_CONTROL_REQUEST, SubType.AGENT_TO_SERVICE_INSTANCE): (
        "service_name",
        "service_instance_id",
    ),
    (MessageType.HEALTH_CONTROL_RESPONSE, SubType.SERVICE_INSTANCE_TO_AGENT): (
        "service_name",
        "service_instance_id",
        "status",
    ),
    (MessageType.HEALTH_CONTROL_RESPONSE, SubType.AGENT_TO_MANAGER): (
        "service_name",
        "service_instance_id",
        "status",
    ),
}

SUB_TYPES_OF: dict[MessageType, tuple[SubType | None, ...]] = {}
for (_t, _s) in TEMPLATES:
    SUB_TYPES_OF.setdefault(_t, ())
    SUB_TYPES_OF[_t] += (_s,)


# ---------------------------------------------------------------------------
# Errors

class MessageError(Exception):
    """Base for wire-level failures."""


class WireSyntaxError(MessageError):
    """Bytes do not form well-shaped lines, or a field value fails its syntax."""


class UnknownTypeError(MessageError):
    """Unknown message type, or a sub_type not legal for the type."""


class TemplateMismatchError(MessageError):
    """Line names, order, or count deviate from the template."""


class InvalidMessage(MessageError):
    """A Message value failed validation on the serialize side."""

    def __init__(self, issues: list[ValidationIssue]):
        self.issues = issues
        super().__init__("; ".join(str(i) for i in issues))


@dataclass(frozen=True)
class ValidationIssue:
    code: str  # UnknownType | TemplateMismatch | FieldSyntax | FieldRange
    detail: str

    def __str__(self) -> str:
        return f"{self.code}: {self.detail}"


# ---------------------------------------------------------------------------
# Message value

@dataclass(frozen=True)
class Message:
    """One protocol unit; immutable and safe to share."""

    msg_type: MessageType
    message_id: int
    sub_type: SubType | None = None
    fields: tuple[tuple[str, str], ...] = ()

    def get(self, name: str) -> str:
        for k, v in self.fields:
            if k == name:
                return v
        raise KeyError(name)

    def get_int(self, name: str) -> int:
        return int(self.get(name))

    def has(self, name: str) -> bool:
        return any(k == name for k, _ in self.fields)

    @property
    def status(self) -> int:
        return self.get_int("status")

    def field_names(self) -> tuple[str, ...]:
        return tuple(k for k, _ in self.fields)


def make_message(
    msg_type: MessageType,
    message_id: int,
    sub_type: SubType | None = None,
    **values: object,
) -> Message:
    """Build a message with fields ordered by the template.

    Integer values are formatted; list fields must already be formatted text
    (use format_name_list / format_pair_list). Raises InvalidMessage on any
    missing/extra value or template violation.
    """
    template = TEMPLATES.get((msg_type, sub_type))
    if template is None:
        raise InvalidMessage([ValidationIssue(
            "UnknownType", f"no template for ({msg_type.value}, {sub_type})")])
    given = dict(values)
    fields = []
    for name in template:
        if name not in given:
            raise InvalidMessage([ValidationIssue(
                "TemplateMismatch", f"missing field {name}")])
        fields.append((name, str(given.pop(name))))
    if given:
        raise InvalidMessage([ValidationIssue(
            "TemplateMismatch", f"extra fields {sorted(given)}")])
    msg = Message(msg_type, message_id, sub_type, tuple(fields))
    issues = validate_message(msg)
    if issues:
        raise InvalidMessage(issues)
    return msg


# ---------------------------------------------------------------------------
# List formats:  (a; b; c)  and  ((x, y); (z, w))

def format_name_list(names: Sequence[str]) -> str:
    for n in names:
        if not TOKEN_RE.match(n):
            raise WireSyntaxError(f"illegal token {n!r}")
    return "(" + "; ".join(names) + ")"


def parse_name_list(text: str) -> list[str]:
    if not (text.startswith("(") and text.endswith(")")):
        raise WireSyntaxError(f"list not parenthesized: {text!r}")
    inner = text[1:-1]
    if inner == "":
        return []
    names = inner.split("; ")
    for n in names:
        if not TOKEN_RE.match(n):
            raise WireSyntaxError(f"illegal token {n!r} in list {text!r}")
    return names


def format_pair_list(pairs: Sequence[tuple[str, object]]) -> str:
    parts = []
    for a, b in pairs:
        if not TOKEN_RE.match(a) or not TOKEN_RE.match(str(b)):
            raise WireSyntaxError(f"illegal pair ({a!r}, {b!r})")
        parts.append(f"({a}, {b})")
    return "(" + "; ".join(parts) + ")"


def parse_pair_list(text: str) -> list[tuple[str, str]]:
    if not (text.startswith("(") and text.endswith(")")):
        raise WireSyntaxError(f"pair list not parenthesized: {text!r}")
    inner = text[1:-1]
    if inner == "":
        return []
    pairs = []
    for part in inner.split("; "):
        m = re.match(r"\(([A-Za-z0-9_.-]+), ([A-Za-z0-9_.-]+)\)\Z", part)
        if not m:
            raise WireSyntaxError(f"malformed pair {part!r} in {text!r}")
        pairs.append((m.group(1), m.group(2)))
    return pairs


def parse_socket_config(text: str) -> list[tuple[str, int]]:
    out = []
    for name, port in parse_pair_list(text):
        if not port.isdigit() or not 1 <= int(port) <= 65535:
            raise WireSyntaxError(f"port out of range in pair ({name}, {port})")
        out.append((name, int(port)))
    return out


def parse_plug_config(text: str) -> list[tuple[str, str]]:
    return parse_pair_list(text)


# ---------------------------------------------------------------------------
# Validation

_CANONICAL_INT_RE = re.compile(r"(0|[1-9][0-9]*)\Z")


def _check_value(kind: str, name: str, value: str) -> ValidationIssue | None:
    if kind == "token":
        if not TOKEN_RE.match(value):
            return ValidationIssue("FieldSyntax", f"{name}: bad token {value!r}")
    elif kind == "id":
        if not _CANONICAL_INT_RE.match(value):
            return ValidationIssue("FieldSyntax", f"{name}: not an integer {value!r}")
        elif int(value) < 1:
            return ValidationIssue("FieldRange", f"{name}: must be positive")
    elif kind == "port":
        if not _CANONICAL_INT_RE.match(value):
            return ValidationIssue("FieldSyntax", f"{name}: not an integer {value!r}")
        elif not 1 <= int(value) <= 65535:
            return ValidationIssue("FieldRange", f"{name}: port {value} out of 1-65535")
    elif kind == "status":
        if not re.match(r"[0-9]{3}\Z", value):
            return ValidationIssue("FieldSyntax", f"{name}: not a 3-digit code {value!r}")
        elif not 100 <= int(value) <= 599:
            return ValidationIssue("FieldRange", f"{name}: code {value} out of 100-599")
    elif kind == "address":
        try:
            ipaddress.ip_address(value)
        except ValueError:
            return ValidationIssue("FieldSyntax", f"{name}: bad address {value!r}")
    elif kind == "name_list":
        try:
            parse_name_list(value)
        except WireSyntaxError as e:
            return ValidationIssue("FieldSyntax", f"{name}: {e}")
    elif kind == "socket_config":
        try:
            parse_socket_config(value)
        except WireSyntaxError as e:
            return ValidationIssue("FieldSyntax", f"{name}: {e}")
    elif kind == "plug_config":
        try:
            parse_plug_config(value)
        except WireSyntaxError as e:
            return ValidationIssue("FieldSyntax", f"{name}: {e}")
    return None


def validate_message(m: Message) -> list[ValidationIssue]:
    """Template and field-level checks; returns all issues, never raises."""
    issues: list[ValidationIssue] = []
    template = TEMPLATES.get((m.msg_type, m.sub_type))
    if template is None:
        issues.append(ValidationIssue(
            "UnknownType",
            f"({m.msg_type.value}, {m.sub_type.value if m.sub_type else None}) "
            "is not a known template"))
        return issues
    if m.message_id < 1:
        issues.append(ValidationIssue("FieldRange", "message_id must be positive"))
    names = m.field_names()
    if names != template:
        if sorted(names) == sorted(template):
            issues.append(ValidationIssue(
                "TemplateMismatch", f"field order {names} != template {template}"))
        else:
            missing = [n for n in template if n not in names]
            extra = [n for n in names if n not in template]
            dup = [n for n in set(names) if names.count(n) > 1]
            detail = []
            if missing:
                detail.append(f"missing {missing}")
            if extra:
                detail.append(f"extra {extra}")
            if dup:
                detail.append(f"duplicate {dup}")
            issues.append(ValidationIssue("TemplateMismatch", ", ".join(detail)))
    for name, value in m.fields:
        kind = FIELD_KINDS.get(name)
        if kind is None:
            continue  # already reported as extra
        issue = _check_value(kind, name, value)
        if issue:
            issues.append(issue)
    return issues


# ---------------------------------------------------------------------------
# Codec

def serialize_message(m: Message) -> bytes:
    """Lines + one empty terminator line, LF-separated, UTF-8."""
    issues = validate_message(m)
    if issues:
        raise InvalidMessage(issues)
    lines = [f"type: {m.msg_type.value}", f"message_id: {m.message_id}"]
    if m.sub_type is not None:
        lines.append(f"sub_type: {m.sub_type.value}")
    lines.extend(f"{k}: {v}" for k, v in m.fields)
    return ("\n".join(lines) + "\n\n").encode("utf-8")


def _split_lines(data: bytes) -> list[tuple[str, str]]:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise WireSyntaxError(f"not UTF-8: {e}") from None
    if not text:
        raise WireSyntaxError("empty input")
    if not text.endswith("\n\n"):
        raise WireSyntaxError("message not terminated by an empty line")
    body = text[:-2]
    if body == "":
        raise WireSyntaxError("message has no lines")
    parsed = []
    for raw in body.split("\n"):
        m = _LINE_RE.match(raw)
        if not m:
            raise WireSyntaxError(f"malformed line {raw!r}")
        parsed.append((m.group(1), m.group(2)))
    return parsed


def parse_message(data: bytes) -> Message:
    """Parse one framed message; inverse of serialize_message.

    Raises WireSyntaxError, UnknownTypeError, or TemplateMismatchError;
    never anything else.
    """
    lines = _split_lines(data)
    name, value = lines[0]
    if name != "type":
        raise TemplateMismatchError(f"first line must be type, got {name!r}")
    msg_type = _MSG_TYPES.get(value)
    if msg_type is None:
        raise UnknownTypeError(f"unknown message type {value!r}")
    if len(lines) < 2:
        raise TemplateMismatchError("missing message_id line")
    name, value = lines[1]
    if name != "message_id":
        raise TemplateMismatchError(f"second line must be message_id, got {name!r}")
    if not _CANONICAL_INT_RE.match(value) or int(value) < 1:
        raise WireSyntaxError(f"message_id not a positive integer: {value!r}")
    message_id = int(value)

    sub_type: SubType | None = None
    rest = lines[2:]
    if None not in SUB_TYPES_OF[msg_type]:
        if not rest or rest[0][0] != "sub_type":
            raise TemplateMismatchError(f"{msg_type.value} requires a sub_type line")
        sub_type = _SUB_TYPES.get(rest[0][1])
        if sub_type is None or (msg_type, sub_type) not in TEMPLATES:
            raise UnknownTypeError(
                f"sub_type {rest[0][1]!r} not legal for {msg_type.value}")
        rest = rest[1:]
    elif rest and rest[0][0] == "sub_type":
        raise TemplateMismatchError(f"{msg_type.value} takes no sub_type")

    msg = Message(msg_type, message_id, sub_type, tuple(rest))
    issues = validate_message(msg)
    if issues:
        first = issues[0]
        if first.code == "TemplateMismatch":
            raise TemplateMismatchError(str(first))
        if first.code == "UnknownType":
            raise UnknownTypeError(str(first))
        raise WireSyntaxError(str(first))
    return msg


class MessageReader:
    """Incremental framing over a byte stream: feed chunks, get messages."""

    def __init__(self) -> None:
        self._buf = b""

    def feed(self, data: bytes) -> list[Message]:
        self._buf += data
        out = []
        while True:
            idx = self._buf.find(b"\n\n")
            if idx < 0:
                return out
            frame, self._buf = self._buf[: idx + 2], self._buf[idx + 2:]
            out.append(parse_message(frame))


class IdCounter:
    """Per-originator monotonic message_id source, starting at 1."""

    def __init__(self) -> None:
        self._next = 1

    def next(self) -> int:
        n = self._next
        self._next += 1
        return n


def all_template_keys() -> Iterator[tuple[MessageType, SubType | None]]:
    return iter(TEMPLATES.keys())


def message_summary(m: Message) -> str:
    """One-line rendering used in traces and reports."""
    parts = [f"type: {m.msg_type.value}", f"message_id: {m.message_id}"]
    if m.sub_type is not None:
        parts.append(f"sub_type: {m.sub_type.value}")
    parts.extend(f"{k}: {v}" for k, v in m.fields)
    return " | ".join(parts)


def parse_summary(line: str) -> Message:
    """Inverse of message_summary (used by the trace CLI)."""
    data = (line.replace(" | ", "\n") + "\n\n").encode("utf-8")
    return parse_message(data)
