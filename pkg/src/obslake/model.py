"""Domain vocabulary: observation records, canonical values, ids, equivalence.

Every value that crosses the storage boundary (step inputs, step outputs,
metric maps) is reduced to one canonical JSON text so that default
behavioral equivalence is plain byte equality.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

from .errors import EmptyPayload, ParseError

EXCEPTION_KEY = "$exception"
FLOAT_KEY = "$float"
END_EXECUTION_KEY = "$end_execution"

_dumps_str = json.JSONEncoder(ensure_ascii=False).encode


# --------------------------------------------------------------------------
# canonical values
# --------------------------------------------------------------------------


def format_number(x: float) -> str:
    """Render a finite float the way ECMAScript ``Number.prototype.toString`` does.

    Integral values below 1e21 come out without a decimal point, ``-0.0``
    becomes ``0``.
    """
    if x == 0:
        return "0"
    sign = "-" if x < 0 else ""
    r = repr(abs(x))
    if "e" in r:
        mant, _, e = r.partition("e")
        exp = int(e)
    else:
        mant, exp = r, 0
    if "." in mant:
        ip, fp = mant.split(".")
    else:
        ip, fp = mant, ""
    digits = ip + fp
    # value == 0.<digits> * 10**n
    n = len(ip) + exp
    stripped = digits.lstrip("0")
    n -= len(digits) - len(stripped)
    digits = stripped.rstrip("0")
    k = len(digits)
    if k <= n <= 21:
        out = digits + "0" * (n - k)
    elif 0 < n <= 21:
        out = digits[:n] + "." + digits[n:]
    elif -6 < n <= 0:
        out = "0." + "0" * (-n) + digits
    else:
        e = n - 1
        out = digits[0] + ("." + digits[1:] if k > 1 else "") + "e" + ("+" if e > 0 else "-") + str(abs(e))
    return sign + out


def _float_text(x: float) -> str:
    if math.isfinite(x):
        return format_number(x)
    label = "NaN" if x != x else ("Infinity" if x > 0 else "-Infinity")
    return '{"%s":"%s"}' % (FLOAT_KEY, label)


def _canon(v: Any) -> str:
    t = type(v)
    if t is str:
        return _dumps_str(v)
    if t is bool:
        return "true" if v else "false"
    if t is int:
        return str(v)
    if v is None:
        return "null"
    if t is float:
        return _float_text(v)
    if t is list or t is tuple:
        return "[" + ",".join([_canon(x) for x in v]) + "]"
    if t is dict:
        items = sorted(v.items())
        return "{" + ",".join([_dumps_str(k) + ":" + _canon(x) for k, x in items]) + "}"
    raise ParseError(f"unsupported value type {t.__name__}")


def canonical_text(value: Any) -> str:
    """Canonical JSON text for an already-parsed JSON value."""
    out = _canon(value)
    if not out.isascii():
        try:
            out.encode("utf-8")
        except UnicodeEncodeError as exc:
            raise ParseError("lone surrogate in string") from exc
    return out


def canonicalize_value(raw: str) -> str:
    """Parse ``raw`` JSON text and return its canonical form.

    Object keys are sorted by code point, whitespace is dropped, numbers are
    normalized and string escapes are reduced to the minimal form. NaN and
    infinities become ``{"$float": ...}`` envelopes.
    """
    try:
        value = json.loads(raw)
    except (ValueError, TypeError) as exc:
        raise ParseError(f"invalid JSON: {exc}") from exc
    return canonical_text(value)


def exception_value(type_name: str, message: str) -> str:
    """Canonical exception envelope."""
    return canonical_text({EXCEPTION_KEY: {"type": type_name, "message": message}})


def is_exception(value: Any) -> bool:
    return (
        type(value) is dict
        and len(value) == 1
        and EXCEPTION_KEY in value
        and isinstance(value[EXCEPTION_KEY], dict)
    )


# --------------------------------------------------------------------------
# identifiers
# --------------------------------------------------------------------------


class IdKind(str, enum.Enum):
    IMPLEMENTATION = "implementation"
    TEST = "test"


_ID_PREFIX = {IdKind.IMPLEMENTATION: "impl_", IdKind.TEST: "test_"}


def content_id(kind: IdKind | str, payload: str) -> str:
    """Content-derived identifier: prefix + 128-bit BLAKE2b hex digest."""
    kind = IdKind(kind)
    if not payload:
        raise EmptyPayload(f"empty {kind.value} payload")
    h = hashlib.blake2b(digest_size=16)
    h.update(kind.value.encode())
    h.update(b"\x00")
    h.update(payload.encode("utf-8", "surrogatepass"))
    return _ID_PREFIX[kind] + h.hexdigest()


# --------------------------------------------------------------------------
# equivalence
# --------------------------------------------------------------------------


class ExceptionMode(str, enum.Enum):
    EXACT = "exact"
    TYPE_ONLY = "type_only"
    ANY_EXCEPTION = "any_exception"


@dataclass(frozen=True)
class EquivalenceConfig:
    exception_mode: ExceptionMode = ExceptionMode.EXACT
    float_tolerance: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "exception_mode", ExceptionMode(self.exception_mode))
        if not (self.float_tolerance >= 0):
            raise ValueError("float_tolerance must be >= 0")

    @property
    def is_default(self) -> bool:
        return self.exception_mode is ExceptionMode.EXACT and self.float_tolerance == 0

    def to_dict(self) -> dict:
        return {"exception_mode": self.exception_mode.value, "float_tolerance": self.float_tolerance}


DEFAULT_EQUIVALENCE = EquivalenceConfig()


def _is_number(v: Any) -> bool:
    return type(v) is int or type(v) is float


def _values_equivalent(a: Any, b: Any, cfg: EquivalenceConfig) -> bool:
    if is_exception(a) or is_exception(b):
        if not (is_exception(a) and is_exception(b)):
            return False
        mode = cfg.exception_mode
        if mode is ExceptionMode.ANY_EXCEPTION:
            return True
        ea, eb = a[EXCEPTION_KEY], b[EXCEPTION_KEY]
        if mode is ExceptionMode.TYPE_ONLY:
            return ea.get("type") == eb.get("type")
        return _values_equivalent(ea, eb, cfg)
    if _is_number(a) and _is_number(b):
        if cfg.float_tolerance == 0:
            return _canon(a) == _canon(b)
        return abs(a - b) <= cfg.float_tolerance
    ta, tb = type(a), type(b)
    if ta is dict and tb is dict:
        if a.keys() != b.keys():
            return False
        return all(_values_equivalent(a[k], b[k], cfg) for k in a)
    if ta is list and tb is list:
        return len(a) == len(b) and all(_values_equivalent(x, y, cfg) for x, y in zip(a, b))
    return ta is tb and a == b


def output_equivalent(a: str, b: str, cfg: EquivalenceConfig = DEFAULT_EQUIVALENCE) -> bool:
    """Whether two canonical outputs count as the same behavior under ``cfg``."""
    if a == b:
        return True
    if cfg.is_default:
        return False
    try:
        va, vb = json.loads(a), json.loads(b)
    except ValueError as exc:
        raise ParseError(str(exc)) from exc
    return _values_equivalent(va, vb, cfg)


def normalize_output(text: str, mode: ExceptionMode) -> str:
    """Collapse exception envelopes so that hashing respects ``mode``.

    Tolerance is not handled here; tolerant comparison cannot be expressed
    as a normal form.
    """
    if mode is ExceptionMode.EXACT or not text.startswith('{"$exception":'):
        return text
    value = json.loads(text)
    if not is_exception(value):
        return text
    if mode is ExceptionMode.ANY_EXCEPTION:
        return canonical_text({EXCEPTION_KEY: {}})
    return canonical_text({EXCEPTION_KEY: {"type": value[EXCEPTION_KEY].get("type")}})


# --------------------------------------------------------------------------
# records
# --------------------------------------------------------------------------


class DefinitionKind(str, enum.Enum):
    SEQUENCE_SHEET = "sequence_sheet"
    MINED_UNIT_TEST = "mined_unit_test"


@dataclass
class InvocationStepRecord:
    """One (operation, inputs, output) triple plus its full run context."""

    data_set_id: str
    problem_id: str
    implementation_id: str
    test_id: str
    execution_id: str
    step_id: int
    operation: str
    inputs: list[str]
    output: str
    language: str
    environment: str
    git_commit_hash: Optional[str] = None
    metrics: dict[str, float] = field(default_factory=dict)


@dataclass
class ImplementationRecord:
    data_set_id: str
    problem_id: str
    implementation_id: str
    source_code: str
    language: str
    static_metrics: dict[str, float] = field(default_factory=dict)
    git_commit_hash: Optional[str] = None
    alias: Optional[str] = None
    extra: dict[str, Any] = field(default_factory=dict)  # columns added by schema evolution

    def to_dict(self) -> dict:
        return {
            **self.extra,
            "data_set_id": self.data_set_id,
            "problem_id": self.problem_id,
            "implementation_id": self.implementation_id,
            "alias": self.alias,
            "source_code": self.source_code,
            "language": self.language,
            "static_metrics": self.static_metrics,
            "git_commit_hash": self.git_commit_hash,
        }


@dataclass
class TestRecord:
    __test__ = False  # not a pytest class

    data_set_id: str
    problem_id: str
    test_id: str
    definition: str
    definition_kind: DefinitionKind
    language: str
    alias: Optional[str] = None
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            **self.extra,
            "data_set_id": self.data_set_id,
            "problem_id": self.problem_id,
            "test_id": self.test_id,
            "alias": self.alias,
            "definition": self.definition,
            "definition_kind": DefinitionKind(self.definition_kind).value,
            "language": self.language,
        }


def metrics_text(metrics: Optional[Mapping[str, Any]]) -> Optional[str]:
    if metrics is None:
        return None
    return canonical_text(dict(metrics))
