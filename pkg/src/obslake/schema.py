"""Field-id based table schemas and the baseline star schema."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field as dc_field
from typing import Iterable, Optional

from .errors import DuplicateColumn, SchemaMismatch


class FieldType(str, enum.Enum):
    TEXT = "text"
    INTEGER = "integer"
    DECIMAL = "decimal"
    CANONICAL_VALUE = "canonical_value"
    METRIC_MAP = "metric_map"

    @property
    def is_scalar(self) -> bool:
        return self in (FieldType.TEXT, FieldType.INTEGER, FieldType.DECIMAL)

    @property
    def is_textual(self) -> bool:
        return self not in (FieldType.INTEGER, FieldType.DECIMAL)


@dataclass(frozen=True)
class Field:
    field_id: int
    name: str
    type: FieldType
    nullable: bool = True

    def to_dict(self) -> dict:
        return {"id": self.field_id, "name": self.name, "type": self.type.value, "nullable": self.nullable}

    @classmethod
    def from_dict(cls, d: dict) -> "Field":
        return cls(int(d["id"]), d["name"], FieldType(d["type"]), bool(d["nullable"]))


@dataclass(frozen=True)
class TableSchema:
    schema_id: int
    fields: tuple[Field, ...]
    _by_name: dict = dc_field(default=None, compare=False, repr=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        object.__setattr__(self, "_by_name", {f.name: f for f in self.fields})

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.fields]

    @property
    def last_field_id(self) -> int:
        return max((f.field_id for f in self.fields), default=0)

    def field(self, name: str) -> Field:
        try:
            return self._by_name[name]
        except KeyError:
            raise SchemaMismatch(f"unknown column {name!r}") from None

    def get(self, name: str) -> Optional[Field]:
        return self._by_name.get(name)

    def by_id(self, field_id: int) -> Field:
        for f in self.fields:
            if f.field_id == field_id:
                return f
        raise SchemaMismatch(f"unknown field id {field_id}")

    def add_field(self, name: str, type: FieldType | str) -> "TableSchema":
        """Next schema version with one nullable column appended."""
        if name in self._by_name:
            raise DuplicateColumn(f"column {name!r} already exists")
        new = Field(self.last_field_id + 1, name, FieldType(type), True)
        return TableSchema(self.schema_id + 1, self.fields + (new,))

    def to_dict(self) -> dict:
        return {"schema_id": self.schema_id, "fields": [f.to_dict() for f in self.fields]}

    @classmethod
    def from_dict(cls, d: dict) -> "TableSchema":
        return cls(int(d["schema_id"]), tuple(Field.from_dict(f) for f in d["fields"]))


def _schema(cols: Iterable[tuple[str, FieldType, bool]]) -> TableSchema:
    return TableSchema(0, tuple(Field(i, n, t, nl) for i, (n, t, nl) in enumerate(cols, start=1)))


T, I, D, C, M = FieldType.TEXT, FieldType.INTEGER, FieldType.DECIMAL, FieldType.CANONICAL_VALUE, FieldType.METRIC_MAP

OBSERVATIONS = "observations"
IMPLEMENTATIONS = "code_implementations"
TESTS = "tests"
TABLES = (OBSERVATIONS, IMPLEMENTATIONS, TESTS)

BASELINE_SCHEMAS: dict[str, TableSchema] = {
    OBSERVATIONS: _schema([
        ("data_set_id", T, False),
        ("problem_id", T, False),
        ("implementation_id", T, False),
        ("test_id", T, False),
        ("execution_id", T, False),
        ("step_id", I, False),
        ("operation", T, False),
        ("inputs", C, False),
        ("output", C, False),
        ("language", T, False),
        ("environment", T, False),
        ("git_commit_hash", T, True),
        ("metrics", M, True),
    ]),
    IMPLEMENTATIONS: _schema([
        ("data_set_id", T, False),
        ("problem_id", T, False),
        ("implementation_id", T, False),
        ("source_code", T, False),
        ("language", T, False),
        ("static_metrics", M, True),
        ("git_commit_hash", T, True),
        ("alias", T, True),
    ]),
    TESTS: _schema([
        ("data_set_id", T, False),
        ("problem_id", T, False),
        ("test_id", T, False),
        ("definition", T, False),
        ("definition_kind", T, False),
        ("language", T, False),
        ("alias", T, True),
    ]),
}
