"""Label and meta-data schemas of the Derm7pt task."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SchemaError(ValueError):
    """Raised for labels or meta values outside the schema."""


@dataclass(frozen=True)
class LabelSchema:
    names: tuple[str, ...]
    classes: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if len(self.names) != len(self.classes):
            raise SchemaError("every label needs a class list")

    @property
    def class_counts(self) -> tuple[int, ...]:
        return tuple(len(c) for c in self.classes)

    @property
    def num_labels(self) -> int:
        return len(self.names)

    @property
    def total_classes(self) -> int:
        return sum(self.class_counts)

    def index(self, label: str, value: str) -> int:
        """Class index of ``value`` (abbreviation, case-insensitive, or integer string)."""
        li = self.names.index(label)
        v = str(value).strip()
        if v.isdigit() and int(v) < self.class_counts[li]:
            return int(v)
        upper = [c.upper() for c in self.classes[li]]
        if v.upper() not in upper:
            raise SchemaError(f"label {label}: unknown class {value!r}; expected one of {list(self.classes[li])}")
        return upper.index(v.upper())

    def validate(self, labels) -> None:
        labels = np.asarray(labels)
        if labels.shape[-1] != self.num_labels:
            raise SchemaError(f"expected {self.num_labels} labels per case, got shape {labels.shape}")
        for i, (name, k) in enumerate(zip(self.names, self.class_counts)):
            col = labels[..., i]
            if (col < 0).any() or (col >= k).any():
                bad = int(col[(col < 0) | (col >= k)].reshape(-1)[0])
                raise SchemaError(f"label {name}: class index {bad} outside [0, {k})")


DERM7PT = LabelSchema(
    names=("DIAG", "PN", "BWV", "VS", "PIG", "STR", "DaG", "RS"),
    classes=(
        ("MEL", "NEV", "SK", "BCC", "MISC"),
        ("ABS", "TYP", "ATP"),
        ("ABS", "PRS"),
        ("ABS", "REG", "IR"),
        ("ABS", "REG", "IR"),
        ("ABS", "REG", "IR"),
        ("ABS", "REG", "IR"),
        ("ABS", "PRS"),
    ),
)


@dataclass(frozen=True)
class MetaSchema:
    fields: tuple[str, ...]
    vocab: tuple[tuple[str, ...], ...]

    @property
    def length(self) -> int:
        return sum(len(v) for v in self.vocab)

    def offsets(self) -> list[int]:
        return list(np.cumsum([0] + [len(v) for v in self.vocab])[:-1])


# Five named patient fields; the vocabularies total exactly 20 one-hot slots.
DERM7PT_META = MetaSchema(
    fields=("location", "sex", "management", "elevation", "diagnostic_difficulty"),
    vocab=(
        ("abdomen", "acral", "back", "buttocks", "chest", "genital areas",
         "head neck", "lower limbs", "upper limbs"),
        ("female", "male"),
        ("clinical follow up", "excision", "no further examination"),
        ("flat", "palpable", "nodular"),
        ("low", "medium", "high"),
    ),
)
