"""Diagnostic classes and the SNOMED CT label map."""

from __future__ import annotations

import enum
from importlib import resources
from pathlib import Path


class ClassLabel(enum.IntEnum):
    """The five rhythm/morphology classes; the integer is the agent's action id."""

    NSR = 0
    AF = 1
    AFL = 2
    LAE = 3
    AVB1 = 4

    @classmethod
    def parse(cls, name: str) -> "ClassLabel":
        key = name.strip().upper().replace(" ", "")
        aliases = {"1AVB": "AVB1", "IAVB": "AVB1", "SNR": "NSR"}
        key = aliases.get(key, key)
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown class name {name!r}") from None


N_CLASSES = len(ClassLabel)


class LabelError(ValueError):
    """Base class for label-mapping rejections."""


class MultiLabel(LabelError):
    pass


class NoRelevantLabel(LabelError):
    pass


def load_label_map(path: str | Path | None = None) -> dict[str, ClassLabel]:
    """Read a ``snomed_code = class_name`` file.

    Blank lines and ``#`` comments are ignored.  With no path the packaged
    default map is used.
    """
    if path is None:
        text = resources.files("ecgq.data").joinpath("label_map.txt").read_text()
    else:
        text = Path(path).read_text()
    mapping: dict[str, ClassLabel] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"label map line {lineno}: expected 'code = class'")
        code, name = (part.strip() for part in line.split("=", 1))
        if not code.isdigit():
            raise ValueError(f"label map line {lineno}: SNOMED code must be numeric")
        mapping[code] = ClassLabel.parse(name)
    return mapping


def map_labels(dx_codes, mapping: dict[str, ClassLabel]) -> ClassLabel:
    """Return the single class a record's diagnosis codes map to.

    Raises ``MultiLabel`` when two or more relevant codes are present and
    ``NoRelevantLabel`` when none are.
    """
    relevant = {c.strip() for c in dx_codes} & mapping.keys()
    if not relevant:
        raise NoRelevantLabel("no diagnosis code maps to the five classes")
    if len(relevant) > 1:
        raise MultiLabel(f"{len(relevant)} mapped diagnosis codes")
    return mapping[relevant.pop()]
