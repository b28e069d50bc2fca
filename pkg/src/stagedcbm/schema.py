"""Declarative catalog of segmentation and property concepts.

A schema document (YAML) lists, in order: segmentation concept names
(index 0 is background), property concepts with their kind and anatomy
grouping, class labels, and the per-anatomy rule table that decides
"<anatomy> SP" versus "<anatomy> NSP" from ground-truth concept values.
Schemas are data: the same code serves both the bundled clinical
transcription (documentation and arithmetic tests) and the synthetic
geo-scan benchmark.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .validation import ValidationError

BINARY_LOW = 0.01
BINARY_HIGH = 0.99


@dataclass(frozen=True)
class PropertyConcept:
    name: str
    kind: str                    # "binary" | "scalar"
    anatomy: str
    depends_on: tuple            # segmentation concept names, non-empty


@dataclass(frozen=True)
class RulePredicate:
    concept: str
    op: str                      # "ge" | "le" | "is_true" | "is_false"
    value: float = 0.5

    def holds(self, x: float) -> bool:
        if self.op == "ge":
            return x >= self.value
        if self.op == "le":
            return x <= self.value
        if self.op == "is_true":
            return x > 0.5
        if self.op == "is_false":
            return x <= 0.5
        raise ValueError(f"unknown rule op {self.op!r}")


@dataclass(frozen=True)
class ConceptSchema:
    name: str
    segmentation_concepts: tuple
    property_concepts: tuple     # of PropertyConcept
    anatomies: tuple
    class_labels: tuple
    rules: dict                  # anatomy -> tuple of RulePredicate
    _prop_index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        object.__setattr__(
            self, "_prop_index",
            {p.name: i for i, p in enumerate(self.property_concepts)})

    # -- sizes ---------------------------------------------------------------

    @property
    def n_segmentation(self):
        return len(self.segmentation_concepts)

    @property
    def n_properties(self):
        return len(self.property_concepts)

    @property
    def n_classes(self):
        return len(self.class_labels)

    # -- lookups -------------------------------------------------------------

    def property_index(self, name):
        return self._prop_index[name]

    def segmentation_index(self, name):
        return self.segmentation_concepts.index(name)

    def class_index(self, label):
        return self.class_labels.index(label)

    def anatomy_of_label(self, label):
        return label.rsplit(" ", 1)[0]

    @property
    def binary_indices(self):
        return np.array([i for i, p in enumerate(self.property_concepts)
                         if p.kind == "binary"], dtype=int)

    @property
    def scalar_indices(self):
        return np.array([i for i, p in enumerate(self.property_concepts)
                         if p.kind == "scalar"], dtype=int)

    def applicability(self, anatomy) -> np.ndarray:
        """Boolean mask over property concepts for one sample's anatomy."""
        if anatomy not in self.anatomies:
            raise KeyError(f"unknown anatomy {anatomy!r}")
        return np.array([p.anatomy == anatomy for p in self.property_concepts])

    def visibility_pairs(self):
        """(property index, segmentation index) for per-organ scalar scores.

        A visibility concept is a scalar concept tied to exactly one
        segmentation concept; these are the concepts the rule-based
        zeroing step may force to 0.
        """
        out = []
        for i, p in enumerate(self.property_concepts):
            if p.kind == "scalar" and len(p.depends_on) == 1:
                out.append((i, self.segmentation_index(p.depends_on[0])))
        return out


@dataclass
class ConceptVector:
    """Length-d property values plus the sample's applicability mask.

    Inapplicable entries are exactly 0; applicable binary entries hold the
    smoothed codes 0.01/0.99 once :func:`smooth_labels` has run.
    """

    values: np.ndarray
    applicability: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.applicability = np.asarray(self.applicability, dtype=bool)
        if self.values.shape != self.applicability.shape:
            raise ValidationError(["values/applicability length mismatch"])
        if np.any(self.values[~self.applicability] != 0.0):
            raise ValidationError(["inapplicable concept entries must be 0"])


def load_schema(path) -> ConceptSchema:
    """Parse and validate a schema document; raises with all violations."""
    doc = yaml.safe_load(Path(path).read_text())
    problems = []

    seg = tuple(doc.get("segmentation_concepts") or ())
    if not seg:
        problems.append("no segmentation concepts")
    elif seg[0] != "background":
        problems.append("segmentation concept 0 must be 'background'")
    if len(set(seg)) != len(seg):
        problems.append("duplicate segmentation concept names")

    anatomies = tuple(doc.get("anatomies") or ())
    raw_props = doc.get("property_concepts") or []
    props = []
    seen = set()
    for entry in raw_props:
        name = entry.get("name", "<unnamed>")
        if name in seen:
            problems.append(f"duplicate property concept name {name!r}")
        seen.add(name)
        kind = entry.get("kind")
        if kind not in ("binary", "scalar"):
            problems.append(f"{name}: unknown kind {kind!r}")
        deps = tuple(entry.get("depends_on") or ())
        if not deps:
            problems.append(f"{name}: empty dependency list")
        for d in deps:
            if d not in seg:
                problems.append(f"{name}: unknown segmentation concept {d!r}")
        anatomy = entry.get("anatomy")
        if anatomy not in anatomies:
            problems.append(f"{name}: unknown anatomy {anatomy!r}")
        props.append(PropertyConcept(name, kind or "scalar", anatomy or "", deps))

    labels = tuple(doc.get("class_labels") or ())
    expected = tuple(f"{a} {q}" for a in anatomies for q in ("SP", "NSP"))
    if sorted(labels) != sorted(expected):
        problems.append(f"class labels must be anatomy x SP/NSP, got {labels}")

    prop_names = {p.name: p for p in props}
    rules = {}
    for anatomy in anatomies:
        entries = (doc.get("rules") or {}).get(anatomy)
        if not entries:
            problems.append(f"rule table missing anatomy {anatomy!r}")
            continue
        preds = []
        for r in entries:
            cname = r.get("concept")
            if cname not in prop_names:
                problems.append(f"rule for {anatomy}: unknown concept {cname!r}")
                continue
            if prop_names[cname].anatomy != anatomy:
                problems.append(
                    f"rule for {anatomy}: concept {cname!r} belongs to "
                    f"{prop_names[cname].anatomy!r}")
            op = r.get("op")
            if op not in ("ge", "le", "is_true", "is_false"):
                problems.append(f"rule for {anatomy}: unknown op {op!r}")
                continue
            preds.append(RulePredicate(cname, op, float(r.get("value", 0.5))))
        rules[anatomy] = tuple(preds)

    if problems:
        raise ValidationError(problems)

    return ConceptSchema(
        name=str(doc.get("name", Path(path).stem)),
        segmentation_concepts=seg,
        property_concepts=tuple(props),
        anatomies=anatomies,
        class_labels=labels,
        rules=rules,
    )


def smooth_labels(raw, applicability, schema: ConceptSchema) -> ConceptVector:
    """Smooth applicable binary labels to 0.01/0.99; padding stays 0.

    Idempotent: already-smoothed binaries snap back to the same codes.
    Applicable scalars pass through unchanged and must lie in [0, 1].
    """
    raw = np.asarray(raw, dtype=np.float64)
    app = np.asarray(applicability, dtype=bool)
    out = np.zeros_like(raw)
    binary = np.zeros(len(raw), dtype=bool)
    binary[schema.binary_indices] = True

    scalars = app & ~binary
    if np.any((raw[scalars] < 0.0) | (raw[scalars] > 1.0)):
        raise ValidationError(["applicable scalar concept outside [0, 1]"])
    out[scalars] = raw[scalars]
    b = app & binary
    out[b] = np.where(raw[b] > 0.5, BINARY_HIGH, BINARY_LOW)
    return ConceptVector(out, app)


def split_binary_scalar(vector, schema: ConceptSchema):
    """Partition a length-d value array into (binary, scalar, index maps)."""
    values = vector.values if isinstance(vector, ConceptVector) else np.asarray(vector)
    bi = schema.binary_indices
    si = schema.scalar_indices
    return values[..., bi], values[..., si], (bi, si)


def recombine(binary_part, scalar_part, index_maps, d=None):
    bi, si = index_maps
    d = d if d is not None else len(bi) + len(si)
    out = np.zeros(binary_part.shape[:-1] + (d,), dtype=np.float64)
    out[..., bi] = binary_part
    out[..., si] = scalar_part
    return out


def apply_rules(schema: ConceptSchema, concepts, anatomy) -> str:
    """Label oracle: "<anatomy> SP" iff every rule predicate holds.

    Expects ground-truth (smoothed) concept values; deterministic and total
    over anatomies in the schema.
    """
    if anatomy not in schema.anatomies:
        raise KeyError(f"unknown anatomy {anatomy!r}")
    values = concepts.values if isinstance(concepts, ConceptVector) else np.asarray(concepts)
    ok = all(pred.holds(float(values[schema.property_index(pred.concept)]))
             for pred in schema.rules[anatomy])
    return f"{anatomy} {'SP' if ok else 'NSP'}"
