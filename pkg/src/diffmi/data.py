"""Probe records, prediction tables, and the attack configuration.

Probe records travel as JSON Lines, predictions as CSV.  Both formats
tolerate leading ``#`` comment lines, which is where pipeline stages put
the config digest of the run that produced the file.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from diffmi.errors import UpstreamFileError, ValidationError
from diffmi.kernels import KernelSpec
from diffmi.projection import ProjectionSpec

SIMPLEX_TOL = 1e-6
PREDICTION_HEADER = ("id", "predicted_member", "variant")
VARIANTS = ("diff-w/", "diff-w/o", "1class")
MODES = ("batch", "incremental")


@dataclass(frozen=True)
class ProbeRecord:
    """One probed sample: its output distribution and optional labels.

    ``is_member`` is ground truth for evaluation only; attacks receive
    datasets with it stripped (see :meth:`ProbeDataset.blind`).
    """

    id: str
    probs: tuple
    true_label: Optional[int] = None
    is_member: Optional[bool] = None

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probs)
        object.__setattr__(self, "probs", probs)
        if not probs:
            raise ValidationError(f"record {self.id!r}: probs is empty")
        if any(not math.isfinite(p) or p < 0.0 or p > 1.0 for p in probs):
            raise ValidationError(f"record {self.id!r}: probability outside [0, 1]")
        total = math.fsum(probs)
        if abs(total - 1.0) > SIMPLEX_TOL:
            raise ValidationError(f"record {self.id!r}: probabilities sum to {total:.9g}, not 1")
        if self.true_label is not None:
            if isinstance(self.true_label, bool) or int(self.true_label) != self.true_label:
                raise ValidationError(f"record {self.id!r}: true_label must be an integer")
            if not 0 <= self.true_label < len(probs):
                raise ValidationError(f"record {self.id!r}: true_label {self.true_label} not in [0, {len(probs)})")
            object.__setattr__(self, "true_label", int(self.true_label))
        if self.is_member is not None and not isinstance(self.is_member, bool):
            raise ValidationError(f"record {self.id!r}: is_member must be a boolean")

    def to_json(self) -> dict:
        out = {"id": self.id, "probs": list(self.probs)}
        if self.true_label is not None:
            out["true_label"] = self.true_label
        if self.is_member is not None:
            out["is_member"] = self.is_member
        return out


class ProbeDataset:
    """Ordered, immutable collection of records sharing one class count."""

    def __init__(self, records: Iterable[ProbeRecord], num_classes: Optional[int] = None):
        self.records = tuple(records)
        dims = {len(r.probs) for r in self.records}
        if num_classes is None:
            if len(dims) > 1:
                raise ValidationError(f"records disagree on the class count: {sorted(dims)}")
            num_classes = dims.pop() if dims else 0
        elif dims - {num_classes}:
            raise ValidationError(f"records have class counts {sorted(dims)}, expected {num_classes}")
        self.num_classes = num_classes
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            seen, dup = set(), None
            for i in ids:
                if i in seen:
                    dup = i
                    break
                seen.add(i)
            raise ValidationError(f"duplicate record id {dup!r}")
        self._index = {r.id: i for i, r in enumerate(self.records)}

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def __eq__(self, other):
        return (
            isinstance(other, ProbeDataset)
            and self.num_classes == other.num_classes
            and self.records == other.records
        )

    def __repr__(self):
        return f"ProbeDataset(n={len(self)}, num_classes={self.num_classes})"

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def probs_matrix(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, self.num_classes))
        return np.array([r.probs for r in self.records], dtype=np.float64)

    def true_labels(self) -> list[Optional[int]]:
        return [r.true_label for r in self.records]

    @property
    def has_true_labels(self) -> bool:
        return bool(self.records) and all(r.true_label is not None for r in self.records)

    def get(self, record_id: str) -> ProbeRecord:
        return self.records[self._index[record_id]]

    def subset(self, ids: Iterable[str]) -> "ProbeDataset":
        return ProbeDataset([self.get(i) for i in ids], self.num_classes)

    def blind(self) -> "ProbeDataset":
        """Copy with ground-truth membership removed: the only view attacks get."""
        return ProbeDataset(
            [ProbeRecord(r.id, r.probs, r.true_label, None) for r in self.records], self.num_classes
        )

    def without_labels(self) -> "ProbeDataset":
        """Copy with true labels and membership removed (blind threat model)."""
        return ProbeDataset([ProbeRecord(r.id, r.probs) for r in self.records], self.num_classes)

    def ground_truth(self) -> dict[str, bool]:
        missing = [r.id for r in self.records if r.is_member is None]
        if missing:
            raise ValidationError(f"{len(missing)} records lack ground truth, e.g. {missing[0]!r}")
        return {r.id: r.is_member for r in self.records}

    def concat(self, other: "ProbeDataset") -> "ProbeDataset":
        return ProbeDataset(self.records + other.records, self.num_classes or other.num_classes)


@dataclass(frozen=True)
class MembershipPrediction:
    id: str
    predicted_member: bool
    variant: str
    meta: Mapping = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class AttackConfig:
    projection: ProjectionSpec = field(default_factory=ProjectionSpec)
    kernel: KernelSpec = field(default_factory=KernelSpec)
    batch_size: int = 20
    mode: str = "batch"
    variant: str = "diff-w/"
    move_tolerance: float = 0.0
    max_iterations: int = 1000

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.mode not in MODES:
            raise ValidationError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 2:
            raise ValidationError(f"batch_size must be an integer >= 2, got {self.batch_size}")
        if not self.move_tolerance >= 0:
            raise ValidationError(f"move_tolerance must be >= 0, got {self.move_tolerance}")
        if int(self.max_iterations) != self.max_iterations or self.max_iterations < 1:
            raise ValidationError(f"max_iterations must be a positive integer, got {self.max_iterations}")

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "AttackConfig":
        """Defaults per variant: batch 20 for diff-w/, 1,000 for diff-w/o."""
        batch = {"diff-w/": 20, "diff-w/o": 1000, "1class": 1000}[variant] if variant in VARIANTS else 20
        overrides.setdefault("batch_size", batch)
        return cls(variant=variant, **overrides)

    def to_dict(self) -> dict:
        return {
            "projection": self.projection.to_dict(),
            "kernel": self.kernel.to_dict(),
            "batch_size": self.batch_size,
            "mode": self.mode,
            "variant": self.variant,
            "move_tolerance": self.move_tolerance,
            "max_iterations": self.max_iterations,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        if "projection" in d:
            d["projection"] = ProjectionSpec.from_dict(d["projection"])
        if "kernel" in d:
            d["kernel"] = KernelSpec.from_dict(d["kernel"])
        return cls(**d)


def _open_for_read(path):
    path = Path(path)
    if not path.is_file():
        raise UpstreamFileError(f"{path}: no such file")
    return path.open("r", encoding="utf-8", newline="")


def read_comment_header(path) -> dict[str, str]:
    """``# key=value`` lines at the top of a pipeline file."""
    out = {}
    with _open_for_read(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition("=")
            out[key.strip()] = value.strip()
    return out


def _comment_lines(header: Optional[Mapping[str, str]]) -> str:
    if not header:
        return ""
    return "".join(f"# {k}={v}\n" for k, v in header.items())


def load_probe_records(path, expected_classes: Optional[int] = None) -> ProbeDataset:
    records = []
    with _open_for_read(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or "id" not in obj or "probs" not in obj:
                raise ValidationError(f"{path}:{lineno}: record needs 'id' and 'probs'")
            unknown = set(obj) - {"id", "probs", "true_label", "is_member"}
            if unknown:
                raise ValidationError(f"{path}:{lineno}: unknown fields {sorted(unknown)}")
            if not isinstance(obj["probs"], list):
                raise ValidationError(f"{path}:{lineno}: probs must be a list")
            try:
                rec = ProbeRecord(
                    str(obj["id"]), tuple(obj["probs"]), obj.get("true_label"), obj.get("is_member")
                )
            except (ValidationError, TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            if expected_classes is not None and len(rec.probs) != expected_classes:
                raise ValidationError(
                    f"{path}:{lineno}: record has {len(rec.probs)} classes, expected {expected_classes}"
                )
            if records and len(rec.probs) != len(records[0].probs):
                raise ValidationError(
                    f"{path}:{lineno}: dimension mismatch, {len(rec.probs)} classes "
                    f"after {len(records[0].probs)} on earlier lines"
                )
            records.append(rec)
    try:
        return ProbeDataset(records, expected_classes)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def save_probe_records(dataset: ProbeDataset, path, header: Optional[Mapping[str, str]] = None) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(_comment_lines(header))
        for rec in dataset:
            fh.write(json.dumps(rec.to_json(), separators=(", ", ": ")) + "\n")


def save_predictions(preds: Sequence[MembershipPrediction], path, header: Optional[Mapping[str, str]] = None) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(_comment_lines(header))
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PREDICTION_HEADER)
        for p in preds:
            writer.writerow([p.id, "true" if p.predicted_member else "false", p.variant])


def load_predictions(path) -> list[MembershipPrediction]:
    with _open_for_read(path) as fh:
        lines = [line for line in fh if not line.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader, None)
    if header is None or tuple(header) != PREDICTION_HEADER:
        raise ValidationError(f"{path}: expected header {','.join(PREDICTION_HEADER)}, got {header}")
    out = []
    for lineno, row in enumerate(reader, start=2):
        if len(row) != 3:
            raise ValidationError(f"{path}: row {lineno} has {len(row)} columns")
        flag = row[1].strip().lower()
        if flag not in ("true", "false", "1", "0"):
            raise ValidationError(f"{path}: row {lineno}: bad predicted_member {row[1]!r}")
        out.append(MembershipPrediction(row[0], flag in ("true", "1"), row[2]))
    return out
