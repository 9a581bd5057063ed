"""Cohort manifests, label derivation, leakage-free splitting, class weights.

Task labels are binary with explicit missingness: ``1``, ``0`` or ``None``.
Missing labels are first-class values; they are masked out of losses and
metrics downstream, never imputed.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace

import numpy as np

TASKS = ("hba1c", "kidney", "multi")
SPLITS = ("train", "val", "test")

MANIFEST_COLUMNS = (
    "image_path", "subject_id", "visit_id",
    "hba1c_pct", "creatinine", "urea", "proteinuria", "organ_flags",
    "label_hba1c", "label_kidney", "label_multi",
)
_KEY_COLUMNS = ("image_path", "subject_id", "visit_id")
_LABEL_COLUMNS = ("label_hba1c", "label_kidney", "label_multi")
_RAW_COLUMNS = ("hba1c_pct", "creatinine", "urea", "proteinuria", "organ_flags")


class ManifestError(ValueError):
    pass


class MissingColumn(ManifestError):
    pass


class MalformedRow(ManifestError):
    pass


class DuplicatePath(ManifestError):
    pass


class TooFewSubjects(ValueError):
    pass


class NoLabeledSamples(ValueError):
    def __init__(self, task: str):
        super().__init__(f"no labeled training samples for task {task!r}")
        self.task = task


@dataclass(frozen=True)
class ImageRecord:
    image_path: str
    subject_id: str
    visit_id: str
    label_hba1c: int | None
    label_kidney: int | None
    label_multi: int | None

    def label(self, task: str) -> int | None:
        return getattr(self, f"label_{task}")

    def with_labels(self, labels: tuple[int | None, int | None, int | None]) -> "ImageRecord":
        return replace(self, label_hba1c=labels[0], label_kidney=labels[1], label_multi=labels[2])


@dataclass(frozen=True)
class LabelThresholds:
    """Cutoffs for deriving task labels from raw clinical fields.

    The glycaemic cutoff (7.0%, boundary inclusive) is the only clinically
    sourced value; kidney cutoffs are configurable placeholders and must not
    be read as validated clinical thresholds.
    """

    hba1c_pct: float = 7.0
    creatinine: float = 104.0
    urea: float = 8.2
    min_abnormal_flags: int = 2


def derive_labels(raw: dict, thresholds: LabelThresholds = LabelThresholds()):
    """Derive (hba1c, kidney, multi) labels from raw clinical fields.

    ``raw`` maps the raw column names to floats or None. A rule with any
    missing input yields a missing label; proteinuria counts as abnormal when
    its flag is nonzero; multi flags abnormality when `organ_flags` reaches
    the configured minimum count.
    """
    hba1c_pct = raw.get("hba1c_pct")
    label_hba1c = None if hba1c_pct is None else int(hba1c_pct >= thresholds.hba1c_pct)

    creat, urea, prot = raw.get("creatinine"), raw.get("urea"), raw.get("proteinuria")
    if creat is None or urea is None or prot is None:
        label_kidney = None
    else:
        label_kidney = int(creat > thresholds.creatinine or urea > thresholds.urea or prot != 0)

    flags = raw.get("organ_flags")
    label_multi = None if flags is None else int(flags >= thresholds.min_abnormal_flags)
    return label_hba1c, label_kidney, label_multi


def _parse_label_cell(value: str, column: str, line: int) -> int | None:
    value = value.strip()
    if value == "":
        return None
    if value not in ("0", "1"):
        raise MalformedRow(f"line {line}: {column} must be 0, 1 or empty, got {value!r}")
    return int(value)


def _parse_float_cell(value: str, column: str, line: int) -> float | None:
    value = value.strip()
    if value == "":
        return None
    try:
        return float(value)
    except ValueError:
        raise MalformedRow(f"line {line}: {column} is not numeric: {value!r}")


def parse_manifest(text: str, thresholds: LabelThresholds = LabelThresholds()) -> list[ImageRecord]:
    """Parse a cohort manifest CSV into image records.

    Requires the key columns plus either the three label columns or the raw
    clinical columns (labels are then derived). Empty label cells parse as
    missing. Duplicate image paths, wrong field counts and unparsable cells
    are errors.
    """
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise MissingColumn("empty manifest")
    header = [h.strip() for h in header]

    for col in _KEY_COLUMNS:
        if col not in header:
            raise MissingColumn(f"manifest missing required column {col!r}")
    have_labels = all(c in header for c in _LABEL_COLUMNS)
    have_raw = all(c in header for c in _RAW_COLUMNS)
    if not have_labels and not have_raw:
        raise MissingColumn("manifest needs label_* columns or the raw clinical columns")

    idx = {c: header.index(c) for c in header}
    records: list[ImageRecord] = []
    seen: set[str] = set()
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise MalformedRow(f"line {line_no}: expected {len(header)} fields, got {len(row)}")
        path = row[idx["image_path"]].strip()
        subject = row[idx["subject_id"]].strip()
        visit = row[idx["visit_id"]].strip()
        if not subject:
            raise MalformedRow(f"line {line_no}: empty subject_id")
        if path in seen:
            raise DuplicatePath(f"line {line_no}: duplicate image_path {path!r}")
        seen.add(path)

        if have_labels:
            labels = tuple(_parse_label_cell(row[idx[c]], c, line_no) for c in _LABEL_COLUMNS)
        else:
            raw = {c: _parse_float_cell(row[idx[c]], c, line_no) for c in _RAW_COLUMNS}
            labels = derive_labels(raw, thresholds)
        records.append(ImageRecord(path, subject, visit, *labels))
    return records


def write_manifest(path, records: list[ImageRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            labels = ["" if r.label(t) is None else str(r.label(t)) for t in TASKS]
            writer.writerow([r.image_path, r.subject_id, r.visit_id, "", "", "", "", ""] + labels)


def read_manifest(path) -> list[ImageRecord]:
    with open(path, "r", newline="") as fh:
        return parse_manifest(fh.read())


# ---------------------------------------------------------------------------
# subject-level splitting


def split_by_subject(records: list[ImageRecord],
                     fractions: tuple[float, float, float] = (0.70, 0.15, 0.15),
                     seed: int = 42) -> dict[str, str]:
    """Partition subjects into train/val/test, stratified and leakage-free.

    Greedy assignment over a seeded shuffle of subjects: each subject goes to
    the split with the largest remaining image deficit, softened by a score
    that favours keeping every task's positive prevalence near the overall
    prevalence. All images of a subject land in one split by construction.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be positive and sum to 1, got {fractions}")

    subjects: dict[str, list[ImageRecord]] = {}
    for r in records:
        subjects.setdefault(r.subject_id, []).append(r)
    if len(subjects) < 3:
        raise TooFewSubjects(f"need >= 3 subjects, got {len(subjects)}")

    subject_ids = sorted(subjects)
    rng = np.random.default_rng(seed)
    order = [subject_ids[i] for i in rng.permutation(len(subject_ids))]

    total_images = len(records)
    # per-subject image count and per-task (labeled, positive) image counts
    sub_n = {s: len(recs) for s, recs in subjects.items()}
    sub_lab = {s: [sum(r.label(t) is not None for r in recs) for t in TASKS]
               for s, recs in subjects.items()}
    sub_pos = {s: [sum(r.label(t) == 1 for r in recs) for t in TASKS]
               for s, recs in subjects.items()}
    overall_lab = [sum(sub_lab[s][k] for s in subject_ids) for k in range(3)]
    overall_pos = [sum(sub_pos[s][k] for s in subject_ids) for k in range(3)]
    overall_prev = [overall_pos[k] / overall_lab[k] if overall_lab[k] else 0.0 for k in range(3)]

    assigned_n = [0, 0, 0]
    assigned_lab = [[0, 0, 0] for _ in range(3)]
    assigned_pos = [[0, 0, 0] for _ in range(3)]
    assignment: dict[str, str] = {}

    for subject in order:
        scores = []
        for i in range(3):
            deficit = fractions[i] - assigned_n[i] / total_images
            strat = 0.0
            for k in range(3):
                if overall_lab[k] == 0 or sub_lab[subject][k] == 0:
                    continue
                lab = assigned_lab[i][k] + sub_lab[subject][k]
                pos = assigned_pos[i][k] + sub_pos[subject][k]
                strat -= abs(pos / lab - overall_prev[k])
            scores.append(deficit + 0.25 * strat / 3.0)
        best = int(np.argmax(scores))
        assignment[subject] = SPLITS[best]
        assigned_n[best] += sub_n[subject]
        for k in range(3):
            assigned_lab[best][k] += sub_lab[subject][k]
            assigned_pos[best][k] += sub_pos[subject][k]
    return assignment


def write_split_csv(path, assignment: dict[str, str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject_id", "split"])
        for subject in sorted(assignment):
            writer.writerow([subject, assignment[subject]])


def read_split_csv(path) -> dict[str, str]:
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["subject_id", "split"]:
            raise ManifestError(f"unexpected split header {header}")
        out = {}
        for row in reader:
            if not row:
                continue
            if len(row) != 2 or row[1] not in SPLITS:
                raise ManifestError(f"bad split row {row}")
            out[row[0]] = row[1]
        return out


def select_split(records: list[ImageRecord], assignment: dict[str, str],
                 split: str) -> list[ImageRecord]:
    return [r for r in records if assignment.get(r.subject_id) == split]


# ---------------------------------------------------------------------------
# class weights


@dataclass(frozen=True)
class ClassWeights:
    """Per-task (negative, positive) loss weights, N / (2 * N_class).

    ``zero_class`` flags tasks where one class is absent in training; that
    class's weight is 0 and its loss contribution vanishes.
    """

    weights: dict[str, tuple[float, float]]
    zero_class: dict[str, bool]

    def pair(self, task: str) -> tuple[float, float]:
        return self.weights[task]


def compute_class_weights(train_records: list[ImageRecord]) -> ClassWeights:
    weights = {}
    zero = {}
    for task in TASKS:
        labels = [r.label(task) for r in train_records if r.label(task) is not None]
        n = len(labels)
        if n == 0:
            raise NoLabeledSamples(task)
        n_pos = sum(labels)
        n_neg = n - n_pos
        w0 = n / (2.0 * n_neg) if n_neg else 0.0
        w1 = n / (2.0 * n_pos) if n_pos else 0.0
        weights[task] = (w0, w1)
        zero[task] = n_neg == 0 or n_pos == 0
    return ClassWeights(weights, zero)


def shuffle_subject_labels(records: list[ImageRecord], seed: int) -> list[ImageRecord]:
    """Permute label tuples across subjects (images keep subject grouping).

    Used to train the label-shuffled control model: any attention/label
    coupling surviving this shuffle is artefactual.
    """
    subject_ids = sorted({r.subject_id for r in records})
    labels = {}
    for r in records:
        labels.setdefault(r.subject_id, (r.label_hba1c, r.label_kidney, r.label_multi))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(subject_ids))
    remap = {subject_ids[i]: labels[subject_ids[perm[i]]] for i in range(len(subject_ids))}
    return [r.with_labels(remap[r.subject_id]) for r in records]
