"""Dataset schema, JSON Lines ingestion, preprocessing and split planning.

A dataset file is UTF-8 JSON Lines (gzip when the name ends in ``.gz``).
Line 1 is a header::

    {"format_version": 1, "dim_psi": 49, "dim_rho": 8192, "dim_xi": 2622,
     "labels": ["ATT", "GIVEUP", "GUESS", "NOTR", "SHINT", "SKIP", "SOF"]}

and every further line is one labeled problem segment::

    {"user_id": "u01", "session_id": "s1", "problem_index": 0,
     "outcome": "SOF", "fps": 3.0,
     "frames": [{"psi": [...], "rho": [...], "xi": [...]}, ...]}

``rho`` and ``xi`` are optional per frame.
"""
from __future__ import annotations

import dataclasses
import gzip
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import LabelError, ParseError, SchemaError, UsageError

FORMAT_VERSION = 1
STD_FLOOR = 1e-8

# default psi layout (documentation only; the loader treats psi as opaque)
PSI_LAYOUT = (
    ("gaze_vectors", 6),
    ("gaze_angles", 2),
    ("head_position", 3),
    ("head_rotation", 3),
    ("au_intensity", 17),
    ("au_presence", 18),
)


class OutcomeLabel(IntEnum):
    ATT = 0
    GIVEUP = 1
    GUESS = 2
    NOTR = 3
    SHINT = 4
    SKIP = 5
    SOF = 6

    @classmethod
    def parse(cls, name: str) -> "OutcomeLabel":
        try:
            return cls[name]
        except KeyError:
            raise LabelError(f"unknown outcome label {name!r}") from None


LABEL_NAMES = [lab.name for lab in OutcomeLabel]


@dataclass
class DatasetHeader:
    dim_psi: int = 49
    dim_rho: int = 8192
    dim_xi: int = 2622
    labels: list = field(default_factory=lambda: list(LABEL_NAMES))
    format_version: int = FORMAT_VERSION

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "dim_psi": self.dim_psi,
            "dim_rho": self.dim_rho,
            "dim_xi": self.dim_xi,
            "labels": list(self.labels),
        }


@dataclass(frozen=True)
class FrameFeatures:
    psi: np.ndarray
    rho: np.ndarray | None = None
    xi: np.ndarray | None = None


@dataclass(eq=False)
class Segment:
    """One labeled problem attempt.

    Frames are stored stacked: ``psi`` is ``T x dim_psi``; ``rho``/``xi`` are
    ``T x dim`` or None. A frame without an embedding has a NaN row there.
    """

    user_id: str
    session_id: str
    problem_index: int
    label: int
    fps: float
    psi: np.ndarray
    rho: np.ndarray | None = None
    xi: np.ndarray | None = None

    def __post_init__(self):
        if self.psi.ndim != 2 or self.psi.shape[0] == 0:
            raise SchemaError(f"segment {self.segment_id}: empty frame list")

    @property
    def segment_id(self) -> str:
        return f"{self.user_id}/{self.session_id}/{self.problem_index}"

    @property
    def n_frames(self) -> int:
        return self.psi.shape[0]

    @property
    def frames(self) -> list[FrameFeatures]:
        def row(a, t):
            if a is None or np.isnan(a[t, 0]):
                return None
            return a[t]

        return [FrameFeatures(self.psi[t], row(self.rho, t), row(self.xi, t)) for t in range(self.n_frames)]

    def replace(self, **changes) -> "Segment":
        return dataclasses.replace(self, **changes)

    def same_as(self, other: "Segment") -> bool:
        def eq(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b, equal_nan=True)

        return (
            (self.user_id, self.session_id, self.problem_index, self.label, self.fps)
            == (other.user_id, other.session_id, other.problem_index, other.label, other.fps)
            and eq(self.psi, other.psi) and eq(self.rho, other.rho) and eq(self.xi, other.xi)
        )


# --------------------------------------------------------------------------
# I/O

def _open_text(path: Path, mode: str):
    if path.suffix == ".gz":
        if "w" in mode:
            raw = gzip.GzipFile(filename="", mode="wb", fileobj=open(path, "wb"), mtime=0)
            return io.TextIOWrapper(raw, encoding="utf-8", newline="\n")
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, mode, encoding="utf-8", newline="\n" if "w" in mode else None)


def _parse_header(obj, lineno: int) -> DatasetHeader:
    if not isinstance(obj, dict):
        raise ParseError(f"line {lineno}: header must be a JSON object")
    if obj.get("format_version") != FORMAT_VERSION:
        raise SchemaError(f"line {lineno}: unsupported format_version {obj.get('format_version')!r}")
    dims = {}
    for key in ("dim_psi", "dim_rho", "dim_xi"):
        v = obj.get(key)
        if not isinstance(v, int) or v <= 0:
            raise SchemaError(f"line {lineno}: header field {key} must be a positive integer")
        dims[key] = v
    labels = obj.get("labels", LABEL_NAMES)
    if list(labels) != LABEL_NAMES:
        raise SchemaError(f"line {lineno}: header labels {labels} do not match {LABEL_NAMES}")
    return DatasetHeader(**dims, labels=list(labels))


def _stack(frames, key, dim, lineno, seg_id, required):
    rows = []
    present = False
    for t, fr in enumerate(frames):
        v = fr.get(key)
        if v is None:
            if required:
                raise SchemaError(f"line {lineno}: segment {seg_id} frame {t} has no {key}")
            rows.append(None)
            continue
        if not isinstance(v, list) or len(v) != dim:
            n = len(v) if isinstance(v, list) else type(v).__name__
            raise SchemaError(f"line {lineno}: segment {seg_id} frame {t}: {key} has length {n}, header says {dim}")
        present = True
        rows.append(v)
    if not present:
        return None
    try:
        out = np.array([r if r is not None else [np.nan] * dim for r in rows], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"line {lineno}: segment {seg_id}: non-numeric {key} values") from exc
    valid = [t for t, r in enumerate(rows) if r is not None]
    if not np.all(np.isfinite(out[valid])):
        raise SchemaError(f"line {lineno}: segment {seg_id}: non-finite {key} values")
    return out


def _parse_record(obj, header: DatasetHeader, lineno: int) -> Segment:
    if not isinstance(obj, dict):
        raise ParseError(f"line {lineno}: record must be a JSON object")
    for key in ("user_id", "session_id", "problem_index", "outcome", "fps", "frames"):
        if key not in obj:
            raise SchemaError(f"line {lineno}: missing field {key!r}")
    user, session, pidx = obj["user_id"], obj["session_id"], obj["problem_index"]
    if not isinstance(user, str) or not isinstance(session, str):
        raise SchemaError(f"line {lineno}: user_id and session_id must be strings")
    if not isinstance(pidx, int) or isinstance(pidx, bool) or pidx < 0:
        raise SchemaError(f"line {lineno}: problem_index must be a nonnegative integer")
    seg_id = f"{user}/{session}/{pidx}"
    fps = obj["fps"]
    if not isinstance(fps, (int, float)) or isinstance(fps, bool) or not fps > 0:
        raise SchemaError(f"line {lineno}: segment {seg_id}: fps must be positive")
    if not isinstance(obj["outcome"], str):
        raise LabelError(f"line {lineno}: segment {seg_id}: outcome must be a label name")
    try:
        label = OutcomeLabel.parse(obj["outcome"])
    except LabelError as exc:
        raise LabelError(f"line {lineno}: segment {seg_id}: {exc}") from None
    frames = obj["frames"]
    if not isinstance(frames, list) or not frames:
        raise SchemaError(f"line {lineno}: segment {seg_id} has an empty frame list")
    if not all(isinstance(fr, dict) for fr in frames):
        raise SchemaError(f"line {lineno}: segment {seg_id}: frames must be objects")
    psi = _stack(frames, "psi", header.dim_psi, lineno, seg_id, required=True)
    rho = _stack(frames, "rho", header.dim_rho, lineno, seg_id, required=False)
    xi = _stack(frames, "xi", header.dim_xi, lineno, seg_id, required=False)
    return Segment(user, session, pidx, int(label), float(fps), psi, rho, xi)


def load_dataset(path) -> tuple[DatasetHeader, list[Segment]]:
    """Read and validate a dataset file. Any bad record aborts the load."""
    path = Path(path)
    segments: list[Segment] = []
    seen: set[str] = set()
    header = None
    with _open_text(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            if header is None:
                header = _parse_header(obj, lineno)
                continue
            seg = _parse_record(obj, header, lineno)
            if seg.segment_id in seen:
                raise SchemaError(f"line {lineno}: duplicate problem_index in segment {seg.segment_id}")
            seen.add(seg.segment_id)
            segments.append(seg)
    if header is None:
        raise ParseError(f"{path}: missing header line")
    return header, segments


def _rows(a, t):
    if a is None or np.isnan(a[t, 0]):
        return None
    return a[t].tolist()


def segment_record(seg: Segment) -> dict:
    frames = []
    for t in range(seg.n_frames):
        fr = {"psi": seg.psi[t].tolist()}
        for key, arr in (("rho", seg.rho), ("xi", seg.xi)):
            row = _rows(arr, t)
            if row is not None:
                fr[key] = row
        frames.append(fr)
    return {
        "user_id": seg.user_id,
        "session_id": seg.session_id,
        "problem_index": seg.problem_index,
        "outcome": OutcomeLabel(seg.label).name,
        "fps": seg.fps,
        "frames": frames,
    }


def write_dataset(path, header: DatasetHeader, segments: Iterable[Segment]) -> None:
    path = Path(path)
    with _open_text(path, "w") as fh:
        fh.write(json.dumps(header.to_dict()) + "\n")
        for seg in segments:
            fh.write(json.dumps(segment_record(seg)) + "\n")


# --------------------------------------------------------------------------
# preprocessing

def downsample(segment: Segment, target_fps: float) -> Segment:
    """Keep every ``round(fps / target_fps)``-th frame starting at frame 0."""
    if not target_fps > 0:
        raise UsageError("target_fps must be positive")
    if target_fps > segment.fps:
        raise UsageError(f"cannot upsample segment {segment.segment_id} from {segment.fps} to {target_fps} fps")
    stride = max(1, round(segment.fps / target_fps))
    sl = slice(0, None, stride)
    return segment.replace(
        fps=float(target_fps),
        psi=segment.psi[sl],
        rho=None if segment.rho is None else segment.rho[sl],
        xi=None if segment.xi is None else segment.xi[sl],
    )


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, segment: Segment) -> Segment:
        return segment.replace(psi=(segment.psi - self.mean) / self.std)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_normalizer(segments: Sequence[Segment]) -> Normalizer:
    """Per-dimension mean/std of psi over every frame of ``segments``."""
    stacked = np.concatenate([s.psi for s in segments], axis=0)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), STD_FLOOR)
    return Normalizer(mean, std)


def apply_normalizer(normalizer: Normalizer, segment: Segment) -> Segment:
    return normalizer.apply(segment)


# --------------------------------------------------------------------------
# split planning

@dataclass
class Fold:
    train: list
    test: list
    personalize: dict = field(default_factory=dict)
    empty_eval_sessions: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "train": list(self.train),
            "test": list(self.test),
            "personalize": {u: list(ids) for u, ids in self.personalize.items()},
            "empty_eval_sessions": list(self.empty_eval_sessions),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Fold":
        return cls(list(d["train"]), list(d["test"]), dict(d.get("personalize", {})),
                   list(d.get("empty_eval_sessions", [])))


@dataclass
class SplitPlan:
    kind: str
    k: int
    seed: int
    folds: list
    fraction: float | None = None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "k": self.k,
            "seed": self.seed,
            "fraction": self.fraction,
            "folds": [f.to_dict() for f in self.folds],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(d["kind"], d["k"], d["seed"], [Fold.from_dict(f) for f in d["folds"]], d.get("fraction"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "SplitPlan":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (json.JSONDecodeError, KeyError) as exc:
            raise ParseError(f"{path}: not a split plan ({exc})") from None


def random_kfold(segments: Sequence[Segment], k: int = 5, seed: int = 0) -> SplitPlan:
    """Shuffle segments; fold ``i`` tests the ``i``-th contiguous chunk."""
    if k < 2:
        raise UsageError("k must be at least 2")
    if len(segments) < k:
        raise UsageError(f"{len(segments)} segments cannot fill {k} folds")
    ids = [s.segment_id for s in segments]
    perm = np.random.default_rng(seed).permutation(len(ids))
    folds = []
    for chunk in np.array_split(perm, k):
        test = set(chunk.tolist())
        folds.append(Fold(
            train=[ids[j] for j in range(len(ids)) if j not in test],
            test=[ids[j] for j in sorted(test)],
        ))
    return SplitPlan("random", k, seed, folds)


def leave_users_out(segments: Sequence[Segment], k: int = 5, seed: int = 0) -> SplitPlan:
    """Partition users into ``k`` groups; fold ``i`` tests every segment of group ``i``."""
    if k < 2:
        raise UsageError("k must be at least 2")
    users = sorted({s.user_id for s in segments})
    if len(users) < k:
        raise UsageError(f"{len(users)} users cannot fill {k} leave-users-out folds")
    perm = np.random.default_rng(seed).permutation(len(users))
    folds = []
    for chunk in np.array_split(perm, k):
        test_users = {users[j] for j in chunk}
        folds.append(Fold(
            train=[s.segment_id for s in segments if s.user_id not in test_users],
            test=[s.segment_id for s in segments if s.user_id in test_users],
        ))
    return SplitPlan("leave-users-out", k, seed, folds)


def personalization_count(n_problems: int, fraction: float) -> int:
    # tolerance keeps e.g. 0.2 * 15 = 3.0000000000000004 at 3
    return math.ceil(fraction * n_problems - 1e-9)


def personalization_split(plan: SplitPlan, segments: Sequence[Segment], fraction: float = 0.2) -> SplitPlan:
    """Move each test session's earliest ``ceil(fraction * n)`` problems to personalization."""
    if not 0 < fraction < 1:
        raise UsageError("fraction must lie strictly between 0 and 1")
    if plan.kind != "leave-users-out":
        raise UsageError(f"personalization needs a leave-users-out plan, got {plan.kind!r}")
    by_id = {s.segment_id: s for s in segments}
    folds = []
    for fold in plan.folds:
        sessions = defaultdict(list)
        for sid in fold.test:
            s = by_id[sid]
            sessions[(s.user_id, s.session_id)].append(s)
        personalize: dict[str, list] = {}
        held = set()
        empty = []
        for (user, session), segs in sessions.items():
            segs.sort(key=lambda s: s.problem_index)
            n = personalization_count(len(segs), fraction)
            chosen = [s.segment_id for s in segs[:n]]
            personalize.setdefault(user, []).extend(chosen)
            held.update(chosen)
            if n == len(segs):
                empty.append(f"{user}/{session}")
        folds.append(Fold(
            train=list(fold.train),
            test=[sid for sid in fold.test if sid not in held],
            personalize=personalize,
            empty_eval_sessions=empty,
        ))
    return SplitPlan("leave-users-out-personalized", plan.k, plan.seed, folds, fraction)


def check_plan(plan: SplitPlan, segments: Sequence[Segment]) -> None:
    """Raise UsageError unless every fold is a clean partition of the input."""
    ids = {s.segment_id for s in segments}
    user_of = {s.segment_id: s.user_id for s in segments}
    for n, fold in enumerate(plan.folds):
        train, test = set(fold.train), set(fold.test)
        pers = {sid for lst in fold.personalize.values() for sid in lst}
        if train & test or train & pers or test & pers:
            raise UsageError(f"fold {n}: overlapping roles")
        if train | test | pers != ids:
            raise UsageError(f"fold {n}: roles do not cover the dataset")
        if plan.kind != "random":
            if {user_of[s] for s in train} & {user_of[s] for s in test | pers}:
                raise UsageError(f"fold {n}: a user appears on both sides")
