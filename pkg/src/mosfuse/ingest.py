"""Rating ingestion: raw listening-test dumps -> canonical utterance manifest.

Each supported corpus gets an adapter registered under a format token. The
adapters only know about column layouts; everything downstream works on
:class:`RatingRecord` and :class:`Manifest`.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

logger = logging.getLogger(__name__)

MANIFEST_HEADER = ["dataset_id", "system_id", "utterance_id", "audio_path", "mos", "n_ratings"]
SCORE_RANGE = (1, 5)


class IngestError(ValueError):
    """Raised for rows or files that cannot be interpreted at all."""


@dataclass(frozen=True)
class RatingRecord:
    dataset_id: str
    system_id: str
    utterance_id: str
    listener_id: str
    score: int
    audio_path: str
    # Optional metadata consumed by filter rules; absent fields make rules no-ops.
    listener_tag: Optional[str] = None
    task: Optional[str] = None
    language: Optional[str] = None
    sentence_id: Optional[str] = None

    def __post_init__(self):
        for name in ("dataset_id", "system_id", "utterance_id", "listener_id"):
            if not getattr(self, name):
                raise IngestError(f"empty {name} in rating record")
        if not SCORE_RANGE[0] <= self.score <= SCORE_RANGE[1]:
            raise IngestError(f"score {self.score} outside {SCORE_RANGE}")


@dataclass(frozen=True)
class UtteranceLabel:
    dataset_id: str
    system_id: str
    utterance_id: str
    audio_path: str
    mos: float
    n_ratings: int

    @property
    def key(self) -> Tuple[str, str]:
        return (self.dataset_id, self.utterance_id)


@dataclass
class Manifest:
    labels: List[UtteranceLabel]
    domain_vocabulary: List[str] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for label in self.labels:
            if label.key in seen:
                raise IngestError(f"duplicate manifest key {label.key}")
            seen.add(label.key)
        vocab = sorted({label.dataset_id for label in self.labels})
        if self.domain_vocabulary and list(self.domain_vocabulary) != vocab:
            raise IngestError(
                f"domain vocabulary {self.domain_vocabulary} does not match datasets {vocab}"
            )
        self.domain_vocabulary = vocab

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    def subset(self, predicate: Callable[[UtteranceLabel], bool]) -> "Manifest":
        return Manifest([label for label in self.labels if predicate(label)])

    def systems(self) -> List[Tuple[str, str]]:
        return sorted({(label.dataset_id, label.system_id) for label in self.labels})


@dataclass
class ParsedRatings:
    """Output of :func:`parse_ratings`: accepted votes plus rejected rows."""

    records: List[RatingRecord]
    rejected: List[Tuple[str, int, str]] = field(default_factory=list)  # (file, line, reason)

    def __len__(self) -> int:
        return len(self.records)


# ---------------------------------------------------------------------------
# Parsing


class _RowSink:
    def __init__(self, source: Path):
        self.source = source
        self.records: List[RatingRecord] = []
        self.rejected: List[Tuple[str, int, str]] = []

    def add(self, line_no: int, raw_score: str, audio_path: str, **fields) -> None:
        if not audio_path:
            raise IngestError(f"{self.source}:{line_no}: missing audio reference")
        try:
            score = int(raw_score.strip())
        except (ValueError, AttributeError):
            raise IngestError(f"{self.source}:{line_no}: unparseable score {raw_score!r}") from None
        if not SCORE_RANGE[0] <= score <= SCORE_RANGE[1]:
            self.rejected.append((str(self.source), line_no, f"score {score} outside 1-5"))
            return
        try:
            self.records.append(RatingRecord(score=score, audio_path=audio_path, **fields))
        except IngestError as exc:
            self.rejected.append((str(self.source), line_no, str(exc)))


def _require_columns(path: Path, header: Sequence[str], required: Iterable[str]) -> None:
    missing = [c for c in required if c not in header]
    if missing:
        raise IngestError(f"{path}: missing columns {missing}; found {list(header)}")


def _parse_ratings_csv(root: Path, dataset_id: Optional[str] = None) -> _RowSink:
    """Generic layout: ``<root>/ratings.csv`` (or ``root`` itself if a file).

    Header must contain ``dataset_id,system_id,utterance_id,listener_id,score,audio_path``;
    optional ``listener_tag,task,language,sentence_id``. Relative audio paths
    are resolved against the file's directory.
    """
    path = root if root.is_file() else root / "ratings.csv"
    sink = _RowSink(path)
    if path.stat().st_size == 0:
        return sink
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        _require_columns(
            path,
            reader.fieldnames or [],
            ["dataset_id", "system_id", "utterance_id", "listener_id", "score", "audio_path"],
        )
        for line_no, row in enumerate(reader, start=2):
            audio = (row.get("audio_path") or "").strip()
            sink.add(
                line_no,
                row["score"],
                _resolve(path.parent, audio),
                dataset_id=dataset_id or row["dataset_id"].strip(),
                system_id=row["system_id"].strip(),
                utterance_id=row["utterance_id"].strip(),
                listener_id=row["listener_id"].strip(),
                listener_tag=_opt(row.get("listener_tag")),
                task=_opt(row.get("task")),
                language=_opt(row.get("language")),
                sentence_id=_opt(row.get("sentence_id")),
            )
    return sink


def _parse_bvcc_style(root: Path, dataset_id: str) -> _RowSink:
    """BVCC-style listener dumps.

    Reads every headerless CSV under ``<root>/sets/`` named ``TRAINSET``,
    ``DEVSET`` or ``TESTSET`` (any that exist). Columns: system id, wav file
    name, score, then listener information; the first nonempty field from
    column 4 on is taken as the listener id. Audio lives in ``<root>/wav/``.
    """
    sets_dir = root / "sets"
    files = [sets_dir / name for name in ("TRAINSET", "DEVSET", "TESTSET") if (sets_dir / name).exists()]
    if not files:
        raise IngestError(f"{root}: no sets/TRAINSET, sets/DEVSET or sets/TESTSET found")
    sinks = []
    for path in files:
        sink = _RowSink(path)
        with path.open(newline="", encoding="utf-8") as handle:
            for line_no, row in enumerate(csv.reader(handle), start=1):
                if not row or not any(cell.strip() for cell in row):
                    continue
                if len(row) < 4:
                    raise IngestError(f"{path}:{line_no}: expected >=4 columns, got {len(row)}")
                system_id, wav_name, raw_score = (cell.strip() for cell in row[:3])
                listener = next((cell.strip() for cell in row[3:] if cell.strip()), "")
                sink.add(
                    line_no,
                    raw_score,
                    str(root / "wav" / wav_name) if wav_name else "",
                    dataset_id=dataset_id,
                    system_id=system_id,
                    utterance_id=Path(wav_name).stem,
                    listener_id=listener,
                )
        sinks.append(sink)
    return _merge(sinks, root)


def _parse_blizzard(root: Path, dataset_id: str, task_filter: Optional[str] = None) -> _RowSink:
    """Blizzard Challenge naturalness votes.

    ``<root>/ratings.csv`` with header ``listener_id,listener_type,task,
    system_id,sentence_id,score`` and optional ``language``. Audio is at
    ``<root>/wav/<system_id>/<sentence_id>.wav``. For multi-task years the
    dataset id becomes ``<dataset_id>-<task>`` so each task is its own domain.
    """
    path = root / "ratings.csv"
    sink = _RowSink(path)
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        _require_columns(
            path,
            reader.fieldnames or [],
            ["listener_id", "listener_type", "task", "system_id", "sentence_id", "score"],
        )
        for line_no, row in enumerate(reader, start=2):
            task = row["task"].strip()
            if task_filter is not None and task != task_filter:
                continue
            system_id = row["system_id"].strip()
            sentence_id = row["sentence_id"].strip()
            audio = str(root / "wav" / system_id / f"{sentence_id}.wav") if sentence_id else ""
            sink.add(
                line_no,
                row["score"],
                audio,
                dataset_id=f"{dataset_id}-{task}" if dataset_id == "BC2010" else dataset_id,
                system_id=system_id,
                utterance_id=f"{system_id}_{sentence_id}",
                listener_id=row["listener_id"].strip(),
                listener_tag=_opt(row.get("listener_type")),
                task=task or None,
                language=_opt(row.get("language")),
                sentence_id=sentence_id,
            )
    return sink


def _parse_somos(root: Path, dataset_id: str) -> _RowSink:
    """SOMOS crowdsourced votes.

    ``<root>/raw_scores.tsv`` with header columns ``utteranceId``,
    ``systemId``, ``listenerId`` and ``choice`` (the 1-5 vote). Audio is at
    ``<root>/audios/<utteranceId>.wav``.
    """
    path = root / "raw_scores.tsv"
    sink = _RowSink(path)
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle, delimiter="\t")
        _require_columns(path, reader.fieldnames or [], ["utteranceId", "systemId", "listenerId", "choice"])
        for line_no, row in enumerate(reader, start=2):
            utt = row["utteranceId"].strip()
            sink.add(
                line_no,
                row["choice"],
                str(root / "audios" / f"{utt}.wav") if utt else "",
                dataset_id=dataset_id,
                system_id=row["systemId"].strip(),
                utterance_id=utt,
                listener_id=row["listenerId"].strip(),
            )
    return sink


def _merge(sinks: Sequence[_RowSink], source: Path) -> _RowSink:
    merged = _RowSink(source)
    for sink in sinks:
        merged.records.extend(sink.records)
        merged.rejected.extend(sink.rejected)
    return merged


def _opt(value: Optional[str]) -> Optional[str]:
    if value is None:
        return None
    value = value.strip()
    return value or None


def _resolve(base: Path, audio: str) -> str:
    if not audio:
        return ""
    p = Path(audio)
    return str(p if p.is_absolute() else base / p)


ADAPTERS: Dict[str, Callable[[Path], _RowSink]] = {
    "ratings-csv": lambda root: _parse_ratings_csv(root),
    "bvcc": lambda root: _parse_bvcc_style(root, "BVCC"),
    "sarulab": lambda root: _parse_bvcc_style(root, "sarulab-data"),
    "somos": lambda root: _parse_somos(root, "SOMOS"),
    "bc2008": lambda root: _parse_blizzard(root, "BC2008"),
    "bc2009": lambda root: _parse_blizzard(root, "BC2009"),
    "bc2010": lambda root: _parse_blizzard(root, "BC2010"),
    "bc2011": lambda root: _parse_blizzard(root, "BC2011"),
}
for _task in ("EH1", "EH2", "ES1", "ES3"):
    ADAPTERS[f"bc2010-{_task}"] = lambda root, _t=_task: _parse_blizzard(root, "BC2010", task_filter=_t)

# Filtering applied to real corpora unless the caller overrides it.
DEFAULT_RULES: Dict[str, str] = {
    "bc2008": "exclude-listener-tag:EUS,english-only",
    "bc2009": "english-only",
    "bc2010": "include-task-list:EH1+EH2+ES1+ES3,english-only",
    "bc2011": "english-only",
}


def parse_ratings(source: Union[str, Path], format: str, check_audio: bool = False) -> ParsedRatings:
    """Parse one raw rating dump into :class:`RatingRecord` votes.

    Votes outside the 1-5 scale are rejected and reported with their line
    number; rows that cannot be read at all (non-integer score, missing audio
    reference, wrong column layout) raise :class:`IngestError`.
    """
    if format not in ADAPTERS:
        raise IngestError(f"unknown format token {format!r}; known: {sorted(ADAPTERS)}")
    source = Path(source)
    if not source.exists():
        raise IngestError(f"rating source {source} does not exist")
    sink = ADAPTERS[format](source)
    if check_audio:
        missing = sorted({r.audio_path for r in sink.records if not Path(r.audio_path).exists()})
        if missing:
            raise IngestError(f"{len(missing)} audio files not found, e.g. {missing[0]}")
    for file, line_no, reason in sink.rejected:
        logger.warning("rejected %s:%d (%s)", file, line_no, reason)
    return ParsedRatings(sink.records, sink.rejected)


# ---------------------------------------------------------------------------
# Filtering


@dataclass(frozen=True)
class FilterRule:
    kind: str
    values: Tuple[str, ...] = ()

    KINDS = ("exclude-listener-tag", "include-task-list", "english-only")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise IngestError(f"unknown filter rule {self.kind!r}; known: {self.KINDS}")

    def __str__(self) -> str:
        return self.kind + (":" + "+".join(self.values) if self.values else "")

    def rejects(self, record: RatingRecord) -> bool:
        if self.kind == "exclude-listener-tag":
            return record.listener_tag is not None and record.listener_tag in self.values
        if self.kind == "include-task-list":
            return record.task is not None and record.task not in self.values
        # english-only: explicit language wins, otherwise Blizzard task naming
        # (E* English, M* Mandarin, ...).
        if record.language is not None:
            return record.language.lower() not in ("en", "eng", "english")
        if record.task is not None:
            return not record.task.upper().startswith("E")
        return False


def parse_rules(spec: Union[str, Sequence[str], None]) -> List[FilterRule]:
    """``"exclude-listener-tag:EUS,include-task-list:EH1+EH2,english-only"`` -> rules."""
    if not spec:
        return []
    items = spec.split(",") if isinstance(spec, str) else list(spec)
    rules = []
    for item in items:
        item = item.strip()
        if not item:
            continue
        kind, _, values = item.partition(":")
        rules.append(FilterRule(kind, tuple(v for v in values.split("+") if v)))
    return rules


def filter_records(
    records: Iterable[RatingRecord], rules: Iterable[FilterRule]
) -> Tuple[List[RatingRecord], Dict[str, int]]:
    """Drop records violating any rule; returns kept records and removals per rule.

    A record rejected by several rules is charged to the first one.
    """
    rules = list(rules)
    counts = {str(rule): 0 for rule in rules}
    kept = []
    for record in records:
        for rule in rules:
            if rule.rejects(record):
                counts[str(rule)] += 1
                break
        else:
            kept.append(record)
    return kept, counts


# ---------------------------------------------------------------------------
# Aggregation and statistics


def aggregate_labels(records: Iterable[RatingRecord]) -> Manifest:
    """Mean opinion score per (dataset_id, utterance_id)."""
    groups: "OrderedDict[Tuple[str, str], List[RatingRecord]]" = OrderedDict()
    for record in records:
        groups.setdefault((record.dataset_id, record.utterance_id), []).append(record)
    if not groups:
        raise IngestError("cannot aggregate an empty record collection")
    labels = []
    for (dataset_id, utterance_id), votes in groups.items():
        systems = {v.system_id for v in votes}
        if len(systems) > 1:
            raise IngestError(
                f"utterance {dataset_id}/{utterance_id} attributed to several systems: {sorted(systems)}"
            )
        scores = [v.score for v in votes]
        labels.append(
            UtteranceLabel(
                dataset_id=dataset_id,
                system_id=votes[0].system_id,
                utterance_id=utterance_id,
                audio_path=votes[0].audio_path,
                mos=math.fsum(scores) / len(scores),
                n_ratings=len(scores),
            )
        )
    return Manifest(labels)


@dataclass(frozen=True)
class DatasetSummary:
    dataset_id: str
    listeners: Optional[int]
    systems: int
    sentences: int
    ratings: int


def dataset_stats(source: Union[Manifest, Iterable[RatingRecord]]) -> List[DatasetSummary]:
    """Per-dataset counts in the layout of the corpus overview table.

    From raw records, listeners are distinct listener ids and sentences are
    distinct sentence ids (utterance ids when no sentence id is recorded).
    A manifest has lost listener identity, so ``listeners`` is ``None``.
    """
    if isinstance(source, Manifest):
        if not source.labels:
            raise IngestError("empty manifest")
        by_ds: Dict[str, List[UtteranceLabel]] = defaultdict(list)
        for label in source.labels:
            by_ds[label.dataset_id].append(label)
        return [
            DatasetSummary(
                dataset_id=ds,
                listeners=None,
                systems=len({lab.system_id for lab in labs}),
                sentences=len({lab.utterance_id for lab in labs}),
                ratings=sum(lab.n_ratings for lab in labs),
            )
            for ds, labs in sorted(by_ds.items())
        ]
    rows: Dict[str, List[RatingRecord]] = defaultdict(list)
    for record in source:
        rows[record.dataset_id].append(record)
    if not rows:
        raise IngestError("no records")
    return [
        DatasetSummary(
            dataset_id=ds,
            listeners=len({r.listener_id for r in recs}),
            systems=len({r.system_id for r in recs}),
            sentences=len({r.sentence_id or r.utterance_id for r in recs}),
            ratings=len(recs),
        )
        for ds, recs in sorted(rows.items())
    ]


# ---------------------------------------------------------------------------
# Canonical CSV


def write_manifest(manifest: Manifest, dest: Union[str, Path]) -> None:
    dest = Path(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    with dest.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for lab in manifest.labels:
            writer.writerow(
                [lab.dataset_id, lab.system_id, lab.utterance_id, lab.audio_path, f"{lab.mos:.6f}", lab.n_ratings]
            )


def _snap_mean(mos: float, n: int) -> float:
    """Undo 6-decimal rounding: a mean of ``n`` integer votes is exactly ``k / n``."""
    if n < 1:
        return mos
    k = round(mos * n)
    return k / n if abs(k / n - mos) <= 5e-7 + 1e-12 else mos


def read_manifest(path: Union[str, Path]) -> Manifest:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise IngestError(f"{path}: header {header} != {MANIFEST_HEADER}")
        labels = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise IngestError(f"{path}:{line_no}: expected {len(MANIFEST_HEADER)} fields")
            ds, sys_id, utt, audio, mos, n = row
            labels.append(UtteranceLabel(ds, sys_id, utt, audio, _snap_mean(float(mos), int(n)), int(n)))
    return Manifest(labels)


def ingest(
    source: Union[str, Path],
    format: str,
    rules: Union[str, Sequence[FilterRule], None] = None,
    check_audio: bool = True,
) -> Tuple[Manifest, List[RatingRecord], Dict[str, int]]:
    """parse -> filter -> aggregate. ``rules=None`` uses the format's defaults."""
    parsed = parse_ratings(source, format, check_audio=check_audio)
    if rules is None:
        rules = DEFAULT_RULES.get(format.split("-")[0], "")
    rule_objs = parse_rules(rules) if isinstance(rules, str) else list(rules)
    kept, counts = filter_records(parsed.records, rule_objs)
    for rule, n in counts.items():
        logger.info("rule %s removed %d records", rule, n)
    return aggregate_labels(kept), kept, counts
