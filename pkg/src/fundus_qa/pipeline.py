"""Dataset manifests, splits, batch scoring and real-vs-synthetic reports."""

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ._validation import FundusQAError, ZeroVarianceError, check_seed
from .isc import IscQualityModel
from .qv import QvScorer
from .raster import load_image
from .stats import PairedTestResult, StatsSummary, paired_t_test, summarize

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
IMAGE_SUFFIXES = {".png", ".ppm"}
MAX_GRADE = 2
SCORE_FIELDS = ["id", "score", "vessel_pixel_count", "excluded", "error"]


@dataclass
class ManifestEntry:
    id: str
    retina_path: str
    vessel_path: str
    synthetic_path: str = None
    grade: int = None
    excluded: bool = False


@dataclass
class DatasetManifest:
    entries: list
    version: int = MANIFEST_VERSION
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise FundusQAError("manifest ids must be unique")

    def __len__(self):
        return len(self.entries)

    @property
    def active(self):
        return [e for e in self.entries if not e.excluded]

    def ids(self):
        return [e.id for e in self.entries]


@dataclass(frozen=True)
class SplitSpec:
    train_count: int
    val_count: int
    test_count: int
    seed: int = 0

    def __post_init__(self):
        if min(self.train_count, self.val_count, self.test_count) < 0:
            raise ValueError("split counts must be >= 0")

    @property
    def total(self):
        return self.train_count + self.val_count + self.test_count


# ---------------------------------------------------------------------------
# Manifests


def _stems(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise FundusQAError(f"not a directory: {directory}")
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def read_grades(path):
    """CSV with ``id`` and ``grade`` columns."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"id", "grade"} <= set(reader.fieldnames):
            raise FundusQAError(f"{path}: grade file needs 'id' and 'grade' columns")
        return {row["id"]: int(row["grade"]) for row in reader}


def build_manifest(retina_dir, vessel_dir, synthetic_dir=None, grade_file=None):
    """Pair images across directories by file stem.

    Unmatched files become warnings.  Entries graded above 2 are kept but
    marked ``excluded``.
    """
    retinas = _stems(retina_dir)
    vessels = _stems(vessel_dir)
    synthetics = _stems(synthetic_dir) if synthetic_dir else {}
    grades = read_grades(grade_file) if grade_file else {}
    common = sorted(set(retinas) & set(vessels))
    if not common:
        raise FundusQAError("no retina/vessel files share a name")
    warnings = [f"retina without vessel tree: {s}" for s in sorted(set(retinas) - set(vessels))]
    warnings += [f"vessel tree without retina: {s}" for s in sorted(set(vessels) - set(retinas))]
    if synthetic_dir:
        warnings += [f"missing synthetic image: {s}" for s in common if s not in synthetics]
    entries = []
    for stem in common:
        grade = grades.get(stem)
        entries.append(ManifestEntry(
            id=stem,
            retina_path=str(retinas[stem]),
            vessel_path=str(vessels[stem]),
            synthetic_path=str(synthetics[stem]) if stem in synthetics else None,
            grade=grade,
            excluded=grade is not None and grade > MAX_GRADE,
        ))
    if grades:
        warnings += [f"no grade for: {e.id}" for e in entries if e.grade is None]
    n_excluded = sum(e.excluded for e in entries)
    if n_excluded:
        warnings.append(f"{n_excluded} entries excluded by grade > {MAX_GRADE}")
    for w in warnings:
        log.warning(w)
    return DatasetManifest(entries, warnings=warnings)


def apply_exclusions(manifest, ids):
    """Return a copy with the listed ids marked excluded; unknown ids are an error."""
    ids = set(ids)
    unknown = ids - set(manifest.ids())
    if unknown:
        raise FundusQAError(f"exclusion list names unknown ids: {sorted(unknown)[:5]}")
    entries = [replace(e, excluded=e.excluded or e.id in ids) for e in manifest.entries]
    return DatasetManifest(entries, manifest.version, list(manifest.warnings))


def read_id_list(path):
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip() and not line.startswith("#")]


def write_manifest(path, manifest):
    """Line-delimited JSON: a version header line, then one entry per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"manifest_version": manifest.version}) + "\n")
        for e in manifest.entries:
            fh.write(json.dumps(asdict(e), sort_keys=True) + "\n")


def read_manifest(path):
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise FundusQAError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
        version = header["manifest_version"]
        if version != MANIFEST_VERSION:
            raise FundusQAError(f"{path}: unsupported manifest version {version}")
        entries = [ManifestEntry(**json.loads(ln)) for ln in lines[1:]]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FundusQAError(f"{path}: malformed manifest: {exc}") from exc
    return DatasetManifest(entries, version)


def split_dataset(manifest, split):
    """Seeded shuffle of the non-excluded entries, sliced into train/val/test."""
    active = manifest.active
    if split.total != len(active):
        raise FundusQAError(
            f"split counts sum to {split.total} but the manifest has {len(active)} usable entries"
        )
    order = check_seed(split.seed).permutation(len(active))
    shuffled = [active[i] for i in order]
    a = split.train_count
    b = a + split.val_count
    return tuple(DatasetManifest(part, manifest.version) for part in (shuffled[:a], shuffled[a:b], shuffled[b:]))


# ---------------------------------------------------------------------------
# Batch scoring


def worker_count():
    """``FUNDUS_QA_THREADS`` caps the pool; 0 or unset means one per CPU."""
    raw = os.environ.get("FUNDUS_QA_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise FundusQAError(f"FUNDUS_QA_THREADS must be an integer, got {raw!r}") from None
    return n if n > 0 else (os.cpu_count() or 1)


def _format_float(x):
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def score_images(items, metric, model=None, threads=None):
    """Score ``(id, path, excluded)`` items; returns one row dict per item, in order.

    ``metric`` is ``"qv"`` or ``"isc"``; ISC needs a fitted
    :class:`~fundus_qa.isc.IscQualityModel`.  Failures land in the row's
    ``error`` field.
    """
    if metric == "isc" and model is None:
        raise FundusQAError("the ISC metric needs a trained model file")
    if metric not in ("qv", "isc"):
        raise ValueError(f"unknown metric {metric!r}")
    qv = QvScorer() if metric == "qv" else None

    def run(item):
        entry_id, path, excluded = item
        row = {"id": entry_id, "score": None, "vessel_pixel_count": None, "excluded": excluded, "error": ""}
        try:
            img = load_image(path)
            if qv is not None:
                rep = qv.report(img)
                row["score"], row["vessel_pixel_count"] = rep.score, rep.vessel_pixel_count
            else:
                row["score"] = float(model.score_samples([img])[0])
        except (FundusQAError, OSError, ValueError) as exc:
            row["error"] = str(exc)
        return row

    n = threads or worker_count()
    if n == 1:
        return [run(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(run, items))


def score_batch(manifest, metric, model=None, out_csv=None, role="retina", include_excluded=False, threads=None):
    """Score every non-excluded manifest entry (all entries with ``include_excluded``)."""
    attr = {"retina": "retina_path", "synthetic": "synthetic_path"}[role]
    items = []
    for e in manifest.entries:
        if e.excluded and not include_excluded:
            continue
        items.append((e.id, getattr(e, attr) or "", e.excluded))
    rows = score_images(items, metric, model, threads)
    if out_csv is not None:
        write_scores(out_csv, rows)
    return rows


def write_scores(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_FIELDS)
        for r in rows:
            count = r.get("vessel_pixel_count")
            w.writerow([r["id"], _format_float(r["score"]), "" if count is None else int(count),
                        int(bool(r.get("excluded"))), r.get("error", "")])


def read_scores(path, score_column="score"):
    """Map id -> score for rows with a score (excluded and failed rows skipped)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or "id" not in reader.fieldnames or score_column not in reader.fieldnames:
            raise FundusQAError(f"{path}: needs 'id' and '{score_column}' columns")
        out = {}
        for row in reader:
            if row.get(score_column, "") == "" or row.get("excluded", "0") == "1":
                continue
            out[row["id"]] = float(row[score_column])
    return out


# ---------------------------------------------------------------------------
# Reports


@dataclass
class SetRow:
    label: str
    metric: str
    summary: StatsSummary


@dataclass
class PairRow:
    metric: str
    n: int
    result: PairedTestResult = None
    alpha: float = 0.05
    error: str = ""

    @property
    def significant(self):
        return self.result is not None and self.result.p_two_tailed < self.alpha


@dataclass
class QualityTable:
    rows: list = field(default_factory=list)
    pairwise: list = field(default_factory=list)

    @property
    def errors(self):
        return [p.error for p in self.pairwise if p.error]

    def extend(self, other):
        self.rows += other.rows
        self.pairwise += other.pairwise
        return self

    def render(self):
        lines = [f"{'set':<12}{'metric':<8}{'n':>5}{'mean':>10}{'std':>10}  normal(KS)"]
        for r in self.rows:
            s = r.summary
            normal = "n/a" if s.degenerate else ("yes" if s.normal_at_005 else "no")
            lines.append(f"{r.label:<12}{r.metric:<8}{s.n:>5}{s.mean:>10.4f}{s.std_dev:>10.4f}  {normal}")
        lines.append("")
        lines.append(f"{'metric':<8}{'n':>5}{'t':>10}{'df':>5}{'p (2-tail)':>12}  significant")
        for p in self.pairwise:
            if p.result is None:
                lines.append(f"{p.metric:<8}{p.n:>5}  error: {p.error}")
                continue
            res = p.result
            mark = "*" if p.significant else ""
            lines.append(f"{p.metric:<8}{p.n:>5}{res.t_statistic:>10.4f}{res.degrees_of_freedom:>5}"
                         f"{res.p_two_tailed:>12.4g}  {'yes' if p.significant else 'no'}{mark}")
        return "\n".join(lines) + "\n"

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kind", "label", "metric", "n", "mean", "std", "normal_at_005",
                        "t", "df", "p_two_tailed", "significant_at_005", "error"])
            for r in self.rows:
                s = r.summary
                w.writerow(["set", r.label, r.metric, s.n, repr(s.mean), repr(s.std_dev),
                            int(s.normal_at_005), "", "", "", "", ""])
            for p in self.pairwise:
                res = p.result
                w.writerow(["paired", "", p.metric, p.n, "", "", "",
                            repr(res.t_statistic) if res else "", res.degrees_of_freedom if res else "",
                            repr(res.p_two_tailed) if res else "", int(p.significant), p.error])


def compare_scores(real, synthetic, metric="score", alpha=0.05):
    """Build report rows from two id -> score mappings paired by id."""
    common = sorted(set(real) & set(synthetic))
    if not common:
        raise FundusQAError("real and synthetic score sets share no ids")
    a = np.array([real[i] for i in common])
    b = np.array([synthetic[i] for i in common])
    table = QualityTable()
    for label, values in (("real", a), ("synthetic", b)):
        table.rows.append(SetRow(label, metric, summarize(values, alpha)))
    try:
        table.pairwise.append(PairRow(metric, len(common), paired_t_test(a, b), alpha))
    except ZeroVarianceError as exc:
        table.pairwise.append(PairRow(metric, len(common), None, alpha, str(exc)))
    return table


def compare_report(real_csv, synthetic_csv, alpha=0.05, metric="score"):
    return compare_scores(read_scores(real_csv), read_scores(synthetic_csv), metric, alpha)
