"""Hierarchy examination workflow: memoized classification of every
sub-cell design, a designer decision queue, and conversion reports.

The session walks placements breadth-first from the top cell.  Each design
(content hash) is classified at most once; repeat placements fold into the
existing record.  Generatable designs become pending suggestions and their
children are examined once the designer approves; not-generatable designs
wait for a flatten-or-manual choice.  Flattening splices a design's children
into every parent that placed it and re-queues the exposed placements, so
examination continues one hierarchy level down.
"""

from __future__ import annotations

import json
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .dataset import rasterize_cell
from .errors import EmptyRasterError, NotFoundError, StateError
from .layout import (Library, Transform, copy_cells, design_hash,
                     expand_instance, flatten_one_level)
from .model import ClassRegistry, DecisionPolicy, MultiScaleModel, Prediction, \
    decide, prepare_batch
from .raster import DEFAULT_CHANNEL_MAP, LayerChannelMap, RasterConfig

PENDING = "pending"
APPROVED = "approved"
REJECTED_FLATTENED = "rejected_flattened"
REJECTED_MANUAL = "rejected_manual"
AUTO_NG = "auto_ng"
SKIPPED_EMPTY = "skipped_empty"

# actions a designer may apply, keyed by the record's current status
_LEGAL_ACTIONS = {
    PENDING: {"approve", "reject_flatten", "reject_manual"},
    AUTO_NG: {"flatten", "manual"},
}


@dataclass(frozen=True)
class Site:
    """One visited placement of a design: path plus the placement local to
    the parent cell's coordinates."""
    path: str
    x: int
    y: int
    rotation: int
    mirrored: bool

    def to_json_dict(self) -> dict:
        return {"path": self.path, "x": self.x, "y": self.y,
                "rotation": self.rotation, "mirrored": self.mirrored}


@dataclass
class SuggestionRecord:
    design_hash: str            # hex digest of the design content
    cell_name: str              # name the design carried when first seen
    suggested_class: int | None
    suggested_label: str | None
    probability: float | None
    top: list[tuple[int, float]]
    status: str
    sites: list[Site] = field(default_factory=list)
    ng_resolution: str | None = None   # for auto_ng: "flattened" or "manual"

    @property
    def instance_count(self) -> int:
        return len(self.sites)

    @property
    def example_path(self) -> str:
        return self.sites[0].path if self.sites else ""

    def to_json_dict(self) -> dict:
        return {
            "design_hash": self.design_hash,
            "cell_name": self.cell_name,
            "suggested_class": self.suggested_class,
            "suggested_label": self.suggested_label,
            "probability": self.probability,
            "top_k": [[i, p] for i, p in self.top],
            "status": self.status,
            "ng_resolution": self.ng_resolution,
            "instance_count": self.instance_count,
            "example_path": self.example_path,
            "instances": [s.to_json_dict() for s in self.sites],
        }


@dataclass
class _VisitEntry:
    path: str
    cell_name: str
    site: Site


class ExamSession:
    """Single-writer examination state over a session-local library copy."""

    def __init__(self, lib: Library, top: str, classify, registry: ClassRegistry,
                 policy: DecisionPolicy = DecisionPolicy(),
                 cfg: RasterConfig = RasterConfig(),
                 cmap: LayerChannelMap = DEFAULT_CHANNEL_MAP):
        if top not in lib.cells:
            raise NotFoundError(f"no cell named {top!r}")
        self.lib = Library(lib.name, copy_cells(lib.cells),
                           lib.user_units_per_dbu, lib.meters_per_dbu,
                           lib.version)
        self.top = top
        self.classify = classify
        self.registry = registry
        self.policy = policy
        self.cfg = cfg
        self.cmap = cmap
        self.memo: dict[str, Prediction] = {}
        self.records: dict[str, SuggestionRecord] = {}
        self.order: list[str] = []         # hashes in first-visit order
        self.decisions: list[dict] = []
        self.instances_visited = 0
        self.superseded_sites = 0          # visited sites later flattened away
        self.preprocess_ms = 0.0
        self.inference_ms = 0.0
        self.total_ms = 0.0
        self._hash_by_name: dict[str, bytes] = {}
        self._frontier: deque[_VisitEntry] = deque(
            self._child_entries(top, top))

    # -- counters ---------------------------------------------------------

    @property
    def unique_designs_examined(self) -> int:
        return len(self.memo)

    @property
    def inference_calls(self) -> int:
        return len(self.memo)

    def counters(self) -> dict:
        return {"instances_visited": self.instances_visited,
                "unique_designs_examined": self.unique_designs_examined,
                "inference_calls": self.inference_calls,
                "queue_depth": len(self._frontier)}

    def timing(self) -> dict:
        return {"preprocess_ms": self.preprocess_ms,
                "inference_ms": self.inference_ms,
                "total_ms": self.total_ms}

    def is_complete(self) -> bool:
        if self._frontier:
            return False
        for rec in self.records.values():
            if rec.status == PENDING:
                return False
            if rec.status == AUTO_NG and rec.ng_resolution is None:
                return False
        return True

    # -- traversal --------------------------------------------------------

    def _child_entries(self, cell_name: str, base_path: str) -> list[_VisitEntry]:
        """Visit entries for a cell's direct placements, arrays expanded.

        Placements are numbered per referenced name across the whole cell so
        every path below a parent is unique.
        """
        entries: list[_VisitEntry] = []
        counts: dict[str, int] = {}
        for inst in self.lib.cells[cell_name].instances:
            for single in expand_instance(inst):
                k = counts.get(inst.ref_name, 0)
                counts[inst.ref_name] = k + 1
                path = f"{base_path}/{inst.ref_name}[{k}]"
                site = Site(path, single.origin[0], single.origin[1],
                            single.rotation, single.mirrored_x)
                entries.append(_VisitEntry(path, inst.ref_name, site))
        return entries

    def _design_hash_hex(self, cell_name: str) -> str:
        return design_hash(self.lib, cell_name, self._hash_by_name).hex()

    def examine_next(self) -> SuggestionRecord | None:
        """Advance until a new design is classified; None when the queue of
        reachable, undecided placements is exhausted.

        Repeat placements of known designs are folded into their records on
        the way (no inference).  Children of approved designs are queued at
        fold time, so the walk covers every placement the decisions so far
        have made reachable.
        """
        t0 = time.perf_counter()
        try:
            while self._frontier:
                entry = self._frontier.popleft()
                self.instances_visited += 1
                hhex = self._design_hash_hex(entry.cell_name)
                rec = self.records.get(hhex)
                if rec is not None:
                    rec.sites.append(entry.site)
                    if rec.status == APPROVED:
                        self._frontier.extend(
                            self._child_entries(entry.cell_name, entry.path))
                    continue
                rec = self._classify_design(hhex, entry)
                if rec is not None:
                    return rec
            return None
        finally:
            self.total_ms += (time.perf_counter() - t0) * 1000.0

    def _classify_design(self, hhex: str, entry: _VisitEntry
                         ) -> SuggestionRecord | None:
        t0 = time.perf_counter()
        try:
            native = rasterize_cell(self.lib, entry.cell_name, self.cfg,
                                    self.cmap)
        except EmptyRasterError:
            # Reported, not classified: no inference, no memo entry.
            self.preprocess_ms += (time.perf_counter() - t0) * 1000.0
            rec = SuggestionRecord(hhex, entry.cell_name, None, None, None,
                                   [], SKIPPED_EMPTY, [entry.site])
            self.records[hhex] = rec
            self.order.append(hhex)
            return None
        t1 = time.perf_counter()
        self.preprocess_ms += (t1 - t0) * 1000.0
        probs = self.classify(native)
        pred = decide(np.asarray(probs, dtype=np.float64), self.registry,
                      self.policy)
        self.inference_ms += (time.perf_counter() - t1) * 1000.0
        self.memo[hhex] = pred
        status = AUTO_NG if pred.is_ng else PENDING
        label = self.registry.label(pred.decided)
        rec = SuggestionRecord(hhex, entry.cell_name, pred.decided, label,
                               pred.probability, pred.top, status,
                               [entry.site])
        self.records[hhex] = rec
        self.order.append(hhex)
        return rec

    # -- decisions --------------------------------------------------------

    def apply_decision(self, record: SuggestionRecord, action: str) -> None:
        t0 = time.perf_counter()
        legal = _LEGAL_ACTIONS.get(record.status, set())
        if action not in legal:
            raise StateError(
                f"action {action!r} is not legal for a {record.status} record")
        if record.status == AUTO_NG and record.ng_resolution is not None:
            raise StateError("not-generatable record already resolved")
        before = record.status
        if action == "approve":
            record.status = APPROVED
            for site in list(record.sites):
                self._frontier.extend(
                    self._child_entries_named(record.cell_name, site.path))
        elif action == "reject_manual":
            record.status = REJECTED_MANUAL
        elif action == "reject_flatten":
            record.status = REJECTED_FLATTENED
            self._flatten_design(record)
        elif action == "manual":
            record.ng_resolution = "manual"
        elif action == "flatten":
            record.ng_resolution = "flattened"
            self._flatten_design(record)
        self.decisions.append({"design_hash": record.design_hash,
                               "action": action, "before": before,
                               "after": record.status,
                               "ng_resolution": record.ng_resolution})
        self.total_ms += (time.perf_counter() - t0) * 1000.0

    def _child_entries_named(self, cell_name: str, base_path: str):
        if cell_name not in self.lib.cells:
            return []
        return self._child_entries(cell_name, base_path)

    def _flatten_design(self, record: SuggestionRecord) -> None:
        """Splice the design's children into every parent that places it and
        queue the exposed placements for examination."""
        name = record.cell_name
        children = list(self.lib.cells[name].instances)
        for parent_name in list(self.lib.cells):
            cell = self.lib.cells[parent_name]
            while True:
                target = next((i for i in cell.instances
                               if i.ref_name == name), None)
                if target is None:
                    break
                cell = flatten_one_level(cell, target, self.lib)
            self.lib.cells[parent_name] = cell
        self._hash_by_name.clear()    # parents changed content

        def exposed_entries(base_path: str, site: Site) -> list[_VisitEntry]:
            outer = Transform((site.x, site.y), site.rotation, site.mirrored)
            entries: list[_VisitEntry] = []
            counts: dict[str, int] = {}
            for child in children:
                for single in expand_instance(child):
                    k = counts.get(child.ref_name, 0)
                    counts[child.ref_name] = k + 1
                    composed = outer.compose(Transform.of(single))
                    path = f"{base_path}/{child.ref_name}[{k}]"
                    entries.append(_VisitEntry(
                        path, child.ref_name,
                        Site(path, composed.origin[0], composed.origin[1],
                             composed.rotation, composed.mirrored_x)))
            return entries

        # Already-visited sites: queue the children with placements composed
        # into the parent's coordinates, mirroring the splice.
        for site in list(record.sites):
            self._frontier.extend(exposed_entries(site.path, site))
        self.superseded_sites += len(record.sites)

        # Unvisited placements of the design no longer exist; replace their
        # queue entries by the children exposed at those spots.
        rewritten: deque[_VisitEntry] = deque()
        for entry in self._frontier:
            if entry.cell_name != name:
                rewritten.append(entry)
            else:
                rewritten.extend(exposed_entries(entry.path, entry.site))
        self._frontier = rewritten

    # -- queue views ------------------------------------------------------

    def queue(self, status: str | None = None) -> list[SuggestionRecord]:
        """Records in first-visit order, optionally filtered by status."""
        recs = [self.records[h] for h in self.order]
        if status is not None:
            recs = [r for r in recs if r.status == status]
        return recs


def start_session(lib: Library, top: str, classify, registry: ClassRegistry,
                  policy: DecisionPolicy = DecisionPolicy(),
                  cfg: RasterConfig = RasterConfig(),
                  cmap: LayerChannelMap = DEFAULT_CHANNEL_MAP) -> ExamSession:
    return ExamSession(lib, top, classify, registry, policy, cfg, cmap)


def model_classifier(model: MultiScaleModel):
    """Adapter turning a trained model into a native-raster classifier."""
    def classify(native: np.ndarray) -> np.ndarray:
        return model.predict_probs(prepare_batch([native], model.config))[0]
    return classify


def auto_examine(session: ExamSession) -> ExamSession:
    """Run to exhaustion without a designer: approve every generatable
    verdict, mark every not-generatable design for manual development."""
    while True:
        rec = session.examine_next()
        if rec is None:
            break
        if rec.status == PENDING:
            session.apply_decision(rec, "approve")
        elif rec.status == AUTO_NG:
            session.apply_decision(rec, "manual")
    return session


# ---------------------------------------------------------------------------
# Reports

_PARTITION_OF = {
    APPROVED: "approved",
    REJECTED_MANUAL: "rejected_manual",
    SKIPPED_EMPTY: "skipped_empty",
    PENDING: "pending",
}


def _bucket_of(rec: SuggestionRecord) -> str:
    if rec.status == AUTO_NG:
        if rec.ng_resolution == "manual":
            return "ng_manual"
        if rec.ng_resolution == "flattened":
            return "superseded"
        return "undecided_ng"
    if rec.status == REJECTED_FLATTENED:
        return "superseded"
    return _PARTITION_OF[rec.status]


def report(session: ExamSession, include_timing: bool = True) -> dict:
    """Assignment report: per-design verdicts, per-instance assignments,
    counters, and the partition of visited placements by outcome."""
    partition = {"approved": 0, "rejected_manual": 0, "ng_manual": 0,
                 "skipped_empty": 0, "superseded": 0, "pending": 0,
                 "undecided_ng": 0}
    assignments: dict[str, str] = {}
    designs = []
    for hhex in session.order:
        rec = session.records[hhex]
        partition[_bucket_of(rec)] += rec.instance_count
        if rec.status == APPROVED:
            gen = session.registry.generator_id(rec.suggested_class)
            for site in rec.sites:
                assignments[site.path] = gen
        designs.append(rec.to_json_dict())
    out = {
        "top": session.top,
        "complete": session.is_complete(),
        "counters": session.counters(),
        "designs": designs,
        "assignments": assignments,
        "partition": partition,
    }
    if include_timing:
        out["timing_ms"] = session.timing()
    return out


def report_text(session: ExamSession) -> str:
    rep = report(session)
    lines = [f"examination of {rep['top']}",
             f"  instances visited: {rep['counters']['instances_visited']}",
             f"  unique designs examined: "
             f"{rep['counters']['unique_designs_examined']}",
             f"  inference calls: {rep['counters']['inference_calls']}",
             f"  total time: {rep['timing_ms']['total_ms']:.1f} ms"]
    for d in rep["designs"]:
        verdict = d["status"] if d["ng_resolution"] is None else \
            f"{d['status']}/{d['ng_resolution']}"
        sugg = "" if d["suggested_label"] is None else \
            f" -> {d['suggested_label']} ({d['probability']:.3f})"
        lines.append(f"  {d['cell_name']} x{d['instance_count']} "
                     f"[{verdict}]{sugg}")
    return "\n".join(lines) + "\n"


def report_json(session: ExamSession) -> str:
    return json.dumps(report(session), indent=2, sort_keys=True)


def _orient(site_dict: dict) -> str:
    tag = f"R{site_dict['rotation']}"
    return f"MX {tag}" if site_dict["mirrored"] else tag


def emit_generator_skeleton(session: ExamSession) -> str:
    """Program-body skeleton: one block per examined design, one stub line
    per surviving placement, parameters left as placeholders."""
    if not session.is_complete():
        raise StateError("session is not complete; decisions are outstanding")
    lines = [f"# generator skeleton for {session.top}",
             f"# placements: one stub per instance; fill parameter slots"]
    for hhex in session.order:
        rec = session.records[hhex]
        bucket = _bucket_of(rec)
        if bucket == "superseded":
            continue
        cell = session.lib.cells.get(rec.cell_name)
        nb = len(cell.boundaries) if cell else 0
        np_ = len(cell.paths) if cell else 0
        lines.append(f"design {rec.cell_name} hash={rec.design_hash[:12]} "
                     f"boundaries={nb} paths={np_}")
        for site in rec.sites:
            s = site.to_json_dict()
            at = f"at ({s['x']}, {s['y']}, {_orient(s)}) path={s['path']}"
            if bucket == "approved":
                gen = session.registry.generator_id(rec.suggested_class)
                lines.append(f"  call {gen}(<params...>) {at}")
            elif bucket == "skipped_empty":
                lines.append(f"  skip empty {at}")
            else:
                lines.append(f"  TODO develop-generator {rec.cell_name} {at}")
    return "\n".join(lines) + "\n"


def skeleton_instance_count(text: str) -> int:
    """Stub lines in a skeleton (calls, TODOs, and empty skips)."""
    return sum(1 for ln in text.splitlines()
               if ln.startswith(("  call ", "  TODO ", "  skip ")))
