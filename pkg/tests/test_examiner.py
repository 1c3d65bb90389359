"""Examination workflow: memoized traversal, decisions, flattening,
reports, and skeleton emission."""

import numpy as np
import pytest

from ltg.errors import NotFoundError, StateError
from ltg.examiner import (APPROVED, AUTO_NG, PENDING, REJECTED_FLATTENED,
                          REJECTED_MANUAL, SKIPPED_EMPTY, auto_examine,
                          emit_generator_skeleton, report, report_json,
                          report_text, skeleton_instance_count, start_session)
from ltg.layout import (ArraySpec, Boundary, Cell, Instance, LayerKey,
                        Library)
from ltg.model import ClassEntry, ClassRegistry, DecisionPolicy

METAL1 = LayerKey(40, 0)   # channel 5
METAL2 = LayerKey(41, 0)   # channel 6
METAL3 = LayerKey(42, 0)   # channel 7
UNMAPPED = LayerKey(200, 0)


def rect(layer: LayerKey, x0: int, y0: int, x1: int, y1: int) -> Boundary:
    return Boundary(layer, [(x0, y0), (x1, y0), (x1, y1), (x0, y1)])


def registry4() -> ClassRegistry:
    return ClassRegistry([
        ClassEntry(0, "alpha", "alpha"),
        ClassEntry(1, "beta", "beta"),
        ClassEntry(2, "leaf", "leaf"),
        ClassEntry(3, None, "not_generatable"),
    ])


def probe_classifier(probes: list[tuple[int, int]], k: int = 4):
    """Class chosen by the first probe channel with any geometry."""
    def classify(native: np.ndarray) -> np.ndarray:
        probs = np.full(k, 0.01)
        for channel, cls in probes:
            if native[channel].any():
                probs[cls] = 0.9
                return probs
        probs[0] = 0.9
        return probs
    return classify


def make_lib(cells: dict[str, Cell]) -> Library:
    return Library("T", cells)


def session_for(lib, top, probes, policy=DecisionPolicy()):
    return start_session(lib, top, probe_classifier(probes), registry4(),
                         policy=policy)


def drain(session):
    """examine_next until the queue stalls; new records in arrival order."""
    out = []
    while True:
        rec = session.examine_next()
        if rec is None:
            return out
        out.append(rec)


# --- basics ---

def test_unknown_top_is_rejected():
    lib = make_lib({"A": Cell("A")})
    with pytest.raises(NotFoundError):
        session_for(lib, "missing", [])


def test_empty_top_completes_immediately():
    lib = make_lib({"TOP": Cell("TOP")})
    s = session_for(lib, "TOP", [])
    assert s.examine_next() is None
    assert s.is_complete()
    rep = report(s)
    assert rep["counters"]["instances_visited"] == 0
    assert rep["counters"]["inference_calls"] == 0
    assert rep["complete"]
    assert skeleton_instance_count(emit_generator_skeleton(s)) == 0


def test_three_instances_of_one_design_fold_into_one_record():
    leaf = Cell("L", [rect(METAL1, 0, 0, 100, 100)])
    top = Cell("TOP", instances=[Instance("L", (0, 0)),
                                 Instance("L", (300, 0)),
                                 Instance("L", (600, 0))])
    s = session_for(make_lib({"L": leaf, "TOP": top}), "TOP", [(5, 0)])
    rec = s.examine_next()
    assert rec.status == PENDING
    assert s.examine_next() is None
    assert rec.instance_count == 3
    assert s.inference_calls == 1
    assert s.instances_visited == 3
    assert [site.path for site in rec.sites] == \
        ["TOP/L[0]", "TOP/L[1]", "TOP/L[2]"]


def test_array_placements_expand_into_sites():
    leaf = Cell("L", [rect(METAL1, 0, 0, 50, 50)])
    top = Cell("TOP", instances=[
        Instance("L", (0, 0), array=ArraySpec(2, 3, (0, 200), (200, 0)))])
    s = session_for(make_lib({"L": leaf, "TOP": top}), "TOP", [(5, 0)])
    rec = s.examine_next()
    s.examine_next()
    assert rec.instance_count == 6
    assert s.inference_calls == 1
    assert {(site.x, site.y) for site in rec.sites} == \
        {(x, y) for y in (0, 200) for x in (0, 200, 400)}


# --- descent and memoization ---

def nested_lib():
    leaf = Cell("L", [rect(METAL3, 0, 0, 60, 60)])
    mid = Cell("M", [rect(METAL2, 0, 0, 200, 200)],
               instances=[Instance("L", (10, 10)), Instance("L", (120, 10))])
    amp = Cell("A", [rect(METAL1, 0, 0, 500, 500)],
               instances=[Instance("M", (20, 20)), Instance("L", (300, 300))])
    top = Cell("TOP", instances=[Instance("A", (0, 0)),
                                 Instance("A", (1000, 0)),
                                 Instance("M", (2000, 0)),
                                 Instance("L", (3000, 0))])
    return make_lib({"L": leaf, "M": mid, "A": amp, "TOP": top})


NESTED_PROBES = [(5, 0), (6, 1), (7, 2)]


def test_auto_examine_visits_all_placements_but_infers_once_per_design():
    s = session_for(nested_lib(), "TOP", NESTED_PROBES)
    auto_examine(s)
    assert s.is_complete()
    assert s.inference_calls == 3
    assert s.unique_designs_examined == 3
    assert s.instances_visited == 14
    by_name = {r.cell_name: r for r in s.queue()}
    assert by_name["A"].instance_count == 2
    assert by_name["M"].instance_count == 3
    assert by_name["L"].instance_count == 9


def test_partition_covers_every_visited_placement():
    s = session_for(nested_lib(), "TOP", NESTED_PROBES)
    auto_examine(s)
    rep = report(s)
    assert sum(rep["partition"].values()) == s.instances_visited
    assert rep["partition"]["approved"] == 14
    assert rep["partition"]["pending"] == 0


def test_pending_design_blocks_descent_until_approved():
    s = session_for(nested_lib(), "TOP", NESTED_PROBES)
    rec_a = s.examine_next()
    assert rec_a.cell_name == "A"
    rec_m = s.examine_next()       # top's direct M placement
    rec_l = s.examine_next()       # top's direct L placement
    assert s.examine_next() is None
    assert s.instances_visited == 4          # only top's own placements
    s.apply_decision(rec_a, "approve")
    assert s.examine_next() is None          # children fold into M/L records
    assert s.instances_visited > 4
    assert rec_m.status == PENDING and rec_l.status == PENDING


def test_auto_examine_is_deterministic():
    reps = []
    for _ in range(2):
        s = session_for(nested_lib(), "TOP", NESTED_PROBES)
        auto_examine(s)
        reps.append(report(s, include_timing=False))
    assert reps[0] == reps[1]


def test_assignments_map_every_approved_placement():
    s = session_for(nested_lib(), "TOP", NESTED_PROBES)
    auto_examine(s)
    rep = report(s)
    assert len(rep["assignments"]) == 14
    assert rep["assignments"]["TOP/L[0]"] == "leaf"
    assert rep["assignments"]["TOP/A[0]/M[0]/L[0]"] == "leaf"
    assert rep["assignments"]["TOP/A[1]"] == "alpha"


# --- decisions ---

def ng_lib():
    leaf = Cell("L", [rect(METAL3, 0, 0, 60, 60)])
    odd = Cell("B", [rect(METAL2, 0, 0, 300, 300)],
               instances=[Instance("L", (10, 0))])
    top = Cell("TOP", instances=[Instance("B", (100, 200), rotation=90),
                                 Instance("L", (900, 0))])
    return make_lib({"L": leaf, "B": odd, "TOP": top})


NG_PROBES = [(6, 3), (7, 2)]    # metal2 designs are not generatable


def test_ng_verdict_waits_for_designer_choice():
    s = session_for(ng_lib(), "TOP", NG_PROBES)
    recs = drain(s)
    by_name = {r.cell_name: r for r in recs}
    assert by_name["B"].status == AUTO_NG
    assert by_name["B"].ng_resolution is None
    assert not s.is_complete()
    s.apply_decision(by_name["L"], "approve")
    s.apply_decision(by_name["B"], "manual")
    assert s.is_complete()
    assert report(s)["partition"]["ng_manual"] == 1


def test_flatten_splices_children_with_composed_placement():
    s = session_for(ng_lib(), "TOP", NG_PROBES)
    recs = drain(s)
    by_name = {r.cell_name: r for r in recs}
    s.apply_decision(by_name["L"], "approve")
    boundaries_before = len(s.lib.cells["TOP"].boundaries)
    s.apply_decision(by_name["B"], "flatten")
    # B's body rect moved into TOP, B's placement of L re-parented
    assert len(s.lib.cells["TOP"].boundaries) == boundaries_before + 1
    spliced = [i for i in s.lib.cells["TOP"].instances if i.ref_name == "L"]
    assert any(i.origin == (100, 210) and i.rotation == 90 for i in spliced)
    assert s.examine_next() is None     # exposed L folds into approved record
    assert by_name["L"].instance_count == 2
    assert s.inference_calls == 2       # no new inference for the exposed L
    exposed = by_name["L"].sites[-1]
    assert (exposed.x, exposed.y, exposed.rotation) == (100, 210, 90)
    assert exposed.path == "TOP/B[0]/L[0]"
    assert s.is_complete()


def test_flatten_rewrites_unvisited_queue_entries():
    # two placements of B; flatten after visiting only the first
    leaf = Cell("L", [rect(METAL3, 0, 0, 60, 60)])
    odd = Cell("B", [rect(METAL2, 0, 0, 300, 300)],
               instances=[Instance("L", (10, 0))])
    top = Cell("TOP", instances=[Instance("B", (0, 0)),
                                 Instance("B", (1000, 0))])
    s = session_for(make_lib({"L": leaf, "B": odd, "TOP": top}), "TOP",
                    NG_PROBES)
    rec_b = s.examine_next()
    assert rec_b.status == AUTO_NG and rec_b.instance_count == 1
    s.apply_decision(rec_b, "flatten")
    rec_l = s.examine_next()
    assert rec_l.cell_name == "L"
    assert s.examine_next() is None
    # both placements of B are gone; L appears once per former B site
    assert rec_b.instance_count == 1      # the unvisited B site never counts
    assert rec_l.instance_count == 2
    assert {site.path for site in rec_l.sites} == \
        {"TOP/B[0]/L[0]", "TOP/B[1]/L[0]"}
    assert not any(i.ref_name == "B" for i in s.lib.cells["TOP"].instances)
    rep = report(s)
    assert rep["partition"]["superseded"] == 1
    assert sum(rep["partition"].values()) == s.instances_visited


def test_reject_flatten_on_pending_record():
    s = session_for(nested_lib(), "TOP", NESTED_PROBES)
    rec_a = s.examine_next()
    s.apply_decision(rec_a, "reject_flatten")
    assert rec_a.status == REJECTED_FLATTENED
    auto_examine(s)
    assert s.is_complete()
    rep = report(s)
    assert rep["partition"]["superseded"] == rec_a.instance_count
    assert sum(rep["partition"].values()) == s.instances_visited


def test_reject_manual_leaves_no_assignment():
    s = session_for(nested_lib(), "TOP", NESTED_PROBES)
    rec_a = s.examine_next()
    s.apply_decision(rec_a, "reject_manual")
    auto_examine(s)
    rep = report(s)
    assert rec_a.status == REJECTED_MANUAL
    assert "TOP/A[0]" not in rep["assignments"]
    assert rep["partition"]["rejected_manual"] == 2


@pytest.mark.parametrize("first,second", [
    ("approve", "approve"),
    ("approve", "reject_manual"),
    ("reject_manual", "approve"),
])
def test_pending_decisions_are_single_shot(first, second):
    s = session_for(nested_lib(), "TOP", NESTED_PROBES)
    rec = s.examine_next()
    s.apply_decision(rec, first)
    with pytest.raises(StateError):
        s.apply_decision(rec, second)


def test_action_must_match_record_kind():
    s = session_for(ng_lib(), "TOP", NG_PROBES)
    by_name = {r.cell_name: r for r in drain(s)}
    with pytest.raises(StateError):
        s.apply_decision(by_name["B"], "approve")     # NG record
    with pytest.raises(StateError):
        s.apply_decision(by_name["L"], "flatten")     # pending record
    s.apply_decision(by_name["B"], "manual")
    with pytest.raises(StateError):
        s.apply_decision(by_name["B"], "flatten")     # already resolved


def test_decision_log_records_transitions():
    s = session_for(ng_lib(), "TOP", NG_PROBES)
    by_name = {r.cell_name: r for r in drain(s)}
    s.apply_decision(by_name["L"], "approve")
    s.apply_decision(by_name["B"], "manual")
    actions = [(d["action"], d["after"]) for d in s.decisions]
    assert actions == [("approve", APPROVED), ("manual", AUTO_NG)]


# --- skipped-empty designs ---

def test_unmapped_geometry_is_skipped_not_classified():
    ghost = Cell("G", [rect(UNMAPPED, 0, 0, 100, 100)])
    top = Cell("TOP", instances=[Instance("G", (0, 0)),
                                 Instance("G", (500, 0))])
    s = session_for(make_lib({"G": ghost, "TOP": top}), "TOP", [(5, 0)])
    assert s.examine_next() is None
    rec = s.queue()[0]
    assert rec.status == SKIPPED_EMPTY
    assert rec.instance_count == 2
    assert s.inference_calls == 0
    assert s.is_complete()
    rep = report(s)
    assert rep["partition"]["skipped_empty"] == 2
    skel = emit_generator_skeleton(s)
    assert "skip empty" in skel
    assert skeleton_instance_count(skel) == 2


# --- queue views ---

def test_queue_is_stable_first_visit_order_with_status_filter():
    s = session_for(nested_lib(), "TOP", NESTED_PROBES)
    drain(s)
    names = [r.cell_name for r in s.queue()]
    assert names == ["A", "M", "L"]
    assert [r.cell_name for r in s.queue(PENDING)] == ["A", "M", "L"]
    s.apply_decision(s.queue()[0], "approve")
    assert [r.cell_name for r in s.queue(PENDING)] == ["M", "L"]
    assert [r.cell_name for r in s.queue(APPROVED)] == ["A"]


# --- reports and skeleton ---

def test_report_text_and_json_render():
    s = session_for(nested_lib(), "TOP", NESTED_PROBES)
    auto_examine(s)
    text = report_text(s)
    assert "instances visited: 14" in text
    assert "alpha" in text
    parsed = __import__("json").loads(report_json(s))
    assert parsed["counters"]["inference_calls"] == 3


def test_skeleton_requires_completion():
    s = session_for(nested_lib(), "TOP", NESTED_PROBES)
    s.examine_next()
    with pytest.raises(StateError):
        emit_generator_skeleton(s)


def test_skeleton_stubs_match_report_instances():
    s = session_for(ng_lib(), "TOP", NG_PROBES)
    by_name = {r.cell_name: r for r in drain(s)}
    s.apply_decision(by_name["L"], "approve")
    s.apply_decision(by_name["B"], "manual")
    skel = emit_generator_skeleton(s)
    assert "call leaf(<params...>) at (900, 0, R0)" in skel
    assert "TODO develop-generator B" in skel
    rep = report(s)
    covered = sum(rep["partition"][k] for k in
                  ("approved", "rejected_manual", "ng_manual",
                   "skipped_empty"))
    assert skeleton_instance_count(skel) == covered


def test_skeleton_marks_orientation_and_mirror():
    leaf = Cell("L", [rect(METAL1, 0, 0, 60, 60)])
    top = Cell("TOP", instances=[
        Instance("L", (40, 50), rotation=270, mirrored_x=True)])
    s = session_for(make_lib({"L": leaf, "TOP": top}), "TOP", [(5, 0)])
    auto_examine(s)
    assert "at (40, 50, MX R270)" in emit_generator_skeleton(s)
