import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from gazelens.core import (Fixation, GazeSample, RelevanceLabel, Scanpath, TrialRecord, level_of,
                           validate_scanpath)
from gazelens.errors import BelowFloor


def make_scanpath(n, dur=200.0, gap=40.0, x0=100.0):
    fixes, t = [], 0.0
    for i in range(n):
        fixes.append(Fixation(x0 + 50 * i, 300.0, t, t + dur))
        t += dur + gap
    return Scanpath(tuple(fixes), trial_id="t")


def test_valid_scanpath_has_no_violations():
    assert validate_scanpath(make_scanpath(12)) == []


def test_overlap_reported_once():
    sp = Scanpath((Fixation(10, 10, 0, 200), Fixation(60, 10, 150, 400)))
    v = validate_scanpath(sp)
    assert [x.kind for x in v] == ["temporal overlap"]
    assert v[0].index == 1 and v[0].field == "fixations"


def test_short_fixation_reported():
    sp = Scanpath((Fixation(10, 10, 0, 200), Fixation(60, 10, 300, 390)))
    assert [(x.kind, x.index) for x in validate_scanpath(sp)] == [("below 110 ms floor", 1)]


def test_out_of_order_and_nonpositive():
    sp = Scanpath((Fixation(10, 10, 500, 700), Fixation(60, 10, 0, 0)))
    kinds = {x.kind for x in validate_scanpath(sp)}
    assert kinds == {"non-positive duration", "out of order"}


def test_non_finite_is_reported_not_raised():
    sp = Scanpath((Fixation(float("nan"), 10, 0, 200),))
    assert any(v.kind == "non-finite" for v in validate_scanpath(sp))


def test_clamping_preserves_count_and_notes():
    sp = Scanpath((Fixation(-5, 20, 0, 200), Fixation(1680, 1050, 300, 500), Fixation(10, 10, 600, 800)))
    assert len(sp) == 3
    c = sp.centroids()
    assert c[0, 0] == 0.0
    assert c[1, 0] < 1680 and c[1, 1] < 1050
    assert len(sp.notes) == 2
    assert validate_scanpath(sp) == []


@pytest.mark.parametrize("d,level", [(110, 1), (249.9, 1), (250, 2), (399, 2), (400, 3), (549.99, 3),
                                     (550, 4), (5000, 4)])
def test_level_bins(d, level):
    assert level_of(d) == level


def test_level_below_floor():
    with pytest.raises(BelowFloor):
        level_of(109.9)


def test_label_binary():
    assert list(RelevanceLabel) == [RelevanceLabel.RELEVANT, RelevanceLabel.IRRELEVANT]
    assert RelevanceLabel.from_y(1).y == 1 and RelevanceLabel.from_y(0).y == 0


def test_sample_rejects_negative_time():
    with pytest.raises(ValueError):
        GazeSample(-1.0, 0, 0)


def test_trial_record_exclusion_invariant():
    TrialRecord("a", "p", "d", "relevant", fixation_count=9, split="excluded")
    TrialRecord("a", "p", "d", "relevant", fixation_count=10, split="train")
    with pytest.raises(ValueError):
        TrialRecord("a", "p", "d", "relevant", fixation_count=9, split="train")
    with pytest.raises(ValueError):
        TrialRecord("a", "p", "d", "relevant", fixation_count=10, split="excluded")
    with pytest.raises(ValueError):
        TrialRecord("a", "p", "d", "relevant", split="test")


coords = st.floats(0, 1679, allow_nan=False)
durations = st.integers(110, 2000)


@st.composite
def scanpaths(draw):
    n = draw(st.integers(0, 15))
    t, fixes = 0.0, []
    for _ in range(n):
        d = draw(durations)
        fixes.append(Fixation(draw(coords), draw(st.floats(0, 1049)), t, t + d))
        t += d + draw(st.integers(0, 100))
    return Scanpath(tuple(fixes), trial_id=draw(st.text(max_size=8)))


@given(scanpaths())
def test_scanpath_json_round_trip(sp):
    back = Scanpath.from_dict(json.loads(json.dumps(sp.to_dict())))
    assert back == sp


@given(scanpaths())
def test_validation_pure_and_clean(sp):
    assert validate_scanpath(sp) == validate_scanpath(sp) == []


@given(st.integers(0, 40), st.sampled_from(list(RelevanceLabel)), st.booleans())
def test_trial_record_round_trip(count, label, with_paths):
    split = "excluded" if count < 10 else "val"
    r = TrialRecord("id", "p1", "doc", label, count, "g.csv" if with_paths else None, None,
                    "i.png" if with_paths else None, split)
    assert TrialRecord.from_dict(json.loads(json.dumps(r.to_dict()))) == r


def test_fixation_fields_are_plain_floats():
    import numpy as np
    f = Fixation(np.float64(1.5), 2, 0, np.float32(120))
    assert all(type(v) is float for v in (f.cx, f.cy, f.t_start, f.t_end))
    assert math.isclose(f.duration, 120)
