import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from atlascrop.errors import InvalidArgumentError, UndefinedNCCError
from atlascrop.metrics import crop_metrics, dice_score, ncc, summarize_cases, table_rows

masks = arrays(bool, (4, 5, 3))


def test_dice_examples():
    a = np.zeros((4, 4, 4), bool)
    b = a.copy()
    assert dice_score(a, b) == 1.0
    a[:2] = True
    assert dice_score(a, b) == 0.0
    b[1:3] = True
    assert dice_score(a, b) == pytest.approx(0.5)
    with pytest.raises(InvalidArgumentError):
        dice_score(a, b[:3])


@given(masks, masks)
@settings(max_examples=50, deadline=None)
def test_dice_symmetric_and_bounded(a, b):
    d = dice_score(a, b)
    assert d == dice_score(b, a) and 0.0 <= d <= 1.0


def test_ncc_examples(rng):
    a = rng.normal(size=(5, 5, 5))
    assert ncc(a, a) == pytest.approx(1.0)
    assert ncc(a, -2 * a + 3) == pytest.approx(-1.0)
    b = rng.normal(size=a.shape)
    assert ncc(a, b) == pytest.approx(np.corrcoef(a.ravel(), b.ravel())[0, 1], abs=1e-12)
    with pytest.raises(UndefinedNCCError):
        ncc(a, np.ones_like(a))


def test_crop_metrics_example():
    fg = np.zeros((10, 10, 10), bool)
    fg[2:4, 2:4, 2:4] = True
    fg[8, 8, 8] = True
    m = crop_metrics(fg, [((0, 5), (0, 5), (0, 5))])
    assert m["preserved_pct"] == pytest.approx(800 / 9)
    assert m["fg_fraction_before"] == pytest.approx(9 / 1000)
    assert m["fg_fraction_after"] == pytest.approx(8 / 125)


def test_crop_metrics_overlap_counted_once():
    fg = np.ones((4, 4, 4), bool)
    m = crop_metrics(fg, [((0, 3), (0, 4), (0, 4)), ((1, 4), (0, 4), (0, 4))])
    assert m["preserved_pct"] == 100.0 and m["n_box_voxels"] == 64
    with pytest.raises(InvalidArgumentError):
        crop_metrics(fg, [((0, 5), (0, 4), (0, 4))])


@given(masks, st.integers(0, 4), st.integers(0, 4))
@settings(max_examples=50, deadline=None)
def test_preserved_monotone_in_box(fg, a, b):
    small, large = min(a, b), max(a, b)
    p_small = crop_metrics(fg, [((0, small), (0, 5), (0, 3))])["preserved_pct"]
    p_large = crop_metrics(fg, [((0, large), (0, 5), (0, 3))])["preserved_pct"]
    assert p_small <= p_large


def test_summary_rows():
    rows = [
        {"preserved_pct": 100.0, "fg_fraction_before": 0.1, "fg_fraction_after": 0.5, "seconds_per_case": 1.0, "orientation_correct": True},
        {"preserved_pct": 90.0, "fg_fraction_before": 0.2, "fg_fraction_after": 0.3, "seconds_per_case": 2.0, "orientation_correct": False},
    ]
    s = summarize_cases(rows)
    assert s["preserved_pct"] == 95.0 and s["orientation_correct_pct"] == 50.0
    out = table_rows(s, "liver")
    assert [r["row"] for r in out][0] == "preserved foreground" and len(out) == 5
