import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from screenmap.ingest import (
    DEFAULT_SCHEMA,
    INPUT_SCHEMA,
    FeatureSpec,
    SchemaError,
    build_response,
    filter_eligible,
    parse_facilities,
    parse_units,
    serialize_units,
    summary_stats,
)
from screenmap.synth import synth_generate

SMALL = (FeatureSpec("poverty_pct"), FeatureSpec("urban", "binary"))
HEADER = "id,lat,lon,rate_y1,rate_y2,poverty_pct,urban\n"


def parse(body, schema=SMALL):
    return parse_units(io.StringIO(HEADER + body), schema)


def test_default_schema_has_thirteen_variables_two_binary():
    assert len(DEFAULT_SCHEMA) == 13
    assert sorted(f.name for f in DEFAULT_SCHEMA if f.is_binary) == ["primary_care_shortage", "urban"]
    assert len({f.name for f in DEFAULT_SCHEMA}) == 13


def test_duplicate_feature_names_rejected():
    from screenmap.ingest import check_schema

    with pytest.raises(ValueError, match="unique"):
        check_schema([FeatureSpec("a"), FeatureSpec("a", "binary")])


def test_parse_plain_row():
    ds, rep = parse("T1,35.1,-90.0,77.0,76.5,12.5,1\n")
    assert rep.ok
    u = ds.unit(0)
    assert (u.id, u.rate_y1, u.rate_y2) == ("T1", 77.0, 76.5)
    assert u.centroid.lat == 35.1 and u.centroid.lon == -90.0
    assert u.features == (12.5, 1.0)


def test_missing_rate_kept_before_filter():
    ds, rep = parse("T1,35.1,-90.0,,76.5,12.5,1\n")
    assert rep.ok and len(ds) == 1
    assert math.isnan(ds.rate_y1[0])
    assert rep.missing_counts["rate_y1"] == 1
    assert (rep.eligible, rep.ineligible) == (0, 1)


def test_non_binary_value_is_row_error():
    ds, rep = parse("T1,35.1,-90.0,77,76,12.5,2\nT2,35.2,-90.0,77,76,12.5,0\n")
    assert len(ds) == 1
    assert [e["message"] for e in rep.errors] == ["non-binary value '2'"]
    assert rep.errors[0]["id"] == "T1"


@pytest.mark.parametrize(
    "row,message",
    [
        ("T1,95,-90,77,76,1,0", "bad coordinate"),
        ("T1,35,-90,120,76,1,0", "out-of-range rate 120"),
        ("T1,35,-90,77,76,abc,0", "unparseable number 'abc'"),
        ("T1,35,-90,77,76,1", "expected 7 cells, found 6"),
    ],
)
def test_row_errors(row, message):
    ds, rep = parse(row + "\n")
    assert len(ds) == 0
    assert rep.errors[0]["message"] == message
    assert not rep.ok


def test_duplicate_ids_reported():
    ds, rep = parse("A,35,-90,77,76,1,0\nA,35,-90,77,76,1,0\n")
    assert len(ds) == 1
    assert rep.errors[0]["message"] == "duplicate id"


def test_missing_required_header_is_fatal():
    with pytest.raises(SchemaError, match="rate_y2"):
        parse_units(io.StringIO("id,lat,lon,rate_y1,poverty_pct,urban\n"), SMALL)


def test_missing_feature_column_is_fatal():
    with pytest.raises(SchemaError, match="urban"):
        parse_units(io.StringIO("id,lat,lon,rate_y1,rate_y2,poverty_pct\n"), SMALL)


def test_facilities_parse():
    fs, rep = parse_facilities(io.StringIO("id,lat,lon\nF1,35,-90\nF2,36,-91\nF3,999,0\n"))
    assert list(fs.ids) == ["F1", "F2"]
    assert rep.errors[0]["message"] == "bad coordinate"


def test_filter_eligible_rule():
    ds, _ = parse("a,35,-90,77,76,1,0\nb,35,-90,,76,1,0\nc,35,-90,77,,1,0\n")
    out = filter_eligible(ds)
    assert list(out.ids) == ["a"]


def test_filter_eligible_identity_when_complete():
    ds, _ = parse("a,35,-90,77,76,1,0\nb,35,-91,70,71,2,1\n")
    out = filter_eligible(ds)
    assert list(out.ids) == list(ds.ids)
    np.testing.assert_array_equal(out.X, ds.X)


@pytest.mark.parametrize("r1,r2,expected", [(77.0, 76.5, 76.75), (63.2, 63.2, 63.2), (0.0, 100.0, 50.0)])
def test_build_response(r1, r2, expected):
    ds, _ = parse(f"a,35,-90,{r1},{r2},1,0\n")
    assert build_response(ds).response[0] == expected


def test_build_response_names_offending_unit():
    ds, _ = parse("good,35,-90,77,76,1,0\nbad,35,-90,,76,1,0\n")
    with pytest.raises(ValueError, match="'bad'"):
        build_response(ds)


@given(st.floats(0, 100), st.floats(0, 100))
def test_build_response_symmetric_in_years(a, b):
    ds1, _ = parse(f"a,35,-90,{a!r},{b!r},1,0\n")
    ds2, _ = parse(f"a,35,-90,{b!r},{a!r},1,0\n")
    assert build_response(ds1).response[0] == build_response(ds2).response[0]


def test_round_trip_bit_exact():
    ds, _, _ = synth_generate(60, 5, 3, "linear_response", missing_frac=0.1, ineligible_frac=0.2)
    text = serialize_units(ds)
    back, rep = parse_units(io.StringIO(text), INPUT_SCHEMA)
    assert rep.ok
    assert serialize_units(back) == text
    assert list(back.ids) == list(ds.ids)
    np.testing.assert_array_equal(back.X, ds.X)
    np.testing.assert_array_equal(back.rate_y1, ds.rate_y1)


@given(st.lists(st.tuples(st.floats(0, 100) | st.none(), st.floats(-1e9, 1e9) | st.none(), st.sampled_from([0, 1, None])),
                min_size=1, max_size=20))
@settings(max_examples=100)
def test_round_trip_property(rows):
    lines = []
    for i, (rate, x, b) in enumerate(rows):
        cells = [f"u{i}", "35.5", "-90.25", "" if rate is None else repr(rate), "50.0",
                 "" if x is None else repr(x), "" if b is None else str(b)]
        lines.append(",".join(cells))
    ds, rep = parse("\n".join(lines) + "\n")
    assert rep.ok
    again, _ = parse_units(io.StringIO(serialize_units(ds)), SMALL)
    assert serialize_units(again) == serialize_units(ds)


def test_filter_shrinks_and_leaves_finite_rates():
    ds, _, _ = synth_generate(100, 5, 1, "linear_response", ineligible_frac=0.3)
    out = filter_eligible(ds)
    assert len(out) <= len(ds)
    assert np.all(np.isfinite(out.rate_y1)) and np.all(np.isfinite(out.rate_y2))


def test_summary_stats_shape():
    ds, _, _ = synth_generate(50, 5, 2, "linear_response", missing_frac=0.1)
    s = summary_stats(build_response(ds))
    assert s["n_units"] == 50
    v = s["variables"]
    assert set(v["rate_y1"]) >= {"mean", "sd", "missing"}
    assert set(v["urban"]["categories"]) == {"0", "1"}
    assert v["urban"]["categories"]["0"]["n"] + v["urban"]["categories"]["1"]["n"] + v["urban"]["missing"] == 50
    assert v["poverty_pct"]["missing"] == int(np.isnan(ds.column("poverty_pct")).sum())


# --- synthetic generator ---------------------------------------------------

def test_synth_deterministic():
    a = synth_generate(100, 10, 42, "planted_hotspot")
    b = synth_generate(100, 10, 42, "planted_hotspot")
    assert serialize_units(a[0]) == serialize_units(b[0])
    np.testing.assert_array_equal(a[1].coords, b[1].coords)
    assert a[2].block_ids == b[2].block_ids


def test_synth_seed_changes_output():
    a = synth_generate(100, 10, 1, "planted_hotspot")
    b = synth_generate(100, 10, 2, "planted_hotspot")
    assert serialize_units(a[0]) != serialize_units(b[0])


def test_synth_linear_zero_noise_exact():
    ds, _, truth = synth_generate(80, 3, 5, "linear_response", noise=0.0)
    resp = build_response(ds).response
    np.testing.assert_array_equal(resp, truth.response_function(ds.X))


def test_synth_planted_block_recorded():
    ds, _, truth = synth_generate(400, 10, 9, "planted_hotspot", noise=0.0)
    assert truth.delta == 0.0
    ds, _, truth = synth_generate(400, 10, 9, "planted_hotspot")
    assert truth.delta == pytest.approx(3.0)
    assert len(truth.block_ids) == 36 and len(truth.block_core_ids) == 16
    assert set(truth.block_core_ids) <= set(truth.block_ids)
    inside = np.isin(ds.ids, truth.block_ids)
    gap = truth.response_true[inside].mean() - truth.response_true[~inside].mean()
    assert gap > 2.0


def test_synth_rejects_bad_scenario():
    with pytest.raises(ValueError, match="unknown scenario"):
        synth_generate(10, 1, 0, "volcano")
