import pytest

from ttvm import bench, programs

from refvm import callabit_ref, loop_ref, loopabit_ref


def test_default_suite_shape():
    cells = bench.default_suite()
    by_program = {}
    for c in cells:
        by_program.setdefault(c.program, []).append(c.label)
    assert by_program["loop"] == ["interp", "t1", "t2"]
    assert by_program["callabit"] == ["interp", *programs.CALLABIT_VARIANTS]
    assert {c.arg for c in cells if c.program == "loop"} == {1000}


def test_variant_cells_carry_mode_and_entry_tier():
    cells = bench.cells_for("callabit", 5, ["a", "e", "t1-only"])
    assert [(c.label, c.mode, c.entry_tier) for c in cells] == [
        ("baseline_interp", "annotated", "t1"),
        ("tracing_only", "annotated", "t2"),
        ("t1", "t1", "t1"),
    ]


def test_suite_results_and_normalisation():
    cells = bench.cells_for("loop", 40, ["interp", "t1", "t2"])
    cells += bench.cells_for("loopabit", 6, ["interp", "t2"])
    cells += bench.cells_for("callabit", 6, ["interp", "b", "e"])
    report = bench.run_suite(cells, iterations=4, startup_runs=2, t2_loop_threshold=5)
    bench.validate_report(report)
    expected = {"loop": loop_ref(40), "loopabit": loopabit_ref(6), "callabit": callabit_ref(6)}
    for row in report["rows"]:
        assert row["ok"] and row["result"] == expected[row["program"]]
        if row["label"] == "interp":
            assert row["normalized_stable"] == row["normalized_startup"] == 1.0
            assert row["emitted_ops"] == 0
        else:
            assert row["normalized_stable"] > 0


def test_counts_are_deterministic():
    cell = bench.cells_for("callabit", 20, ["e"])[0]
    keys = ("recorded_ops", "emitted_ops", "guards", "compilations", "guard_deopts", "decodes", "dispatches")
    first = bench.run_cell(cell, iterations=5, startup_runs=1)
    second = bench.run_cell(cell, iterations=5, startup_runs=1)
    assert [getattr(first, k) for k in keys] == [getattr(second, k) for k in keys]


def test_broken_cell_is_reported(tmp_path):
    path = tmp_path / "bad.tla"
    # the argument is consumed by the first POP, so EXIT underflows
    path.write_text("POP\nEXIT\n")
    row = bench.run_cell(bench.Cell(str(path), 0, "interp", "interp"), iterations=2, startup_runs=1)
    assert not row.ok and row.error == "stack-underflow at pc 1"


def test_schema_rejects_missing_rows():
    jsonschema = pytest.importorskip("jsonschema")
    with pytest.raises(jsonschema.ValidationError):
        bench.validate_report({"schema_version": 1, "protocol": {}, "thresholds": {}})


def test_load_suite_resolves_relative_paths(tmp_path):
    (tmp_path / "p.tla").write_text("EXIT\n")
    suite = tmp_path / "suite.json"
    suite.write_text('[["p.tla", 3, ["interp"]], {"program": "loop", "arg": 2, "modes": ["t2"]}]')
    cells = bench.load_suite(suite)
    assert cells[0].program == str(tmp_path / "p.tla")
    assert (cells[1].program, cells[1].arg, cells[1].mode) == ("loop", 2, "t2")
