import csv

import pytest

from rwndq_sim.cli import main
from rwndq_sim.scenarios import preset

CSVS = ("throughput.csv", "drops.csv", "fct.csv")


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def incast_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("incast")
    code = main(["run", "--preset", "incast_50", "--discipline", "both", "--seed", "7",
                 "--duration", "1", "--out", str(out)])
    return code, out


def test_run_both_writes_three_csvs_each(incast_run, capsys):
    code, out = incast_run
    assert code == 0
    for d in ("fifo", "rwndq"):
        for name in CSVS:
            rows = read_rows(out / d / name)
            assert len(rows) >= 1
        assert read_rows(out / d / "throughput.csv")[0] == ["time", "flow_id", "bits_per_sec"]
        links = [r[0] for r in read_rows(out / d / "drops.csv")[1:]]
        assert links == ["1", "2", "3", "4", "5", "6"]
    summary = read_rows(out / "summary.csv")
    assert summary[0] == ["metric", "fifo", "rwndq"]
    metrics = {r[0] for r in summary[1:]}
    assert {"goodput_mbps", "jain_index", "total_drops", "flow_control_violations"} <= metrics


def test_same_command_is_bit_identical(incast_run, tmp_path):
    _, first = incast_run
    code = main(["run", "--preset", "incast_50", "--discipline", "both", "--seed", "7",
                 "--duration", "1", "--out", str(tmp_path)])
    assert code == 0
    for d in ("fifo", "rwndq"):
        for name in CSVS:
            assert (first / d / name).read_bytes() == (tmp_path / d / name).read_bytes()


def test_unknown_preset_exits_2(tmp_path, capsys):
    assert main(["run", "--preset", "nope", "--out", str(tmp_path)]) == 2
    assert "incast_50" in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv",
    [
        ["run"],
        ["run", "--preset", "incast_50", "--discipline", "red"],
        ["run", "--preset", "incast_50", "--duration", "-3"],
        ["run", "--preset", "incast_50", "--duration", "2", "--full-length"],
        ["frobnicate"],
    ],
)
def test_bad_flags_exit_2(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_bad_scenario_files_exit_2(tmp_path):
    missing = tmp_path / "missing.toml"
    assert main(["run", "--scenario", str(missing), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text('[scenario]\nname = "x"\nbogus = 1\n')
    assert main(["run", "--scenario", str(bad), "--out", str(tmp_path)]) == 2


def test_scenario_file_with_trace(tmp_path, capsys):
    scn = preset("dumbbell_bloat", duration=0.5, mice_start_s=0.2)
    path = tmp_path / "s.toml"
    path.write_text(scn.to_toml())
    out = tmp_path / "out"
    assert main(["run", "--scenario", str(path), "--discipline", "rwndq", "--trace", "--out", str(out)]) == 0
    assert (out / "rwndq" / "trace.txt").read_text().startswith("time_us event port flow size backlog\n")
    state = read_rows(out / "rwndq" / "port_state.csv")
    assert state[0] == ["time_us", "port", "conncount", "localwnd", "wnd", "backlog"] and len(state) > 1
    assert len(read_rows(out / "rwndq" / "fct.csv")) > 1
    assert "dumbbell_bloat/rwndq" in capsys.readouterr().out


def test_presets_listing(capsys):
    assert main(["presets"]) == 0
    out = capsys.readouterr().out
    assert "bloat_200_30" in out and "elephants=200" in out


def test_runtime_assertion_exits_1(tmp_path, monkeypatch, capsys):
    from rwndq_sim import scenarios

    def boom(*a, **k):
        raise AssertionError("scheduled into the past")

    monkeypatch.setattr(scenarios, "run", boom)
    assert main(["run", "--preset", "incast_50", "--discipline", "fifo", "--out", str(tmp_path)]) == 1
    assert "scheduled into the past" in capsys.readouterr().err
