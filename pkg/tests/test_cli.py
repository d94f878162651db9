import json
from pathlib import Path

import numpy as np
import pytest

from evospec.cli import main, read_series_csv, sha256_file
from evospec.ingest import load_dataset, load_station_csv, write_station_csv
from evospec.synthetic import SyntheticConfig, make_synthetic

RUN_CONFIG = {
    "seed": 7,
    "synth": {"T": 4320, "config": {"n_sites": 8, "jump_day": 2}, "hold_out": ["S06", "S07"]},
    "trend": {"jump_day": 2},
    "fit": {"offsets": [60, -60], "alpha": 0.99},
    "simulate": {"nsims": 9},
}


def _run(tmp: Path, name: str) -> Path:
    cfg = tmp / "run.json"
    cfg.write_text(json.dumps(RUN_CONFIG))
    assert main(["run", "--config", str(cfg), "--workdir", str(tmp / name)]) == 0
    return tmp / name


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    return tmp, _run(tmp, "a")


def test_end_to_end_produces_manifest_and_report(pipeline):
    _, w = pipeline
    man = json.loads((w / "run_manifest.json").read_text())
    assert [s["stage"] for s in man["stages"]] == ["synth", "ingest", "fit-trend", "fit", "simulate", "evaluate"]
    report = json.loads((w / "report.json").read_text())
    assert set(report["sites"]) == {"S06", "S07"}
    assert 0.0 <= report["coverage"] <= 1.0
    names, draws = read_series_csv(w / "ens" / "S06.csv")
    assert names == [f"draw_{i}" for i in range(1, 10)] and draws.shape == (4320, 9)
    names, bands = read_series_csv(w / "ens" / "S06_bands.csv")
    assert names == ["lower", "upper"] and np.all(bands[:, 0] <= bands[:, 1])


def test_every_artifact_embeds_its_hash_and_verifies(pipeline, capsys):
    _, w = pipeline
    for art in ("dataset.bin", "trend.json", "model.json", "report.json", "synth.csv", "ens"):
        assert main(["verify", str(w / art)]) == 0, art
    model = json.loads((w / "model.json").read_text())
    man = json.loads((w / "model.json.manifest.json").read_text())
    assert model["config_hash"] == man["config_hash"]
    assert (w / "ens" / "S07.csv").read_text().startswith("# config_hash=")


def test_rerun_gives_identical_artifacts(pipeline):
    tmp, w = pipeline
    w2 = _run(tmp, "b")
    files = sorted(p.relative_to(w) for p in w.rglob("*") if p.is_file() and p.name != "run_manifest.json")
    assert files
    for rel in files:
        a, b = w / rel, w2 / rel
        if rel.name.endswith(".manifest.json") or rel.name == "manifest.json":
            ma, mb = json.loads(a.read_text()), json.loads(b.read_text())
            assert ma["config_hash"] == mb["config_hash"] and ma["outputs"] == mb["outputs"], rel
        else:
            assert sha256_file(a) == sha256_file(b), rel


def test_verify_detects_tampering(pipeline, tmp_path):
    _, w = pipeline
    copy = tmp_path / "report.json"
    copy.write_text((w / "report.json").read_text().replace('"coverage"', '"coverage" ', 1))
    (tmp_path / "report.json.manifest.json").write_text((w / "report.json.manifest.json").read_text())
    assert main(["verify", str(copy)]) == 2


def test_missing_input_leaves_outputs_untouched(pipeline, tmp_path):
    _, w = pipeline
    out = tmp_path / "model.json"
    out.write_text("previous")
    rc = main(["fit", "--data", str(w / "dataset.bin"), "--trend", str(tmp_path / "nope.json"),
               "--out", str(out)])
    assert rc == 2
    assert out.read_text() == "previous"
    assert sorted(p.name for p in tmp_path.iterdir()) == ["model.json"]


def test_numerical_failure_exit_code(pipeline, tmp_path):
    _, w = pipeline
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"alpha": 0.99, "offsets": [[700, -700]]}))
    rc = main(["gridsearch", "--grid", str(grid), "--data", str(w / "dataset.bin"), "--trend",
               str(w / "trend.json"), "--out", str(tmp_path / "t.csv")])
    assert rc == 3
    assert not (tmp_path / "t.csv").exists()


def test_ingest_fills_gaps(tmp_path):
    truth = make_synthetic(SyntheticConfig(n_sites=3, days=1, jump=False, seed=2))
    temps = truth.data.temps.copy()
    temps[1, 100:103] = np.nan
    write_station_csv(truth.data.with_temps(temps), tmp_path / "raw.csv")
    rc = main(["ingest", "--csv", str(tmp_path / "raw.csv"), "--meta", str(tmp_path / "raw.json"),
               "--out", str(tmp_path / "d.bin")])
    assert rc == 0
    data = load_dataset(tmp_path / "d.bin")
    assert data.n_missing == 0
    np.testing.assert_allclose(data.temps[1, 100:103], np.linspace(temps[1, 99], temps[1, 103], 5)[1:4])
    man = json.loads((tmp_path / "d.bin.manifest.json").read_text())
    assert man["info"]["filled_gaps"] == 3


def test_malformed_csv_is_a_validation_error(tmp_path):
    (tmp_path / "bad.csv").write_text("minute,a,radiation\n1,2.0\n")
    (tmp_path / "bad.json").write_text(json.dumps({"sites": [{"id": "a", "lon": 0, "lat": 0}]}))
    assert main(["ingest", "--csv", str(tmp_path / "bad.csv"), "--meta", str(tmp_path / "bad.json"),
                 "--out", str(tmp_path / "d.bin")]) == 2


def test_synth_writes_loadable_station_file(tmp_path):
    layout = {"sites": [{"id": "A", "lon": -100.0, "lat": 37.0, "elev": 400},
                        {"id": "B", "lon": -100.2, "lat": 37.1, "elev": 500},
                        {"id": "C", "lon": -99.8, "lat": 36.9, "elev": 600}],
              "config": {"jump": False}}
    (tmp_path / "layout.json").write_text(json.dumps(layout))
    assert main(["synth", "--sites", str(tmp_path / "layout.json"), "--T", "1440", "--seed", "3",
                 "--out", str(tmp_path / "s.csv")]) == 0
    data = load_station_csv(tmp_path / "s.csv")
    assert data.site_ids == ["A", "B", "C"] and data.T == 1440
    assert main(["synth", "--sites", str(tmp_path / "layout.json"), "--T", "1000", "--seed", "3",
                 "--out", str(tmp_path / "t.csv")]) == 2


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for cmd in ("ingest", "fit-trend", "fit", "gridsearch", "simulate", "evaluate", "synth", "verify", "run"):
        assert cmd in out
