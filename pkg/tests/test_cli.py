import json

import pytest

from dctrack import cli
from dctrack.dataset_io import RecoTrack, read_events, read_reco, write_reco


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    """A 20-event noisy single-track sample, reconstructed once."""
    d = tmp_path_factory.mktemp("small")
    data, reco = d / "hits.csv", d / "reco.csv"
    assert run("generate", data, "--seed", 5, "-n", 20) == 0
    assert run("reconstruct", data, reco) == 0
    return d, data, reco


def test_generate_is_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run("generate", a, "--seed", 9, "-n", 10) == 0
    assert run("generate", b, "--seed", 9, "-n", 10) == 0
    assert a.read_bytes() == b.read_bytes()
    c = tmp_path / "c.csv"
    assert run("generate", c, "--seed", 10, "-n", 10) == 0
    assert a.read_bytes() != c.read_bytes()


def test_generate_manifest(small):
    _, data, _ = small
    man = json.loads(cli.manifest_path(data).read_text())
    n_lines = len(data.read_text().splitlines()) - 1
    assert man["n_hits"] == n_lines
    assert man["n_events"] == 20
    assert man["event_ids"] == [0, 19]
    assert man["seed"] == 5
    assert man["config"]["category"] == "single"
    assert len(man["config_hash"]) == 64
    assert man["data_sha256"] == cli._file_hash(data)


def test_generate_close_by_has_two_truths(tmp_path):
    out = tmp_path / "cb.csv"
    assert run("generate", out, "--seed", 1, "-n", 5, "--category", "close-by-two") == 0
    events, _ = read_events(out)
    assert all(len(e.truth) == 2 for e in events)


def test_generate_from_config(tmp_path):
    cfg = tmp_path / "gen.ini"
    cfg.write_text("[generate]\nseed = 4\nevents = 3\nnoise_rate = 0\n")
    out = tmp_path / "g.csv"
    assert run("generate", out, "--config", cfg) == 0
    man = json.loads(cli.manifest_path(out).read_text())
    assert man["n_events"] == 3 and man["config"]["noise_rate"] == 0
    assert man["n_hits"] == man["n_signal_hits"]


@pytest.mark.parametrize("argv", [
    ["generate", "{d}/x.csv"],  # no seed
    ["generate", "{d}/x.csv", "--seed", "1", "-n", "-3"],
    ["generate", "{d}/x.csv", "--seed", "1", "--efficiency", "1.5"],
    ["generate", "{d}/nodir/x.csv", "--seed", "1"],
    ["generate", "{d}/x.csv", "--config", "{d}/missing.ini"],
    ["reconstruct", "{d}/missing.csv", "{d}/r.csv"],
])
def test_config_errors_exit_2(tmp_path, argv):
    assert run(*[a.format(d=tmp_path) for a in argv]) == cli.EXIT_CONFIG


def test_unknown_config_key_exits_2(small, tmp_path):
    _, data, _ = small
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[finder]\nroad_widht = 0.5\n")
    assert run("reconstruct", data, tmp_path / "r.csv", "--config", cfg) == cli.EXIT_CONFIG
    cfg.write_text("[fitter]\nn_passes = many\n")
    assert run("reconstruct", data, tmp_path / "r.csv", "--config", cfg) == cli.EXIT_CONFIG


def test_bad_jobs_exits_2(small, tmp_path):
    _, data, _ = small
    assert run("reconstruct", data, tmp_path / "r.csv", "-j", 0) == cli.EXIT_CONFIG


def test_schema_error_exits_3(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("eventIndex,foo\n0,1\n")
    assert run("reconstruct", bad, tmp_path / "r.csv") == cli.EXIT_SCHEMA
    data = tmp_path / "d.csv"
    assert run("generate", data, "--seed", 1, "-n", 2) == 0
    assert run("evaluate", data, bad, "--out-dir", tmp_path) == cli.EXIT_SCHEMA


def test_alignment_error_exits_4(small, tmp_path):
    _, data, reco = small
    other = tmp_path / "other.csv"
    assert run("generate", other, "--seed", 5, "-n", 10, "--first-id", 100) == 0
    assert run("evaluate", other, reco, "--out-dir", tmp_path) == cli.EXIT_ALIGNMENT


def test_reconstruct_outputs(small):
    _, data, reco = small
    rows = read_reco(reco)
    assert set(rows) == {"finding", "fitting"}
    assert set(rows["finding"]) == set(rows["fitting"])
    man = json.loads(cli.manifest_path(reco).read_text())
    assert man["stages"] == ["finding", "fitting"]
    assert man["event_ids"] == list(range(20))
    assert man["input_sha256"] == cli._file_hash(data)
    assert man["jobs"] == 1


def test_no_fit_writes_seeds_only(small, tmp_path):
    _, data, reco = small
    seeds = tmp_path / "seeds.csv"
    assert run("reconstruct", data, seeds, "--no-fit") == 0
    rows = read_reco(seeds)
    assert set(rows) == {"finding"}
    full = read_reco(reco)["finding"]
    assert {k: [t.hit_keys for t in v] for k, v in rows["finding"].items()} == {
        k: [t.hit_keys for t in v] for k, v in full.items()}


def test_jobs_do_not_change_output(small, tmp_path):
    _, data, reco = small
    par = tmp_path / "par.csv"
    assert run("reconstruct", data, par, "-j", 2) == 0
    assert par.read_bytes() == reco.read_bytes()


def test_evaluate_writes_both_stages(small, tmp_path, capsys):
    _, data, reco = small
    assert run("evaluate", data, reco, "--out-dir", tmp_path) == 0
    for stage in ("finding", "fitting"):
        assert (tmp_path / f"metrics_{stage}.csv").is_file()
        assert (tmp_path / f"metrics_{stage}.txt").is_file()
    assert "Track finding efficiency" in capsys.readouterr().out


def _truth_as_reco(events, path):
    rows = []
    for e in events:
        for t in e.truth:
            track = RecoTrack(t.track_index, frozenset(h.wire for h in t.detectable_hits), t.helix())
            rows.append((e.event_id, "fitting", track))
    write_reco(rows, path)


def test_truth_as_reco_is_perfect(small, tmp_path):
    _, data, _ = small
    events, _ = read_events(data)
    path = tmp_path / "truth.csv"
    _truth_as_reco(events, path)
    res = cli.evaluate_files(data, path)
    rep = res["fitting"][0]
    assert rep.eps_track.value == 1.0
    assert rep.eps_track_q.value == 1.0
    assert rep.r_fake.value == 0.0 and rep.r_clone.value == 0.0
    assert rep.pt_resolution == pytest.approx(0.0, abs=1e-7)


def test_empty_reco_gives_zero_efficiency(small, tmp_path):
    _, data, _ = small
    path = tmp_path / "empty.csv"
    write_reco([], path)
    res = cli.evaluate_files(data, path)
    rep = res["finding"][0]
    assert rep.n_detectable > 0
    assert rep.eps_track.value == 0.0 and rep.r_fake.value == 0.0


def test_rates_match_aggregate_counts(small):
    _, data, reco = small
    rep, pt_bins, cos_bins = cli.evaluate_files(data, reco)["fitting"]
    assert rep.eps_track.value == pytest.approx(rep.n_matched / rep.n_detectable)
    assert rep.eps_track_q.value + rep.r_wrong_q.value == pytest.approx(rep.eps_track.value)
    assert sum(b.report.n_detectable for b in pt_bins) <= rep.n_detectable


def test_custom_bins(small, tmp_path):
    _, data, reco = small
    assert run("evaluate", data, reco, "--out-dir", tmp_path, "--bins-pt", "0.1:1.6:3") == 0
    rows = cli._read_rows(tmp_path / "metrics_fitting.csv")
    assert "pt[2].lo" in rows and "pt[3].lo" not in rows
    assert run("evaluate", data, reco, "--out-dir", tmp_path, "--bins-pt", "1,0.5") == cli.EXIT_CONFIG


def test_report_table(small, tmp_path, capsys):
    _, data, reco = small
    assert run("evaluate", data, reco, "--out-dir", tmp_path) == 0
    capsys.readouterr()
    assert run("report", f"seed={tmp_path / 'metrics_finding.csv'}",
               f"fit={tmp_path / 'metrics_fitting.csv'}") == 0
    out = capsys.readouterr().out
    assert "seed" in out and "fit" in out
    assert "Wrong charge rate (%)" in out
    assert run("report", tmp_path / "nope.csv") == cli.EXIT_CONFIG


def test_report_rejects_non_metrics_file(small, capsys):
    _, data, _ = small
    assert run("report", data) == cli.EXIT_SCHEMA


def test_parse_edges():
    assert list(cli.parse_edges("0:1:4")) == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert list(cli.parse_edges("0.1, 0.2,0.4")) == [0.1, 0.2, 0.4]
    with pytest.raises(cli.ConfigError):
        cli.parse_edges("a,b")
