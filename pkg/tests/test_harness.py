import json

import numpy as np
import pytest

from kronshampoo import cli, curvature, kronalg, models
from kronshampoo.data import load_npz, synth_gaussian_classes
from kronshampoo.errors import ConfigError, DataError
from kronshampoo.harness import config, experiments, plot, selftest
from kronshampoo.metrics import cosine_similarity


def small(**overrides):
    doc = {
        "dataset": {"kind": "synth", "d": 4, "num_classes": 3, "n_per_class": 5},
        "model": {"hidden_dim": 3},
        "train": {"steps": 4},
    }
    doc.update(overrides)
    return config.resolve(doc)


def binary(**overrides):
    doc = {
        "dataset": {"kind": "synth", "d": 5, "num_classes": 2, "n_per_class": 10,
                    "separation": 2.0},
        "model": {"kind": "binary_logistic"},
        "train": {"lr": 0.01, "steps": 25},
        "estimators": ["shampoo_sq", "opt_kron(5)"],
        "curvature_targets": ["gn"],
    }
    doc.update(overrides)
    return config.resolve(doc)


# config ----------------------------------------------------------------------


def test_defaults_resolve_and_round_trip():
    cfg = config.resolve({})
    assert cfg == config.DEFAULTS
    assert config.parse(config.dumps(cfg)) == cfg


@pytest.mark.parametrize("doc,path", [
    ({"train": {"lrr": 0.1}}, "train.lrr"),
    ({"bogus": 1}, "bogus"),
    ({"train": {"lr": -1}}, "train.lr"),
    ({"train": {"steps": 1.5}}, "train.steps"),
    ({"seed": True}, "seed"),
    ({"estimators": ["opt_kron(0)"]}, "estimators[0]"),
    ({"estimators": ["adam"]}, "estimators[0]"),
    ({"estimators": []}, "estimators"),
    ({"curvature_targets": ["hessian"]}, "curvature_targets[0]"),
    ({"label_modes": ["real", "real"]}, "label_modes"),
    ({"dataset": {"kind": "idx"}}, "dataset.images"),
    ({"dataset": {"kind": "mnist"}}, "dataset.kind"),
    ({"dataset": {"kind": "synth", "separation": -1}}, "dataset.separation"),
    ({"model": {"activation": "gelu"}}, "model.activation"),
    ({"train": {"steps": 3, "probe_schedule": [5]}}, "train.probe_schedule[0]"),
    ({"checkpoint_step": 99}, "checkpoint_step"),
    ({"batch_method": "exact"}, "batch_method"),
])
def test_config_errors_name_the_key(doc, path):
    with pytest.raises(ConfigError) as err:
        config.resolve(doc)
    assert str(err.value).startswith(path + ":")


def test_config_parse_reports_position(tmp_path):
    with pytest.raises(ConfigError, match="line 2, column"):
        config.parse('{"seed": 0,\n oops}')
    with pytest.raises(ConfigError):
        config.load(tmp_path / "missing.json")


def test_estimator_names():
    e = config.Estimator.parse("opt_kron(12)")
    assert (e.kind, e.steps, e.name) == ("opt_kron", 12, "opt_kron(12)")
    assert config.Estimator.parse("kfac").kind == "kfac"


def test_missing_data_file_is_a_config_error(tmp_path):
    cfg = config.resolve({"dataset": {"kind": "npz", "path": str(tmp_path / "nope.npz")}})
    with pytest.raises(ConfigError, match="dataset.path"):
        experiments.build_dataset(cfg)


def test_model_dim_mismatch_is_a_config_error():
    cfg = small(model={"input_dim": 9})
    with pytest.raises(ConfigError, match="model.input_dim"):
        experiments.build_model(cfg, experiments.build_dataset(cfg))


# CSV output ------------------------------------------------------------------


def test_csv_format_and_precision():
    rows = [experiments._row(0, "gn", "shampoo", 1 / 3, "exact", 7),
            experiments._row(2, "gn", "covariance", 0.1, "enumerate", 7, 16, "real")]
    text = experiments.rows_to_csv(rows)
    lines = text.split("\n")
    assert lines[0] == "step,target,estimator,cosine,method,batch_size,label_mode,seed"
    assert lines[1] == "0,gn,shampoo,0.33333333333333331,exact,,,7"
    assert lines[2] == "2,gn,covariance,0.10000000000000001,enumerate,16,real,7"
    assert text.endswith("\n") and "\r" not in text
    assert float(lines[1].split(",")[3]) == 1 / 3


def test_atomic_write_leaves_no_temporaries(tmp_path):
    experiments.atomic_write(tmp_path / "a" / "x.csv", "hello\n")
    assert (tmp_path / "a" / "x.csv").read_bytes() == b"hello\n"
    assert [p.name for p in (tmp_path / "a").iterdir()] == ["x.csv"]


# figure runs -----------------------------------------------------------------


def test_figure1_is_deterministic_and_manifest_replays(tmp_path):
    cfg = small()
    a = experiments.run(cfg, "figure1", tmp_path / "a")
    b = experiments.run(cfg, "figure1", tmp_path / "b")
    assert a.read_bytes() == b.read_bytes()
    replay = config.load(tmp_path / "a" / "manifest.json")
    assert replay == cfg
    c = experiments.run(replay, "figure1", tmp_path / "c")
    assert c.read_bytes() == a.read_bytes()


def test_figure1_rows_cover_schedule_targets_and_estimators():
    cfg = small()
    rows = experiments.run_figure1(cfg)
    steps = sorted({r["step"] for r in rows})
    assert steps == [0, 1, 2, 4]
    per_step = [(r["target"], r["estimator"]) for r in rows if r["step"] == 0]
    # K-FAC is reported against H_GN only
    assert len(per_step) == 4 + 3
    assert all(-1.0 <= r["cosine"] <= 1.0 for r in rows)


def test_figure1_binary_logistic_is_a_flat_line():
    rows = experiments.run_figure1(binary())
    assert {r["step"] for r in rows} == {0, 1, 2, 4, 8, 16, 25}
    for r in rows:
        assert r["cosine"] >= 1 - 1e-8, r


def test_figure1_optimal_kronecker_beats_shampoo_sq():
    rows = experiments.run_figure1(small(curvature_targets=["gn"]))
    by = {(r["step"], r["estimator"]): r["cosine"] for r in rows}
    for step in {r["step"] for r in rows}:
        assert by[step, "opt_kron(5)"] >= by[step, "shampoo_sq"] - 1e-9


def test_figure1_hutchinson_tracks_exact():
    cfg = small(curvature_targets=["gn", "adagrad"], estimators=["shampoo_sq", "opt_kron(5)"])
    exact = experiments.run_figure1(cfg)
    cfg["cosine_method"], cfg["num_probes"] = "hutchinson", 400
    probe = experiments.run_figure1(cfg)
    assert len(exact) == len(probe)
    for a, b in zip(exact, probe):
        assert (a["step"], a["target"], a["estimator"]) == (b["step"], b["target"],
                                                            b["estimator"])
        assert b["method"] == "hutchinson"
        assert abs(a["cosine"] - b["cosine"]) <= 0.1


def test_figure2_binary_logistic_ratio_is_one():
    rows = experiments.run_figure2(binary(curvature_targets=["gn"]))
    for r in rows:
        if r["estimator"] == "ratio_opt":
            assert r["cosine"] == 1.0


def test_figure2_ratios_dominate_optimum():
    rows = experiments.run_figure2(small())
    by = {(r["step"], r["target"], r["estimator"]): r["cosine"] for r in rows}
    for (step, target, name), v in by.items():
        if name != "ratio_opt":
            assert v >= by[step, target, "ratio_opt"] - 1e-12


def figure4_config(**kw):
    doc = dict(dataset={"kind": "synth", "d": 2, "num_classes": 3, "n_per_class": 2},
               model={"kind": "multinomial_linear"}, train={"steps": 2},
               estimators=["shampoo_sq"], batch_sweep=[1, 2], batch_method="enumerate")
    doc.update(kw)
    return config.resolve(doc)


def test_figure4_enumerated_rows():
    cfg = figure4_config()
    rows = experiments.run_figure4(cfg)
    assert {(r["batch_size"], r["label_mode"], r["estimator"]) for r in rows} == {
        (B, mode, est) for B in (1, 2) for mode in ("real", "sampled")
        for est in ("covariance", "shampoo_sq")}
    cov = {(r["batch_size"], r["label_mode"]): r["cosine"] for r in rows
           if r["estimator"] == "covariance"}
    # sampled-label batches scaled by |B| reproduce H_GN exactly
    assert cov[1, "sampled"] == pytest.approx(1.0, abs=1e-12)
    assert cov[2, "sampled"] == pytest.approx(1.0, abs=1e-12)


def test_figure4_real_single_batch_is_the_empirical_fisher():
    cfg = figure4_config(batch_sweep=[1], label_modes=["real"])
    ds = experiments.build_dataset(cfg)
    _, model = experiments.checkpoint_model(cfg, ds, experiments.build_model(cfg, ds))
    H = curvature.assemble(models.gn_ensemble_exact(model, ds))
    EF = curvature.assemble(models.empirical_ensemble(model, ds))
    cov = [r for r in experiments.run_figure4(cfg) if r["estimator"] == "covariance"][0]
    assert cov["cosine"] == pytest.approx(cosine_similarity(EF.H, H.H), abs=1e-10)


def test_figure4_monte_carlo_sampled_matches_single_sample():
    # sampled-label covariance cosine at |B| = 4 agrees with |B| = 1 across replicate seeds
    base = figure4_config(batch_sweep=[1, 4], label_modes=["sampled"],
                          batch_method="monte_carlo", batch_trials=2000)
    vals = {1: [], 4: []}
    for seed in range(8):
        base["seed"] = seed
        for r in experiments.run_figure4(base):
            if r["estimator"] == "covariance":
                vals[r["batch_size"]].append(r["cosine"])
    d = np.array(vals[4]) - np.array(vals[1])
    assert abs(d.mean()) <= 3 * d.std(ddof=1) / np.sqrt(d.size) + 1e-12


# plotting --------------------------------------------------------------------


def test_plot_reads_and_renders(tmp_path):
    csv_path = experiments.run(small(), "figure1", tmp_path)
    svg = plot.plot(csv_path)
    text = svg.read_text()
    series, x_label = plot.series_of(plot.read_rows(csv_path.read_text()))
    assert x_label == "step"
    assert text.startswith("<?xml") or text.startswith("<svg")
    assert text.count("<polyline") == len(series)
    again = plot.plot(csv_path, tmp_path / "again.svg")
    assert again.read_bytes() == svg.read_bytes()


def test_plot_single_row(tmp_path):
    rows = [experiments._row(0, "gn", "shampoo", 0.5, "exact", 0)]
    p = tmp_path / "one.csv"
    p.write_text(experiments.rows_to_csv(rows))
    assert plot.plot(p).read_text().count("<polyline") == 1


def test_plot_rejects_bad_csv():
    with pytest.raises(DataError):
        plot.read_rows("a,b\n1,2\n")
    header = ",".join(experiments.CSV_HEADER)
    with pytest.raises(DataError, match="line 2"):
        plot.read_rows(header + "\n0,gn,shampoo,notanumber,exact,,,0\n")


def test_batch_sweep_plots_against_batch_size():
    rows = experiments.run_figure4(figure4_config())
    series, x_label = plot.series_of(plot.read_rows(experiments.rows_to_csv(rows)))
    assert x_label == "batch size"
    assert {tuple(x for x, _ in pts) for pts in series.values()} == {(1.0, 2.0)}


# CLI -------------------------------------------------------------------------


def test_cli_figure_and_plot(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    doc = small()
    cfg.write_text(json.dumps(doc))
    assert cli.main(["figure1", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "figure1.csv").is_file()
    assert (tmp_path / "o" / "manifest.json").is_file()
    assert cli.main(["plot", str(tmp_path / "o" / "figure1.csv")]) == 0
    assert (tmp_path / "o" / "figure1.svg").is_file()


def test_cli_gen_data(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(small()))
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    ds = load_npz(tmp_path / "dataset.npz")
    ref = synth_gaussian_classes(4, 3, 5, 3.0, 0)
    assert np.array_equal(ds.X, ref.X)


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"train": {"lrr": 1}}')
    assert cli.main(["figure1", "--config", str(bad)]) == 1
    assert "train.lrr: unknown key" in capsys.readouterr().err
    assert cli.main(["figure1", "--config", str(tmp_path / "missing.json")]) == 1
    diverge = tmp_path / "div.json"
    diverge.write_text(json.dumps({
        "dataset": {"kind": "synth", "d": 4, "n_per_class": 5},
        "model": {"activation": "relu", "hidden_dim": 3},
        "train": {"lr": 1e300, "steps": 3}, "curvature_targets": ["gn"],
    }))
    with np.errstate(all="ignore"):
        assert cli.main(["figure1", "--config", str(diverge), "--out", str(tmp_path)]) == 3
    with pytest.raises(SystemExit):
        cli.main(["nonsense"])


# selftest --------------------------------------------------------------------


def test_selftest_passes(capsys):
    assert cli.main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.strip().endswith(f"{len(selftest.CHECKS)}/{len(selftest.CHECKS)} checks passed")


def test_selftest_catches_sign_bug_in_rearrangement(monkeypatch):
    good = kronalg.rearrange

    def buggy(H, m, n):
        r = good(H, m, n)
        return kronalg.RearrangedMatrix(r.m, r.n, -r.mat)

    monkeypatch.setattr(kronalg, "rearrange", buggy)
    res = {r.name: r for r in selftest.run_checks(["rearrangement"])}
    assert not res["rearrangement"].passed


def test_selftest_catches_missing_square(monkeypatch):
    def unsquared(e):
        K = curvature.shampoo_factors(e)
        return kronalg.KronFactors(K.L, K.R, "shampoo_sq")

    monkeypatch.setattr(curvature, "shampoo_sq_factors", unsquared)
    res = selftest.run_checks(["one_step_power_iteration"])
    assert [r.passed for r in res] == [False]


def test_selftest_failure_exit_code(monkeypatch, capsys):
    monkeypatch.setattr(selftest, "CHECKS", (("always_fails", lambda: 1 / 0),))
    assert cli.main(["selftest"]) == 2
    assert "FAIL always_fails" in capsys.readouterr().out
