import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from fracinv import harness, svg
from fracinv.errors import ConfigError
from fracinv.harness import (
    ExperimentConfig,
    build_setup,
    clean_traces,
    example_config,
    gradient_check,
    load_config,
    restriction_indices,
    run_example,
    synthesize_observation,
)
from fracinv.inverse import TERMINATION_REASONS


@pytest.fixture
def cfg32():
    return ExperimentConfig(n_omega=32)


# ---------------------------------------------------------------- config


def test_config_defaults():
    cfg = ExperimentConfig()
    assert cfg.s == 0.4 and cfg.omega == (-1.0, 1.0) and cfg.refine_factor == 4
    assert cfg.deltas == (1e-3, 1e-2)
    assert cfg.alpha_for(1e-2) == pytest.approx(1e-4)
    assert ExperimentConfig(alpha=0.5).alpha_for(1e-2) == 0.5


@pytest.mark.parametrize(
    "kw",
    [dict(refine_factor=1), dict(refine_factor=2.5), dict(deltas=(-1e-3,)), dict(s=1.0),
     dict(alpha="magic"), dict(truth="ex9"), dict(tau=0.0), dict(n_omega=1), dict(eps_cells=0)],
)
def test_config_rejects(kw):
    with pytest.raises(ConfigError):
        ExperimentConfig(**kw)


def test_load_config_sections_and_overrides(tmp_path, monkeypatch):
    monkeypatch.delenv("FRACINV_SEED", raising=False)
    path = tmp_path / "c.toml"
    path.write_text('[grid]\nn_omega = 64\n\n[run]\ndeltas = [0.01]\ntruth = "ex2"\nseed = 3\n')
    cfg = load_config(path, tau=40.0)
    assert (cfg.n_omega, cfg.deltas, cfg.truth, cfg.seed, cfg.tau) == (64, (0.01,), "ex2", 3, 40.0)
    monkeypatch.setenv("FRACINV_SEED", "11")
    assert load_config(path, seed=5).seed == 11
    monkeypatch.setenv("FRACINV_SEED", "x")
    with pytest.raises(ConfigError):
        load_config(path)


def test_load_config_layers_over_base(tmp_path, monkeypatch):
    monkeypatch.delenv("FRACINV_SEED", raising=False)
    path = tmp_path / "c.toml"
    path.write_text("n_omega = 16\n")
    cfg = load_config(path, base=example_config("ex2"))
    assert (cfg.truth, cfg.tau, cfg.n_omega) == ("ex2", 40.0, 16)


def test_load_config_errors(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("n_omega = \n")
    with pytest.raises(ConfigError):
        load_config(bad)
    unknown = tmp_path / "u.toml"
    unknown.write_text("colour = 3\n")
    with pytest.raises(ConfigError, match="colour"):
        load_config(unknown)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")


def test_truth_table():
    table = {"x": [-1, 0, 1], "q": [0, 1, 0], "g": [1, 1, 1]}
    q, g = ExperimentConfig(truth_table=table).truth_functions()
    assert q(np.array([0.5]))[0] == pytest.approx(0.5)


def test_example_presets():
    assert example_config("ex1").tau == 4.0
    assert example_config("ex2").tau == 40.0
    for name in ("ex1", "ex2"):
        cfg = example_config(name)
        assert cfg.alpha_for(1e-3) == pytest.approx(1e-6) and cfg.refine_factor >= 2
    with pytest.raises(ConfigError):
        example_config("ex3")


# ---------------------------------------------------------------- data


def test_noise_free_observation_is_restricted_fine_trace(cfg32):
    coarse = build_setup(cfg32)
    fine = build_setup(cfg32, refine=cfg32.refine_factor)
    idx = restriction_indices(coarse, fine, cfg32.refine_factor)
    np.testing.assert_allclose(fine.grid.x[idx], coarse.x_w2, atol=1e-12)
    q, g = cfg32.truth_functions()
    h0, h1 = clean_traces(fine, fine.medium(q, g), at=idx)
    obs = synthesize_observation(cfg32, 0.0, coarse=coarse)
    assert np.array_equal(obs.h, h0) and np.array_equal(obs.h_tilde, h1)


def test_noise_bound_and_seeding(cfg32):
    clean = synthesize_observation(cfg32, 0.0)
    for seed in range(5):
        obs = synthesize_observation(cfg32, 1e-2, seed=seed)
        assert np.max(np.abs(obs.h - clean.h)) <= 1e-2
        assert np.max(np.abs(obs.h_tilde - clean.h_tilde)) <= 1e-2
    a = synthesize_observation(cfg32, 1e-2, seed=7)
    b = synthesize_observation(cfg32, 1e-2, seed=7)
    c = synthesize_observation(cfg32, 1e-2, seed=8)
    assert np.array_equal(a.h, b.h) and np.array_equal(a.h_tilde, b.h_tilde)
    assert not np.array_equal(a.h, c.h)
    assert not np.array_equal(a.h - clean.h, a.h_tilde - clean.h_tilde)


def test_non_nested_grids_rejected(cfg32):
    coarse = build_setup(cfg32)
    other = build_setup(ExperimentConfig(n_omega=48))
    with pytest.raises(ConfigError):
        restriction_indices(coarse, other, 3)


# ---------------------------------------------------------------- runs and outputs


@pytest.fixture(scope="module")
def ex2_artifacts(tmp_path_factory):
    out = tmp_path_factory.mktemp("ex2")
    art = run_example("ex2", deltas=(1e-3, 1e-2), seed=7, out=out, n_omega=64)
    return out, art


def test_artifacts_exist(ex2_artifacts):
    _, art = ex2_artifacts
    assert len(art.files) == 7
    for path in art.files:
        assert path.exists() and path.stat().st_size > 0


def test_reconstruction_csv_rows(ex2_artifacts):
    _, art = ex2_artifacts
    with open(art.reconstruction_csv[0]) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x", "q_true", "q_rec", "g_true", "g_rec"]
    assert len(rows) - 1 == 63


def test_trace_csv_rows(ex2_artifacts):
    _, art = ex2_artifacts
    for path, summary in zip(art.trace_csv, art.summary):
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["iter", "J", "E", "beta", "gamma", "err_q", "err_g"]
        assert len(rows) - 1 == summary["iterations"] + 1
        assert rows[1][0] == "0"


def test_summary_json(ex2_artifacts):
    _, art = ex2_artifacts
    data = json.loads(art.summary_json.read_text())
    assert data["config"]["tau"] == 40.0
    for run in data["runs"]:
        assert run["termination"] in TERMINATION_REASONS
        assert run["alpha"] == pytest.approx(run["delta"] ** 2)


def test_rerun_is_byte_identical(ex2_artifacts, tmp_path):
    out, art = ex2_artifacts
    again = run_example("ex2", deltas=(1e-3, 1e-2), seed=7, out=tmp_path, n_omega=64)
    for a, b in zip(art.files, again.files):
        assert a.name == b.name
        assert a.read_bytes() == b.read_bytes()


def test_svg_plots_well_formed(ex2_artifacts):
    _, art = ex2_artifacts
    for path in art.plots:
        root = ET.fromstring(path.read_text())
        ns = "{http://www.w3.org/2000/svg}"
        assert len(root.findall(f"{ns}polyline")) == 3
        texts = [t.text for t in root.iter(f"{ns}text")]
        assert "truth" in texts and "x" in texts


def test_line_plot_handles_flat_and_nan():
    doc = svg.line_plot([("a", [0, 1, 2], [1.0, 1.0, float("nan")])], "x", "y", "t")
    ET.fromstring(doc)


def test_unwritable_output(tmp_path, cfg32):
    blocker = tmp_path / "file"
    blocker.write_text("")
    setup, truth, runs = harness.run_experiment(ExperimentConfig(n_omega=16, deltas=(1e-2,), truth="ex2", tau=40))
    with pytest.raises(OSError):
        harness.emit_outputs(blocker / "sub", setup, truth, runs, cfg32)


def test_forward_run(tmp_path, cfg32):
    info = harness.forward_run(cfg32, tmp_path)
    assert info["residual_norm"] <= 1e-10
    with open(tmp_path / "field.csv") as fh:
        assert sum(1 for _ in fh) == info["n_nodes"] + 1


# ---------------------------------------------------------------- gradient check


@pytest.mark.parametrize("alpha", [None, 0.0])
def test_gradient_check_n64(alpha):
    rep = gradient_check(example_config("ex1", n_omega=64), n_directions=10, t=1e-5, alpha=alpha)
    assert rep.max_rel_err <= 1e-6
    assert len(rep.rel_errs) == 10


def test_gradient_check_zero_residual():
    cfg = example_config("ex1", n_omega=32)
    setup = build_setup(cfg)
    truth = setup.medium(*cfg.truth_functions())
    rep = gradient_check(cfg, n_directions=3, t=1e-6, alpha=0.0, point=truth, same_grid=True)
    assert max(abs(v) for v in rep.finite_diff) <= 1e-12
    assert max(abs(v) for v in rep.adjoint) <= 1e-12


@pytest.mark.parametrize("t", [1e-9, 0.1])
def test_gradient_check_step_bounds(t):
    with pytest.raises(ValueError):
        gradient_check(ExperimentConfig(n_omega=16), t=t)


@pytest.mark.parametrize("name", ["ex1", "ex2"])
def test_shipped_configs_match_presets(name, monkeypatch):
    import dataclasses
    from pathlib import Path

    monkeypatch.delenv("FRACINV_SEED", raising=False)
    path = Path(__file__).resolve().parents[1] / "configs" / f"{name}.toml"
    cfg = load_config(path)
    assert cfg.refine_factor >= 2  # data grid strictly finer than the inversion grid
    assert cfg == dataclasses.replace(example_config(name), seed=cfg.seed)
