import json

import numpy as np
import pytest

from artifact import cli, io, pipeline
from artifact.cell_corrector import PermeabilityKernel
from artifact.config import DEFAULTS, ConfigError, RunConfig
from artifact.geometry import ConfigurationError
from artifact.linalg import SolverError

SMALL = {
    "geometry": {"n_cell": 16},
    "kernel_time": {"M": 32},
    "time": {"M": 8},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


# -------------------------------------------------------------- config


def test_defaults_validate():
    cfg = RunConfig.load()
    assert cfg.epsilons == [0.25, 0.125, 0.0625]
    assert cfg.layer_epsilons == [0.125, 0.0625]
    assert cfg.time_grid.M == 64 and cfg.kernel_grid.gamma == 2.0
    assert cfg.kappa0 == 0.25 and cfg.cell.n_cell == 32
    assert RunConfig.from_dict(json.loads(cfg.dumps())).raw == cfg.raw


@pytest.mark.parametrize("data, key", [
    ({"geometry": {"n_cell": 16.5}}, "geometry.n_cell"),
    ({"geometry": {"colour": 1}}, "geometry.colour"),
    ({"time": {"gamma": 2.0}}, "time.gamma"),
    ({"kernel_time": {"gamma": 0.5}}, "kernel_time.gamma"),
    ({"forcing": {"name": "wind"}}, "forcing.name"),
    ({"sweep": {"epsilons": [0.25, 0.125]}}, "sweep.epsilons"),
    ({"sweep": {"epsilons": [0.3, 0.125, 0.0625]}}, "sweep.epsilons"),
    ({"sweep": {"layer_epsilons": [0.125, 0.125]}}, "sweep.layer_epsilons"),
    ({"tolerances": {"linear": "tight"}}, "tolerances.linear"),
    ({"schema_version": 7}, "schema_version"),
    ({"geometry": 3}, "geometry"),
    ({"output": ""}, "output"),
])
def test_invalid_entries_name_their_key(data, key):
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict(data)
    assert info.value.key == key
    assert str(info.value).startswith(key)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        RunConfig.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        RunConfig.load(bad)
    bad.write_text("[1, 2]")
    with pytest.raises(ConfigError, match="top level"):
        RunConfig.load(bad)


def test_section_hash_tracks_content():
    a = RunConfig.load()
    b = RunConfig.from_dict({"time": {"M": 32}})
    assert a.section_hash("geometry") == b.section_hash("geometry")
    assert a.section_hash("time") != b.section_hash("time")
    assert DEFAULTS["time"]["M"] == 64


# ------------------------------------------------------------------ io


def test_csv_round_trip(tmp_path):
    rows = [(0.1, 2, "x"), (np.float64(1 / 3), -4, "y")]
    io.write_csv(tmp_path / "t.csv", ("a", "b", "c"), rows)
    header, back = io.read_csv(tmp_path / "t.csv")
    assert header == ["a", "b", "c"]
    assert float(back[1][0]) == 1 / 3 and back[0][2] == "x"


def test_kernel_csv_round_trip(tmp_path):
    t = np.linspace(0, 1, 6)
    A = np.stack([np.exp(-t), 0.1 * t, 0.1 * t, np.exp(-2 * t)], axis=1).reshape(-1, 2, 2)
    K = PermeabilityKernel(t, A, 1.0)
    io.write_kernel_csv(tmp_path / "k.csv", K)
    back = io.read_kernel_csv(tmp_path / "k.csv")
    assert np.array_equal(back.times, t) and np.array_equal(back.A, A)
    assert back.fluid_fraction == 1.0
    (tmp_path / "bad.csv").write_text("t,a\n0,1\n")
    with pytest.raises(ConfigurationError):
        io.read_kernel_csv(tmp_path / "bad.csv")


def test_synthetic_kernels():
    t = np.linspace(0, 2, 5)
    assert np.array_equal(io.synthetic_kernel("identity", t).A[:, 0, 0], np.ones(5))
    K = io.synthetic_kernel("exp:1.5", t)
    assert np.allclose(K.A[:, 1, 1], np.exp(-1.5 * t)) and np.all(K.A[:, 0, 1] == 0)
    for bad in ("exp:fast", "gauss"):
        with pytest.raises(ConfigurationError):
            io.synthetic_kernel(bad, t)


@pytest.mark.parametrize("shape", [(5, 3), (4, 5, 3), (2, 3, 4, 5), (7,)])
def test_field_round_trip(tmp_path, shape):
    a = np.random.default_rng(2).standard_normal(shape)
    io.write_field(tmp_path / "f.txt", a, label="test")
    back, head = io.read_field(tmp_path / "f.txt")
    assert np.array_equal(back, a)
    assert head["label"] == "test" and head["shape"] == list(shape)


def test_pgm_round_trip_and_orientation(tmp_path):
    mask = np.ones((4, 3), bool)
    mask[0, 0] = False  # cell at x = 0, y = 0: bottom-left pixel
    io.write_pgm(tmp_path / "m.pgm", mask)
    lines = (tmp_path / "m.pgm").read_text().splitlines()
    assert lines[:3] == ["P2", "4 3", "255"]
    assert lines[-1].split()[0] == "0"
    assert np.array_equal(io.read_pgm(tmp_path / "m.pgm"), mask)


def test_plot_data_columns(tmp_path):
    io.write_plot_data(tmp_path / "p.dat", [0.25, 0.125], [1.0, 0.5])
    data = np.loadtxt(tmp_path / "p.dat")
    assert np.allclose(data, np.log([[0.25, 1.0], [0.125, 0.5]]))


# ------------------------------------------------------------ reports


def _fake_results():
    out = []
    for i, e in enumerate((0.25, 0.125, 0.0625)):
        r = {"eps": e, "mask_sha256": f"m{i}",
             "errors": {n: 0.3 * e**0.5 * (1 + 0.01 * k) for k, n in enumerate(pipeline.NORMS)}}
        if e < 0.2:
            r["layer"] = {"xi_total": e**0.5, "eta_total": e}
        out.append(r)
    return out


def test_report_is_deterministic_and_fits_rates(tmp_path):
    cfg = RunConfig.load()
    res = _fake_results()
    fits = pipeline.fit_rates(res)
    assert fits["velocity"]["slope"] == pytest.approx(0.5, abs=1e-12)
    a = json.dumps(pipeline.build_report(cfg, res, fits), sort_keys=True)
    b = json.dumps(pipeline.build_report(cfg, _fake_results(), pipeline.fit_rates(_fake_results())),
                   sort_keys=True)
    assert a == b
    factors = pipeline.layer_factors(res)
    assert factors["0.125->0.0625"]["xi"] == pytest.approx(2**0.5)
    assert factors["0.125->0.0625"]["eta"] == pytest.approx(2.0)
    pipeline.write_rates(tmp_path, res, fits)
    header, rows = io.read_csv(tmp_path / "rates.csv")
    assert header[0] == "eps" and rows[-1][0] == "slope"
    assert (tmp_path / "rates.png").stat().st_size > 0
    assert (tmp_path / "plot_gradient.dat").exists()


# ----------------------------------------------------------------- cli


def test_cli_configuration_errors_exit_1(tmp_path, capsys):
    assert cli.main(["cell", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"sweep": {"epsilons": [0.3, 0.125, 0.0625]}}))
    assert cli.main(["rates", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert "sweep.epsilons" in capsys.readouterr().err
    assert cli.main(["cell", "--jobs", "0", "--out", str(tmp_path)]) == 1


def test_cli_solver_failure_exit_2(tmp_path, small_config, monkeypatch):
    def boom(*a, **k):
        raise SolverError("did not converge")

    monkeypatch.setattr(pipeline, "cell_stage", boom)
    assert cli.main(["homogenize", "--config", str(small_config), "--out", str(tmp_path)]) == 2


def test_cli_cell_and_kernel_outputs(tmp_path, small_config, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env-out"))
    assert cli.main(["cell", "--config", str(small_config)]) == 0
    out = tmp_path / "env-out"
    W, head = io.read_field(out / "W1_x.txt")
    assert W.shape == (9, 16, 16) and head["direction"] == 1
    assert io.read_pgm(out / "cell_mask.pgm").shape == (16, 16)
    summary = json.loads((out / "cell.json").read_text())
    assert summary["flux_antisymmetry"] == 0.0 and summary["bogovskii_residual"] <= 1e-6
    assert cli.main(["kernel", "--config", str(small_config), "--out", str(tmp_path / "k")]) == 0
    K = io.read_kernel_csv(tmp_path / "k" / "kernel.csv")
    assert len(K.times) == 33 and K.symmetry_defect() <= 1e-10
    assert (tmp_path / "k" / "kernel.png").stat().st_size > 0


def test_cli_homogenize_outputs(tmp_path, small_config):
    assert cli.main(["homogenize", "--config", str(small_config), "--out", str(tmp_path)]) == 0
    header, rows = io.read_csv(tmp_path / "p0_eps4.csv")
    assert header == ["t", "p0_l2"] and len(rows) == 9
    p, head = io.read_field(tmp_path / "p0_final_eps16.txt")
    assert p.shape == (256, 256) and head["N"] == 256
