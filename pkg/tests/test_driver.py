import json
import os

import numpy as np
import pytest

from thbtopo import driver
from thbtopo.driver import (OptHistory, RunConfig, RunError, efficiency_metrics, fem_dofs, main, rho_shift_at, run,
                            w_s_at)


def small(**kw):
    base = dict(length=2.0, nx=8, ny=4, l0=0, l_ifc_max=0, l_solid_max=0, l_min=0, S0=-1.0)
    base.update(kw)
    return RunConfig(**base)


def hist_from(xfem, fem):
    return OptHistory([{"n_dofs_xfem": a, "n_dofs_fem": b} for a, b in zip(xfem, fem)])


# -------------------------------------------------------------------- config

def test_config_round_trip(tmp_path):
    cfg = RunConfig(nx=12, scheme="plain", plane_stress=False, gamma_ghost=0.01, w_s_final=0.5)
    p = tmp_path / "run.ini"
    p.write_text(cfg.to_ini())
    assert RunConfig.from_file(str(p)) == cfg


def test_config_partial_file_keeps_defaults(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("[mesh]\nnx = 20\n[material]\nplane_stress = no\n")
    cfg = RunConfig.from_file(str(p))
    assert cfg.nx == 20 and cfg.plane_stress is False and cfg.ny == RunConfig().ny


def test_config_errors(tmp_path):
    with pytest.raises(ValueError, match="unknown"):
        RunConfig.from_dict({"nxx": "3"})
    with pytest.raises(ValueError):
        RunConfig.from_dict({"scheme": "fancy"})
    with pytest.raises(ValueError):
        RunConfig.from_dict({"gamma_ghost": "0.5"})
    with pytest.raises(FileNotFoundError):
        RunConfig.from_file(str(tmp_path / "missing.ini"))
    assert RunConfig.from_dict({"gamma_ghost": "0"}).gamma_ghost == 0.0


def test_beam_defaults():
    cfg = RunConfig()
    assert cfg.domain == ((0.0, 3.0), (0.0, 1.0))
    assert cfg.nx * 2 ** cfg.l0 == 120 and cfg.ny * 2 ** cfg.l0 == 40
    assert cfg.adaptive  # coarsening down to l_min is on by default
    assert not RunConfig(l_min=2).adaptive
    assert RunConfig(l0=1, l_ifc_max=3, l_solid_max=3).adaptive
    assert not RunConfig(l0=1, l_ifc_max=3, l_solid_max=3, refine_every=0).adaptive


# ------------------------------------------------------------- continuation

def test_rho_shift_schedule():
    cfg = RunConfig()
    vals = [rho_shift_at(cfg, it) for it in range(0, 400)]
    assert vals[0] == 0.2 and np.isclose(vals[25], 0.6) and np.isclose(vals[50], 0.8) and np.isclose(vals[75], 0.9)
    assert np.all(np.diff(vals) >= 0)
    assert vals[-1] == 1.0
    assert rho_shift_at(RunConfig(scheme="plain"), 0) == 1.0


def test_w_s_decay():
    cfg = RunConfig(w_s=0.9, w_s_final=0.1, w_s_iters=150)
    assert w_s_at(cfg, 0) == 0.9 and np.isclose(w_s_at(cfg, 150), 0.1) and np.isclose(w_s_at(cfg, 500), 0.1)
    assert np.isclose(w_s_at(cfg, 75), np.sqrt(0.9 * 0.1))
    assert w_s_at(RunConfig(), 300) == RunConfig().w_s


# -------------------------------------------------------------- efficiency

def test_efficiency_identical_histories():
    h = hist_from([10, 20, 30], [100, 100, 100])
    E, R, Ef, Rf = efficiency_metrics(h, h, 1.0)
    assert E == R == 1.0


def test_efficiency_constant_counts():
    E, R, _, _ = efficiency_metrics(hist_from([50] * 4, [0] * 4), hist_from([100] * 4, [0] * 4), 1.0)
    assert E == 2.0 and R == 2.0


def test_efficiency_fractional_exponent():
    E, _, _, _ = efficiency_metrics(hist_from([40, 60], [0, 0]), hist_from([100, 100], [0, 0]), 4 / 3)
    assert np.isclose(E, (100 ** (4 / 3) * 2) / (40 ** (4 / 3) + 60 ** (4 / 3)), rtol=1e-14)


def test_efficiency_truncates_to_shorter_run_and_rejects_empty():
    E, R, Ef, Rf = efficiency_metrics(hist_from([50, 50, 1], [0] * 3), hist_from([100, 100], [400, 400]), 1.0)
    assert E == 2.0 and Ef == 8.0 and Rf == 8.0
    with pytest.raises(ValueError):
        efficiency_metrics(OptHistory(), hist_from([1], [1]))


def test_fem_dofs_count():
    assert fem_dofs(RunConfig(l0=2, l_ifc_max=2, l_solid_max=2)) == 2 * 121 * 41


def test_history_csv_round_trip(tmp_path):
    h = OptHistory([{k: float(i + j) for j, k in enumerate(OptHistory.COLUMNS)} for i in range(3)])
    h.write_csv(tmp_path / "h.csv")
    assert OptHistory.read_csv(tmp_path / "h.csv").rows == h.rows


# ---------------------------------------------------------------------- runs

def test_no_refinement_events_without_schedule():
    cfg = small(l0=0, l_ifc_max=1, l_solid_max=1, refine_every=0)
    hist, _ = run(cfg, max_iters=10)
    assert len(hist.rows) == 10 and hist.events == []
    assert len({r["n_elements"] for r in hist.rows}) == 1


def test_scheduled_events_on_multiples():
    cfg = small(l0=1, l_ifc_max=3, l_solid_max=3, l_min=0, refine_every=3)
    hist, _ = run(cfg, max_iters=10)
    sched = [e["iteration"] for e in hist.events if e["kind"] == "scheduled"]
    assert sched and set(sched) <= {3, 6, 9}
    assert all(e["kind"] in ("scheduled", "uniformity") for e in hist.events)
    assert {r["n_elements"] for r in hist.rows} != {hist.rows[0]["n_elements"]}


def test_deterministic_replay():
    cfg = small(max_iters=4)
    h1, _ = run(cfg, deterministic=True)
    h2, _ = run(cfg, deterministic=True)
    strip = lambda h: [{k: v for k, v in r.items() if k != "time"} for r in h.rows]
    assert strip(h1) == strip(h2)


def test_error_records_iteration_and_phase(monkeypatch):
    def boom(*a, **k):
        raise np.linalg.LinAlgError("singular")

    monkeypatch.setattr(driver, "gcmma_step", boom)
    with pytest.raises(RunError) as exc:
        run(small(), max_iters=3)
    assert exc.value.iteration == 0 and exc.value.phase == "optimizer"


def test_cli_outputs(tmp_path, capsys):
    ini = tmp_path / "c.ini"
    ini.write_text(small().to_ini())
    out = tmp_path / "out"
    base = tmp_path / "base.csv"
    hist_from([400, 400, 400], [800, 800, 800]).write_csv(base)
    rc = main(["--config", str(ini), "--out-dir", str(out), "--max-iters", "3", "--vtk-every", "1",
               "--deterministic", "--baseline", str(base)])
    assert rc == 0
    files = set(os.listdir(out))
    assert {"history.csv", "final_summary.json", "config.ini"} <= files
    assert any(f.startswith("design_") and f.endswith(".vtk") for f in files)
    assert any(f.startswith("mesh_") and f.endswith(".vtk") for f in files)
    assert len(OptHistory.read_csv(out / "history.csv").rows) == 3
    summary = json.loads((out / "final_summary.json").read_text())
    assert summary["iterations"] == 3 and "E_xfem" in summary["efficiency"]
    assert "iterations 3" in capsys.readouterr().out
