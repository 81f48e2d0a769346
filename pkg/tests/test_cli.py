import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from iontrap import cli

GATE_CHAIN = {"site_freqs_hz": [22.425e6 + (p - 1) * 0.5e6 for p in range(5) for _ in range(2)],
              "spacing_m": 28e-6, "radial_hz": [38e6, 60e6]}


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def run(tmp_path, command, cfg, *extra):
    return cli.main([*command.split(), "--config", write_cfg(tmp_path, cfg), "--out", str(tmp_path / "out"), *extra])


def small_slice():
    return {"nx": 11, "nz": 5}


def sim_cfg(**over):
    sim = {"wells": [5], "n_steps": 300, "record_every": 10, "average_periods": 5}
    sim.update(over)
    return {"seed": 7, "sim": sim}


def test_config_syntax_error_reports_position(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "layout": "builtin:empty",\n  oops\n}')
    assert cli.main(["trap-show", "--config", str(p)]) == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "bad.json:3:3" in err


@pytest.mark.parametrize("cfg", [[1, 2], {"layout": "builtin:nope"}, {"species": "unobtainium"},
                                 {"layout": "builtin:example-ca", "wells": [40]}])
def test_config_errors(tmp_path, cfg):
    cmd = "simulate" if isinstance(cfg, dict) and "wells" in cfg else "trap-show"
    assert run(tmp_path, cmd, cfg) == cli.EXIT_CONFIG


def test_trap_show_empty_layout(tmp_path, capsys):
    assert run(tmp_path, "trap-show", {"layout": "builtin:empty"}) == cli.EXIT_OK
    assert "0 wells" in capsys.readouterr().out
    assert json.loads((tmp_path / "out" / "trap_show.json").read_text())["n_wells"] == 0


def test_trap_show_example(tmp_path):
    assert run(tmp_path, "trap-show", {"trap_show": small_slice()}) == cli.EXIT_OK
    out = tmp_path / "out"
    lines = (out / "wells.csv").read_text().splitlines()
    assert lines[0].startswith("# tool_version=") and "seed=0" in lines[0]
    rows = list(csv.DictReader(lines[1:]))
    assert len(rows) == 12
    assert all(r["stable"] == "1" and float(r["depth_mev"]) > 50 for r in rows)
    fz = [float(r["fz_hz"]) for r in rows]
    assert np.allclose(fz, fz[::-1], rtol=1e-6)
    assert (out / "potential_xz.svg").read_text().lstrip().startswith("<?xml")
    assert "meta" in json.loads((out / "trap_show.json").read_text())


def test_simulate_is_bit_reproducible(tmp_path):
    outs = []
    for k in range(2):
        d = tmp_path / f"r{k}"
        d.mkdir()
        assert run(d, "simulate", sim_cfg()) == cli.EXIT_OK
        outs.append({f: (d / "out" / f).read_bytes() for f in ("trajectory.csv", "equilibrium.json", "simulate.json", "trajectory.svg")})
    assert outs[0] == outs[1]
    eq = json.loads(outs[0]["equilibrium.json"])
    assert eq["meta"]["seed"] == 7 and len(eq["positions_m"]) == 1


def test_seed_flag_overrides_config(tmp_path):
    assert run(tmp_path, "simulate", sim_cfg(), "--seed", "3") == cli.EXIT_OK
    assert "seed=3" in (tmp_path / "out" / "trajectory.csv").read_text().splitlines()[0]


def test_ion_loss_exit(tmp_path):
    cfg = sim_cfg(initial_offset_m=[0.0, 0.0, 200e-6], bounding_box_m=1e-4)
    assert run(tmp_path, "simulate", cfg) == cli.EXIT_ION_LOSS


def test_modes_and_equilibrium_reuse(tmp_path):
    assert run(tmp_path, "modes", {"modes": {"wells": [4, 5, 6], "axes": ["z"]}}) == cli.EXIT_OK
    report = json.loads((tmp_path / "out" / "modes.json").read_text())
    assert len(report["axes"]["z"]["frequencies_hz"]) == 3 and "meta" in report
    spec = json.loads((tmp_path / "out" / "spectrum_z.json").read_text())
    assert "meta" in spec


def test_unstable_crystal_exit(tmp_path, capsys):
    (tmp_path / "eq.json").write_text(json.dumps({"positions_m": [[0.0, 0.0, 19.3e-6]]}))
    cfg = {"modes": {"wells": [5], "equilibrium": "eq.json", "axes": ["x"]}}
    assert run(tmp_path, "modes", cfg) == cli.EXIT_UNSTABLE
    assert "imaginary" in capsys.readouterr().err


def test_optimizer_exit_when_not_converged(tmp_path):
    cfg = {"optimize": {"targets": {"wells": [5], "axis": "z", "target_hz": 20e6},
                        "free_electrodes": ["dc5"], "max_iter": 1, "tol_hz": 1.0}}
    assert run(tmp_path, "optimize", cfg) == cli.EXIT_OPTIMIZER
    d = json.loads((tmp_path / "out" / "optimize.json").read_text())
    assert d["flags"]["max_iter_reached"] and "meta" in d
    assert set(json.loads((tmp_path / "out" / "voltages.json").read_text())["voltages_by_id"]) >= {"dc5"}


def test_optimizer_unknown_electrode(tmp_path):
    cfg = {"optimize": {"targets": {"wells": [5]}, "free_electrodes": ["DC99"]}}
    assert run(tmp_path, "optimize", cfg) == cli.EXIT_CONFIG


def gate_cfg(**over):
    g = {"chain": GATE_CHAIN, "pair": [2, 3], "mu_hz": 22.415e6, "n_bar_c": 20, "drift_rate": 1e5}
    g.update(over)
    return {"species": "be9", "gate": g}


def test_gate_solve(tmp_path, capsys):
    assert run(tmp_path, "gate solve", gate_cfg()) == cli.EXIT_OK
    p = json.loads((tmp_path / "out" / "pulse.json").read_text())
    assert len(p["omega_s_hz"]) == 5 and abs(p["chi"] - np.pi / 4) < 1e-9
    assert p["max_rabi_hz"] <= 0.25e6 and p["meta"]["infidelity"] < 1e-4
    assert (tmp_path / "out" / "rabi.svg").exists()


def test_gate_infeasible_exit(tmp_path):
    assert run(tmp_path, "gate solve", gate_cfg(n_segments=3)) == cli.EXIT_GATE
    assert run(tmp_path, "gate solve", gate_cfg(rabi_cap_hz=1e3)) == cli.EXIT_GATE


def test_gate_sweep_threads_identical(tmp_path):
    cfg = gate_cfg(sweep={"start_hz": 22.410e6, "stop_hz": 22.4102e6, "step_hz": 2.0})
    texts = []
    for threads in ("1", "2"):
        assert run(tmp_path, "gate sweep", cfg, "--threads", threads) == cli.EXIT_OK
        texts.append((tmp_path / "out" / "sweep.csv").read_text())
    assert texts[0] == texts[1]
    rows = list(csv.DictReader(texts[0].splitlines()[1:]))
    assert len(rows) == 101 and all(r["feasible"] == "1" for r in rows)


def test_gate_sweep_requires_range(tmp_path):
    assert run(tmp_path, "gate sweep", gate_cfg(sweep={"start_hz": 1.0})) == cli.EXIT_CONFIG


def test_console_entry_point(tmp_path):
    cfg = write_cfg(tmp_path, {"layout": "builtin:empty"})
    r = subprocess.run([sys.executable, "-m", "iontrap.cli", "trap-show", "--config", cfg,
                        "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert r.returncode == 0 and "0 wells" in r.stdout
