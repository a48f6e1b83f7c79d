"""Command-line driver: config parsing and validation, exit codes, output
files, and bundled experiment definitions."""

from __future__ import annotations

import numpy as np
import pytest

from asyncsag import cli, graph


BASE_INI = """\
[problem]
num_states = 10
num_actions = 2
n = 3
d = 3
m = 24
gamma = 0.9
rho = 0.1
mode = parallel
seed = 3

[topology]
kind = ring

[algorithm]
eta1 = 0.01
eta2 = 0.1
max_events = 150
verify_events = 100

[schedule]
kind = uniform_random
delay = uniform
d_max = 2
seed = 5
"""


def write_ini(tmp_path, text, name="exp.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_load_config_reads_all_sections(tmp_path):
    cfg = cli.load_config(write_ini(tmp_path, BASE_INI))
    assert cfg.num_states == 10
    assert cfg.n == 3
    assert cfg.m == 24
    assert cfg.gamma == 0.9
    assert cfg.mode == "parallel"
    assert cfg.data_seed == 3
    assert cfg.topology == "ring"
    assert cfg.eta1 == 0.01 and cfg.eta2 == 0.1
    assert cfg.zeta == pytest.approx(10.0)
    assert cfg.max_events == 150
    assert cfg.schedule == "uniform_random"
    assert cfg.d_max == 2
    assert cfg.run_seed == 5


def test_eta_zeta_form_sets_both_steps(tmp_path):
    text = BASE_INI.replace("eta1 = 0.01\neta2 = 0.1",
                            "eta = 0.02\nzeta = 16")
    cfg = cli.load_config(write_ini(tmp_path, text))
    assert cfg.eta1 == 0.02
    assert cfg.eta2 == pytest.approx(0.32)


def test_conflicting_step_forms_rejected(tmp_path):
    text = BASE_INI.replace("eta1 = 0.01\neta2 = 0.1",
                            "eta1 = 0.05\neta = 0.02\nzeta = 16")
    with pytest.raises(cli.ConfigError) as err:
        cli.load_config(write_ini(tmp_path, text))
    assert "conflicts" in str(err.value)


def test_half_specified_steps_rejected(tmp_path):
    text = BASE_INI.replace("eta1 = 0.01\neta2 = 0.1", "eta1 = 0.05")
    with pytest.raises(cli.ConfigError) as err:
        cli.load_config(write_ini(tmp_path, text))
    assert "both" in str(err.value)


def test_parse_error_names_section_and_key(tmp_path):
    text = BASE_INI.replace("gamma = 0.9", "gamma = fast")
    with pytest.raises(cli.ConfigError) as err:
        cli.load_config(write_ini(tmp_path, text))
    assert "[problem] gamma" in str(err.value)
    assert "cannot parse" in str(err.value)


@pytest.mark.parametrize("swap,needle", [
    (("mode = parallel", "mode = sharded"), "unknown mode"),
    (("d = 3", "d = 11"), "feature dimension"),
    (("gamma = 0.9", "gamma = 1.5"), "gamma"),
    (("rho = 0.1", "rho = -1"), "rho"),
    (("kind = uniform_random", "kind = straggler"), "straggler_node"),
])
def test_validation_errors(tmp_path, swap, needle):
    with pytest.raises(cli.ConfigError) as err:
        cli.load_config(write_ini(tmp_path, BASE_INI.replace(*swap)))
    assert needle in str(err.value)


def test_topology_node_count_conflict(tmp_path):
    text = BASE_INI.replace("kind = ring", "kind = ring\nn = 5")
    with pytest.raises(cli.ConfigError) as err:
        cli.load_config(write_ini(tmp_path, text))
    assert "conflicts" in str(err.value)


def test_proportions_length_checked(tmp_path):
    text = BASE_INI.replace("mode = parallel",
                            "mode = parallel\nproportions = 1 2")
    with pytest.raises(cli.ConfigError) as err:
        cli.load_config(write_ini(tmp_path, text))
    assert "proportions" in str(err.value)


def test_sweep_step_list_length_checked(tmp_path):
    text = BASE_INI + "\n[experiment]\nn_values = 1 2 4\neta1_values = 0.1 0.2\n"
    with pytest.raises(cli.ConfigError) as err:
        cli.load_config(write_ini(tmp_path, text))
    assert "eta1_values" in str(err.value)


def test_bundled_configs_exist_and_load():
    for name in ("quickstart", "marl9", "straggler", "speedup"):
        cfg = cli.load_config(cli.bundled_config(name))
        assert cfg.n >= 1
    with pytest.raises(cli.ConfigError):
        cli.bundled_config("nonexistent")


def test_main_reports_bad_config_with_exit_2(tmp_path, capsys):
    bad = write_ini(tmp_path, BASE_INI.replace("gamma = 0.9", "gamma = 2.0"))
    code = cli.main(["run", "--config", str(bad), "--out", str(tmp_path)])
    assert code == cli.EXIT_BAD_CONFIG
    assert "config error" in capsys.readouterr().err
    code = cli.main(["run", "--config", "nonexistent",
                     "--out", str(tmp_path)])
    assert code == cli.EXIT_BAD_CONFIG


def test_main_run_writes_outputs_and_is_reproducible(tmp_path, capsys):
    ini = write_ini(tmp_path, BASE_INI)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", "--config", str(ini), "--out", str(out_a)]) == 0
    assert cli.main(["run", "--config", str(ini), "--out", str(out_b)]) == 0
    metrics_a = (out_a / "metrics.csv").read_bytes()
    assert metrics_a == (out_b / "metrics.csv").read_bytes()
    lines = metrics_a.decode().splitlines()
    assert lines[0] == "k,node,event_type,err_max,err_mean,y_norm_max"
    assert len(lines) == 150 + 2  # initial row + one per event + header
    constants = (out_a / "constants.txt").read_text()
    for key in ("b_certified", "kappa", "one_minus_c", "zeta_min",
                "eta_max_theory", "mu_times_n_over_kappa"):
        assert key in constants
    # a different seed must change the trajectory
    out_c = tmp_path / "c"
    assert cli.main(["run", "--config", str(ini), "--out", str(out_c),
                     "--seed", "99"]) == 0
    assert metrics_a != (out_c / "metrics.csv").read_bytes()
    capsys.readouterr()


def test_main_verify_multinode_reports_contraction_failure(tmp_path, capsys):
    """On multi-node runs three structural checks hold at machine precision
    while the worst-case product bound fails at t=0 (the identity is farther
    than 2 from rank one whenever the register stack is big enough)."""
    ini = write_ini(tmp_path, BASE_INI)
    code = cli.main(["verify", "--config", str(ini), "--out", str(tmp_path)])
    out = capsys.readouterr().out
    assert code == cli.EXIT_CHECK_FAILED
    assert "PASS stochasticity" in out
    assert "PASS replay_equivalence" in out
    assert "PASS tracking_identity" in out
    assert "FAIL product_contraction_bound" in out
    assert "certified_b" in out


def test_main_verify_single_node_passes_everything(tmp_path, capsys):
    text = BASE_INI.replace("n = 3", "n = 1")
    ini = write_ini(tmp_path, text)
    code = cli.main(["verify", "--config", str(ini), "--out", str(tmp_path)])
    out = capsys.readouterr().out
    assert code == cli.EXIT_OK
    assert out.count("PASS") == 4
    assert "FAIL" not in out


def test_main_constants_prints_report(tmp_path, capsys):
    ini = write_ini(tmp_path, BASE_INI)
    assert cli.main(["constants", "--config", str(ini),
                     "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("constants report")
    for key in ("alpha", "beta", "psi", "t_tilde", "one_minus_c",
                "rate_valid", "eta2_max_for_eta1"):
        assert key in out


def test_main_assumption_violation_exits_3(tmp_path, capsys):
    text = BASE_INI.replace("seed = 5", "seed = 5\nb_max = 1")
    ini = write_ini(tmp_path, text)
    code = cli.main(["run", "--config", str(ini), "--out", str(tmp_path)])
    assert code == cli.EXIT_ASSUMPTION
    assert "assumption violation" in capsys.readouterr().err


def test_sweep_writes_speedup_table(tmp_path, capsys):
    text = BASE_INI + (
        "\n[experiment]\nn_values = 1 2\neta1_values = 0.01 0.02\n"
        "target_err = 0.1\n"
    )
    ini = write_ini(tmp_path, text)
    out = tmp_path / "sweep"
    assert cli.main(["run", "--config", str(ini), "--out", str(out)]) == 0
    capsys.readouterr()
    table = (out / "speedup.csv").read_text().splitlines()
    assert table[0] == "n,events_to_target,per_node_evals"
    rows = [line.split(",") for line in table[1:]]
    assert [int(r[0]) for r in rows] == [1, 2]
    for r in rows:
        int(r[1])
        float(r[2])
    assert (out / "metrics_n1.csv").exists()
    assert (out / "metrics_n2.csv").exists()


def test_edge_list_topology_through_config(tmp_path, capsys):
    edges = tmp_path / "edges.txt"
    graph.dump_edge_list(graph.generate_topology("ring", 3), edges)
    text = BASE_INI.replace(
        "kind = ring", f"kind = edge_list\npath = {edges}")
    ini = write_ini(tmp_path, text)
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(ini), "--out", str(out)]) == 0
    capsys.readouterr()
    assert (out / "metrics.csv").exists()
    # a missing file is a config error, not a crash
    text = BASE_INI.replace(
        "kind = ring", f"kind = edge_list\npath = {tmp_path / 'missing.txt'}")
    with pytest.raises(cli.ConfigError):
        cli.load_config(write_ini(tmp_path, text, name="bad.ini"))
