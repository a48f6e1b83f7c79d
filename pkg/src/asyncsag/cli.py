"""Experiment orchestration: INI configs, end-to-end runs, verification.

Subcommands:
  run        build the problem, simulate, write metrics CSV + constants report
  verify     short trace + structural checks (stochasticity, replay, tracking,
             product-contraction bound), pass/fail per check
  constants  print the spectral and worst-case rate constants only

Exit codes: 0 success, 1 verification check failed, 2 invalid configuration,
3 assumption violation during a run.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augmented, baselines, mdp, mspbe, simulator
from .graph import DirectedGraph, diameter, generate_topology, is_strongly_connected
from .simulator import ActivationSchedule, AssumptionViolation, DelayModel

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_BAD_CONFIG = 2
EXIT_ASSUMPTION = 3


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class ExperimentConfig:
    # problem
    num_states: int = 20
    num_actions: int = 2
    n: int = 1
    d: int = 5
    m: int = 100                  # total transitions in the trajectory
    gamma: float = 0.95
    rho: float = 0.1
    mode: str = "parallel"        # parallel | marl
    proportions: list[float] | None = None
    data_seed: int = 0
    # topology
    topology: str = "ring"
    edge_list_path: str | None = None
    # algorithm
    eta1: float = 0.01
    eta2: float = 0.1
    batch_size: int = 1
    epsilon: float | None = None
    max_events: int = 2000
    verify_events: int = 300
    # schedule
    schedule: str = "uniform_random"
    delay_kind: str = "uniform"
    d_max: int = 2
    straggler_node: int | None = None
    straggler_factor: float = 1.0
    run_seed: int = 1
    b_max: int | None = None
    # experiments
    n_values: list[int] | None = None   # speedup sweep
    eta1_values: list[float] | None = None
    target_err: float | None = None

    @property
    def zeta(self) -> float:
        return self.eta2 / self.eta1


def _get(parser: configparser.ConfigParser, section: str, key: str, conv,
         default=None, required: bool = False):
    if not parser.has_option(section, key):
        if required:
            raise ConfigError(f"[{section}] {key}: required key is missing")
        return default
    raw = parser.get(section, key)
    try:
        return conv(raw)
    except (TypeError, ValueError):
        raise ConfigError(
            f"[{section}] {key}: cannot parse {raw!r} as {conv.__name__}"
        ) from None


def _float_list(raw: str) -> list[float]:
    return [float(x) for x in raw.replace(",", " ").split()]


def _int_list(raw: str) -> list[int]:
    return [int(x) for x in raw.replace(",", " ").split()]


def load_config(path: str | Path) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file {path} not found or empty")
    cfg = ExperimentConfig()

    sec = "problem"
    if parser.has_section(sec):
        cfg.num_states = _get(parser, sec, "num_states", int, cfg.num_states)
        cfg.num_actions = _get(parser, sec, "num_actions", int, cfg.num_actions)
        cfg.n = _get(parser, sec, "n", int, cfg.n)
        cfg.d = _get(parser, sec, "d", int, cfg.d)
        cfg.m = _get(parser, sec, "m", int, cfg.m)
        cfg.gamma = _get(parser, sec, "gamma", float, cfg.gamma)
        cfg.rho = _get(parser, sec, "rho", float, cfg.rho)
        cfg.mode = _get(parser, sec, "mode", str, cfg.mode)
        cfg.data_seed = _get(parser, sec, "seed", int, cfg.data_seed)
        if parser.has_option(sec, "proportions"):
            cfg.proportions = _get(parser, sec, "proportions", _float_list)

    sec = "topology"
    if parser.has_section(sec):
        cfg.topology = _get(parser, sec, "kind", str, cfg.topology)
        cfg.edge_list_path = _get(parser, sec, "path", str, cfg.edge_list_path)
        topo_n = _get(parser, sec, "n", int, None)
        if topo_n is not None and topo_n != cfg.n:
            raise ConfigError(
                f"[topology] n={topo_n} conflicts with [problem] n={cfg.n}"
            )

    sec = "algorithm"
    if parser.has_section(sec):
        eta1 = _get(parser, sec, "eta1", float, None)
        eta2 = _get(parser, sec, "eta2", float, None)
        eta = _get(parser, sec, "eta", float, None)
        zeta = _get(parser, sec, "zeta", float, None)
        if eta is not None and zeta is not None:
            cfg.eta1, cfg.eta2 = eta, eta * zeta
            if eta1 is not None and abs(eta1 - cfg.eta1) > 1e-12 * abs(cfg.eta1):
                raise ConfigError(f"[algorithm] eta1={eta1} conflicts with eta={eta}")
            if eta2 is not None and abs(eta2 - cfg.eta2) > 1e-9 * abs(cfg.eta2):
                raise ConfigError(
                    f"[algorithm] eta2={eta2} conflicts with eta*zeta={cfg.eta2}"
                )
        elif eta1 is not None and eta2 is not None:
            cfg.eta1, cfg.eta2 = eta1, eta2
        elif any(v is not None for v in (eta1, eta2, eta, zeta)):
            raise ConfigError(
                "[algorithm] give both eta1 and eta2, or both eta and zeta"
            )
        cfg.batch_size = _get(parser, sec, "batch_size", int, cfg.batch_size)
        cfg.epsilon = _get(parser, sec, "epsilon", float, cfg.epsilon)
        cfg.max_events = _get(parser, sec, "max_events", int, cfg.max_events)
        cfg.verify_events = _get(parser, sec, "verify_events", int, cfg.verify_events)

    sec = "schedule"
    if parser.has_section(sec):
        cfg.schedule = _get(parser, sec, "kind", str, cfg.schedule)
        cfg.delay_kind = _get(parser, sec, "delay", str, cfg.delay_kind)
        cfg.d_max = _get(parser, sec, "d_max", int, cfg.d_max)
        cfg.straggler_node = _get(parser, sec, "straggler_node", int,
                                  cfg.straggler_node)
        cfg.straggler_factor = _get(parser, sec, "straggler_factor", float,
                                    cfg.straggler_factor)
        cfg.run_seed = _get(parser, sec, "seed", int, cfg.run_seed)
        cfg.b_max = _get(parser, sec, "b_max", int, cfg.b_max)

    sec = "experiment"
    if parser.has_section(sec):
        if parser.has_option(sec, "n_values"):
            cfg.n_values = _get(parser, sec, "n_values", _int_list)
        if parser.has_option(sec, "eta1_values"):
            cfg.eta1_values = _get(parser, sec, "eta1_values", _float_list)
        cfg.target_err = _get(parser, sec, "target_err", float, cfg.target_err)

    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    if cfg.n < 1:
        raise ConfigError("[problem] n: need at least one node")
    if cfg.mode not in ("parallel", "marl"):
        raise ConfigError(f"[problem] mode: unknown mode {cfg.mode!r}")
    if cfg.d > cfg.num_states:
        raise ConfigError("[problem] d: feature dimension exceeds state count")
    if not (0 < cfg.gamma < 1):
        raise ConfigError("[problem] gamma: must lie strictly in (0, 1)")
    if cfg.rho <= 0:
        raise ConfigError("[problem] rho: must be positive")
    if cfg.eta1 <= 0 or cfg.eta2 <= 0:
        raise ConfigError("[algorithm] eta1/eta2: step sizes must be positive")
    if cfg.topology == "edge_list" and not cfg.edge_list_path:
        raise ConfigError("[topology] path: required for edge_list topology")
    if cfg.topology == "edge_list" and not Path(cfg.edge_list_path).exists():
        raise ConfigError(f"[topology] path: file {cfg.edge_list_path} does not exist")
    if cfg.schedule == "straggler" and cfg.straggler_node is None:
        raise ConfigError("[schedule] straggler_node: required for straggler kind")
    if cfg.proportions is not None and len(cfg.proportions) != cfg.n:
        raise ConfigError(
            f"[problem] proportions: need {cfg.n} entries, got {len(cfg.proportions)}"
        )
    if (cfg.eta1_values is not None and cfg.n_values is not None
            and len(cfg.eta1_values) != len(cfg.n_values)):
        raise ConfigError(
            "[experiment] eta1_values: need one entry per n_values entry"
        )


@dataclass
class ExperimentBundle:
    config: ExperimentConfig
    problem: mspbe.ProblemSpec
    graph: DirectedGraph
    z_star: np.ndarray
    spectral: mspbe.SpectralConstants


def build_problem(cfg: ExperimentConfig, n: int | None = None,
                  proportions: list[float] | None = None) -> mspbe.ProblemSpec:
    """Generate the data pipeline for ``n`` nodes (defaults to the config's)."""
    n = cfg.n if n is None else n
    proportions = cfg.proportions if proportions is None else proportions
    streams = n if cfg.mode == "marl" else 1
    the_mdp = mdp.build_random_mdp(cfg.num_states, cfg.num_actions, streams,
                                   cfg.data_seed, gamma=cfg.gamma)
    policy = mdp.random_policy(cfg.num_states, cfg.num_actions, cfg.data_seed)
    traj = mdp.sample_trajectory(the_mdp, policy, cfg.m + 1, cfg.data_seed)
    features = mdp.make_feature_map(cfg.num_states, cfg.d, cfg.data_seed)
    per_node = mdp.partition_samples(traj, features, cfg.mode, n, proportions)
    return mspbe.problem_from_samples(per_node, cfg.rho, cfg.gamma)


def build_experiment(cfg: ExperimentConfig) -> ExperimentBundle:
    problem = build_problem(cfg)
    graph = generate_topology(cfg.topology, cfg.n, cfg.edge_list_path)
    if not is_strongly_connected(graph):
        raise ConfigError(f"[topology] {cfg.topology}: graph is not strongly connected")
    z_star = mspbe.solve_problem(problem)
    spectral = mspbe.spectral_constants(problem, cfg.zeta)
    return ExperimentBundle(config=cfg, problem=problem, graph=graph,
                            z_star=z_star, spectral=spectral)


def _schedule(cfg: ExperimentConfig) -> ActivationSchedule:
    return ActivationSchedule(
        kind=cfg.schedule, n=cfg.n,
        straggler_node=cfg.straggler_node if cfg.schedule == "straggler" else None,
        straggler_factor=cfg.straggler_factor if cfg.schedule == "straggler" else 1.0,
    )


def _delays(cfg: ExperimentConfig) -> DelayModel:
    return DelayModel(kind=cfg.delay_kind, d_max=cfg.d_max)


def _run_trace(bundle: ExperimentBundle, max_events: int,
               seed: int | None = None) -> simulator.EventTrace:
    cfg = bundle.config
    seed = cfg.run_seed if seed is None else seed
    if cfg.schedule == "sync":
        rounds = max(1, max_events // cfg.n)
        straggler = None
        if cfg.straggler_node is not None and cfg.straggler_factor > 1:
            straggler = (cfg.straggler_node, cfg.straggler_factor)
        return simulator.run_sync(bundle.problem, bundle.graph, rounds,
                                  cfg.eta1, cfg.eta2, seed,
                                  straggler=straggler,
                                  batch_size=cfg.batch_size)
    return simulator.run_async(bundle.problem, bundle.graph, _schedule(cfg),
                               _delays(cfg), cfg.eta1, cfg.eta2, seed,
                               max_events=max_events, epsilon=cfg.epsilon,
                               batch_size=cfg.batch_size, b_max=cfg.b_max)


def _mp_str(x) -> str:
    try:
        import mpmath as mp
        if x == 0:
            return "0"
        exp = mp.floor(mp.log10(abs(x)))
        mant = x / mp.power(10, exp)
        return mp.nstr(mant, 8) + "e" + str(int(exp))
    except Exception:
        return str(x)


def constants_report(bundle: ExperimentBundle, trace: simulator.EventTrace) -> str:
    cfg = bundle.config
    spectral = bundle.spectral
    b = simulator.verify_assumption1b(trace)
    # a single node has diameter 0; the worst-case bound needs one hop
    d_g = max(1, diameter(bundle.graph))
    big_k = 2 * max(bundle.problem.m_i) - 1
    rc = augmented.rate_constants(cfg.n, b, big_k, d_g, spectral)
    lines = [
        "constants report",
        f"n {cfg.n}",
        f"d {bundle.problem.d}",
        f"m {bundle.problem.m}",
        f"b_certified {b}",
        f"diameter {d_g}",
        f"K_selection {big_k}",
        f"ntilde {rc.ntilde}",
        f"alpha {spectral.alpha!r}",
        f"beta {spectral.beta!r}",
        f"psi {spectral.psi!r}",
        f"zeta {cfg.zeta!r}",
        f"zeta_min {spectral.zeta_min!r}",
        f"zeta_above_threshold {cfg.zeta > spectral.zeta_min}",
        f"g_eigs_real {spectral.g_eigs_real}",
        f"spectral_valid {spectral.valid}",
        f"kappa {_mp_str(rc.kappa)}",
        f"one_minus_delta {_mp_str(rc.one_minus_delta)}",
        f"mu {_mp_str(rc.mu)}",
        f"mu_times_n_over_kappa {rc.mu_over_kappa_times_n!r}",
        f"t_tilde {_mp_str(rc.t_tilde)}",
        f"eta_max_theory {_mp_str(rc.eta_max_theory)}",
        f"eta_used {_mp_str(rc.eta_used)}",
        f"one_minus_c {_mp_str(rc.one_minus_c)}",
        f"rate_valid {rc.valid}",
        f"eta2_max_for_eta1 {augmented.eta2_range(bundle.problem.m, spectral, cfg.eta1)!r}",
    ]
    return "\n".join(lines) + "\n"


def cmd_run(cfg: ExperimentConfig, out_dir: Path,
            seed: int | None = None) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.n_values:
        return _cmd_run_sweep(cfg, out_dir, seed)
    bundle = build_experiment(cfg)
    trace = _run_trace(bundle, cfg.max_events, seed)
    series = simulator.metrics(trace, bundle.z_star)
    simulator.write_metrics_csv(series, out_dir / "metrics.csv")
    (out_dir / "constants.txt").write_text(constants_report(bundle, trace))
    fit = None
    if series.err_max.shape[0] >= 100:
        fit = simulator.estimate_rate(series.err_max)
    print(f"events {trace.num_events}")
    print(f"stop {trace.stop_reason}")
    print(f"err_max_initial {float(series.err_max[0])!r}")
    print(f"err_max_final {float(series.err_max[-1])!r}")
    if fit is not None:
        print(f"rate_c_hat {fit.c_hat!r}")
        print(f"rate_r_squared {fit.r_squared!r}")
    print(f"wrote {out_dir / 'metrics.csv'}")
    print(f"wrote {out_dir / 'constants.txt'}")
    return EXIT_OK


def _cmd_run_sweep(cfg: ExperimentConfig, out_dir: Path,
                   seed: int | None) -> int:
    """Speedup sweep: same total data, growing node counts."""
    target = cfg.target_err if cfg.target_err is not None else 1e-4
    zeta = cfg.zeta
    rows = []
    for idx, n in enumerate(cfg.n_values):
        eta1 = (cfg.eta1_values[idx] if cfg.eta1_values is not None
                else cfg.eta1)
        proportions = [float(i + 1) for i in range(n)]
        problem = build_problem(cfg, n=n, proportions=proportions)
        graph = generate_topology("exponential", n)
        z_star = mspbe.solve_problem(problem)
        schedule = ActivationSchedule(kind="uniform_random", n=n)
        trace = simulator.run_async(
            problem, graph, schedule, _delays(cfg), eta1, eta1 * zeta,
            cfg.run_seed if seed is None else seed,
            max_events=cfg.max_events, batch_size=cfg.batch_size,
        )
        series = simulator.metrics(trace, z_star)
        below = np.nonzero(series.err_max <= target)[0]
        hit = int(series.k[below[0]]) if below.size else -1
        rows.append((n, hit, hit * cfg.batch_size / n if hit >= 0 else -1))
        simulator.write_metrics_csv(series, out_dir / f"metrics_n{n}.csv")
    with open(out_dir / "speedup.csv", "w", encoding="utf-8") as fh:
        fh.write("n,events_to_target,per_node_evals\n")
        for n, ev, per in rows:
            fh.write(f"{n},{ev},{per!r}\n")
    for n, ev, per in rows:
        print(f"n {n}: events_to_target {ev}, per_node_evals {per!r}")
    print(f"wrote {out_dir / 'speedup.csv'}")
    return EXIT_OK


def cmd_verify(cfg: ExperimentConfig, out_dir: Path,
               seed: int | None = None) -> int:
    bundle = build_experiment(cfg)
    events = min(cfg.verify_events, cfg.max_events)
    trace = _run_trace(bundle, events, seed)
    checks: list[tuple[str, bool, str]] = []

    b = simulator.verify_assumption1b(trace)
    d_g = max(1, diameter(bundle.graph))
    consumed = augmented._consumption_index(trace)

    worst_row = worst_col = 0.0
    mats_for_product = []
    keep = min(trace.num_events, 200)
    for k in range(1, trace.num_events + 1):
        mats = augmented.build_event_matrices(trace, k, b=b, _consumed=consumed)
        worst_row = max(worst_row, float(np.max(np.abs(mats.h_row.sum(axis=1) - 1))))
        worst_col = max(worst_col, float(np.max(np.abs(mats.h_col.sum(axis=0) - 1))))
        if k <= keep:
            mats_for_product.append(mats)
    ok = worst_row <= 1e-12 and worst_col <= 1e-12
    checks.append(("stochasticity", ok,
                   f"max row-sum dev {worst_row:.2e}, max col-sum dev {worst_col:.2e}"))

    states = augmented.replay(trace, bundle.problem, cfg.eta1, cfg.zeta)
    dev = augmented.check_equivalence(trace, states)
    checks.append(("replay_equivalence", dev <= 1e-9, f"max deviation {dev:.2e}"))

    res = augmented.tracking_residual(states)
    checks.append(("tracking_identity", float(np.max(res)) <= 1e-9,
                   f"max residual {float(np.max(res)):.2e}"))

    big_k = 2 * max(bundle.problem.m_i) - 1
    rc = augmented.rate_constants(cfg.n, b, big_k, d_g, bundle.spectral)
    dist_row = augmented.product_contraction([m.h_row for m in mats_for_product])
    dist_col = augmented.product_contraction([m.h_col for m in mats_for_product])
    first_bad = None
    for t in range(dist_row.shape[0]):
        bound = 2.0 * augmented.delta_power(rc, t)
        if dist_row[t] > bound or dist_col[t] > bound:
            first_bad = (t, max(dist_row[t], dist_col[t]), bound)
            break
    ok = first_bad is None
    detail = ("all t within bound" if ok else
              f"first failure at t={first_bad[0]}: distance {first_bad[1]:.4f} "
              f"> bound {first_bad[2]:.4f}")
    checks.append(("product_contraction_bound", ok, detail))

    failed = [name for name, ok, _ in checks if not ok]
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    print(f"certified_b {b}")
    return EXIT_OK if not failed else EXIT_CHECK_FAILED


def cmd_constants(cfg: ExperimentConfig, out_dir: Path,
                  seed: int | None = None) -> int:
    bundle = build_experiment(cfg)
    events = min(cfg.verify_events, cfg.max_events)
    trace = _run_trace(bundle, events, seed)
    report = constants_report(bundle, trace)
    sys.stdout.write(report)
    return EXIT_OK


def bundled_config(name: str) -> Path:
    path = Path(__file__).parent / "configs" / f"{name}.ini"
    if not path.exists():
        raise ConfigError(f"no bundled config named {name!r}")
    return path


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="asyncsag",
        description="Asynchronous push-pull averaged-gradient policy "
                    "evaluation: simulation, verification, constants.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "verify", "constants"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True,
                       help="path to an INI config, or a bundled name "
                            "(quickstart, marl9, straggler, speedup)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the run seed")
    args = parser.parse_args(argv)

    try:
        cfg_path = Path(args.config)
        if not cfg_path.exists() and not cfg_path.suffix:
            cfg_path = bundled_config(args.config)
        cfg = load_config(cfg_path)
        out_dir = Path(args.out)
        if args.command == "run":
            return cmd_run(cfg, out_dir, args.seed)
        if args.command == "verify":
            return cmd_verify(cfg, out_dir, args.seed)
        return cmd_constants(cfg, out_dir, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except AssumptionViolation as exc:
        print(f"assumption violation: {exc}", file=sys.stderr)
        return EXIT_ASSUMPTION


if __name__ == "__main__":
    sys.exit(main())
