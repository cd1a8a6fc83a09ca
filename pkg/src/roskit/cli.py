"""Command-line front end: model chain inspection, region-of-safety
synthesis, guard evaluation, switching-instant synthesis, and simulation.

Exit codes: 0 on success, 2 when a requested verification or synthesis is
infeasible, 1 on any other error.
"""

import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import barrier as bar
from . import hybrid as hyb
from .plant import (ALG_NAMES, MODE_GAINS, STATE_NAMES, OperatingCondition,
                    PlantParameters, SfrParameters, assemble_closed_loop,
                    calibrate, cross_check_inertia, kron_reduce, linearize,
                    load_config, quantify_support, sma_reduce,
                    solve_equilibrium)
from .sdp import export_sdpa
from .sos import build_barrier_program, compile as sos_compile

EXIT_INFEASIBLE = 2

INFEASIBLE_ERRORS = (bar.InfeasibleInitError, bar.NoneFoundError,
                     hyb.GuardNeverFiresError)


class Pipeline:
    """Lazily evaluated model chain shared by the subcommands."""

    def __init__(self, config, out, seed):
        if config:
            self.params, self.sfr, self.cond = load_config(config)
        else:
            self.params = PlantParameters()
            self.sfr = SfrParameters()
            self.cond = OperatingCondition()
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.seed = seed
        self._cache = {}

    def _get(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    @property
    def calibrated(self):
        return self._get("cal", lambda: calibrate(self.params, self.cond))

    @property
    def equilibrium(self):
        return self._get("eq", lambda: solve_equilibrium(
            self.calibrated, self.cond))

    @property
    def lin(self):
        state, alg = self.equilibrium
        return self._get("lin", lambda: linearize(
            self.calibrated, state, alg, self.cond))

    @property
    def ss(self):
        return self._get("ss", lambda: kron_reduce(self.lin))

    @property
    def red(self):
        return self._get("red", lambda: sma_reduce(self.ss))

    @property
    def automaton(self):
        return self._get("auto", lambda: hyb.HybridAutomaton(
            hyb.build_modes(self.sfr, self.red, self.ss), self.sfr))

    def closed_loop(self, mode):
        return assemble_closed_loop(self.sfr, self.red, MODE_GAINS[mode])

    def scenario(self, mode, d_max, schedule):
        return bar.make_scenario(self.closed_loop(mode), mode, d_max=d_max,
                                 degree_schedule=schedule)

    def write_json(self, name, payload):
        path = self.out / name
        path.write_text(json.dumps(payload, indent=2))
        return path


def _fail_infeasible(exc):
    click.echo(f"infeasible: {exc}", err=True)
    sys.exit(EXIT_INFEASIBLE)


def _schedule(degree):
    return (degree,) if degree else bar.DEFAULT_SCHEDULE


def _hyb_scenario(step, step_time, horizon, limit):
    return hyb.Scenario(times=(0.0, step_time), values=(0.0, step),
                        horizon=horizon, limit=limit)


scenario_options = [
    click.option("--step", type=float, default=0.15, show_default=True,
                 help="Load-step magnitude (pu)."),
    click.option("--step-time", type=float, default=1.0, show_default=True,
                 help="Instant of the load step (s)."),
    click.option("--horizon", type=float, default=60.0, show_default=True),
    click.option("--limit", type=float, default=0.5, show_default=True,
                 help="Safety limit on |frequency deviation| (Hz)."),
]


def with_options(opts):
    def wrap(fn):
        for opt in reversed(opts):
            fn = opt(fn)
        return fn
    return wrap


@click.group()
@click.option("--config", type=click.Path(exists=True, dir_okay=False),
              default=None, help="JSON file with plant/sfr/operating "
              "sections.")
@click.option("--out", type=click.Path(file_okay=False), default=".",
              show_default=True, help="Directory for artifacts.")
@click.option("--seed", type=int, default=0, show_default=True,
              help="Seed for all randomized steps.")
@click.pass_context
def main(ctx, config, out, seed):
    """Frequency-safety analysis and switching synthesis for a wind-turbine
    fast-frequency-support controller."""
    threads = os.environ.get("ROSKIT_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = threads
    ctx.obj = Pipeline(config, out, seed)


@main.command()
@click.pass_obj
def equilibrium(pipe):
    """Solve and print the WTG operating equilibrium."""
    state, alg = pipe.equilibrium
    payload = {"state": dict(zip(STATE_NAMES, state.tolist())),
               "algebraic": dict(zip(ALG_NAMES, alg.tolist()))}
    path = pipe.write_json("equilibrium.json", payload)
    click.echo(f"rotor speed {state[2]:.4f} Hz, "
               f"P_gen {alg[4]:.4f} pu, Q {alg[5]:.4f} pu")
    click.echo(f"wrote {path}")


@main.command("linearize")
@click.pass_obj
def linearize_cmd(pipe):
    """Linearize the DAE and print the 7-state model's eigenvalues."""
    ss = pipe.ss
    eigs = np.linalg.eigvals(ss.A_sys)
    payload = {"A_sys": ss.A_sys.tolist(),
               "B_sys1": ss.B_sys1.tolist(), "B_sys2": ss.B_sys2.tolist(),
               "C_sys": ss.C_sys.tolist(),
               "D_sys1": ss.D_sys1, "D_sys2": ss.D_sys2,
               "eigenvalues": [[e.real, e.imag] for e in eigs]}
    path = pipe.write_json("linearization.json", payload)
    slow = eigs[np.argmin(np.abs(eigs.real))]
    click.echo(f"slowest eigenvalue {slow.real:.5f} "
               f"{slow.imag:+.5f}j")
    click.echo(f"wrote {path}")


@main.command()
@click.pass_obj
def reduce(pipe):
    """Reduce to the one-state rotor model and print the gain table."""
    red = pipe.red
    rows = {}
    for mode, gains in MODE_GAINS.items():
        b1, d1, b2, d2 = red.gain_coeffs(gains.K_ie, gains.K_pc)
        rows[mode] = {"K_ie": gains.K_ie, "K_pc": gains.K_pc,
                      "B_rd1": b1, "D_rd1": d1, "B_rd2": b2, "D_rd2": d2}
    payload = {"a_rd": red.a_rd, "c_rd": red.c_rd,
               "b_rd_unit": red.b_rd_unit, "d_rd_unit": red.d_rd_unit,
               "modes": rows}
    path = pipe.write_json("reduction.json", payload)
    click.echo(f"A_rd = {red.a_rd:.4f}   C_rd = {red.c_rd:.4f}")
    click.echo("mode   K_ie    K_pc    B_rd1    D_rd1    B_rd2    D_rd2")
    for mode, r in rows.items():
        click.echo(f"{mode:>4}  {r['K_ie']:6.2f}  {r['K_pc']:6.2f}  "
                   f"{r['B_rd1']:7.4f}  {r['D_rd1']:7.4f}  "
                   f"{r['B_rd2']:7.4f}  {r['D_rd2']:7.4f}")
    click.echo(f"wrote {path}")


@main.command()
@click.option("--mode", type=click.IntRange(1, 5), required=True)
@click.pass_obj
def quantify(pipe, mode):
    """Emulated inertia and damping profiles for one mode."""
    gains = MODE_GAINS[mode]
    q = quantify_support(pipe.red, gains)
    path = pipe.out / f"support_mode{mode}.csv"
    q.to_csv(path)
    model = pipe.closed_loop(mode)
    rep = cross_check_inertia(model, pipe.sfr)
    click.echo(f"H_e(0) = {q.h_e[0]:.4f} s, H_e({q.t_h:g} s) = "
               f"{q.h_e[-1]:.4f} s, D_e({q.t_p:g} s) = {q.d_e[0]:.4f} pu")
    click.echo(f"initial-rate cross-check: measured "
               f"{rep['measured_rocof']:.4f} Hz/s vs predicted "
               f"{rep['predicted_rocof']:.4f} Hz/s "
               f"({'ok' if rep['pass'] else 'MISMATCH'})")
    click.echo(f"wrote {path}")


@main.command()
@click.option("--mode", type=click.IntRange(1, 5), required=True)
@click.option("--degree", type=int, default=None,
              help="Fix the barrier degree instead of the default ladder.")
@click.option("--d-max", type=float, default=0.15, show_default=True)
@click.option("--n-seeds", type=int, default=1, show_default=True)
@click.option("--trials", type=int, default=200, show_default=True,
              help="Monte-Carlo validation sample count.")
@click.option("--quick", is_flag=True,
              help="Skip the expansion loop; keep the initial barrier.")
@click.pass_obj
def ros(pipe, mode, degree, d_max, n_seeds, trials, quick):
    """Synthesize and validate a region-of-safety barrier for one mode."""
    scen = pipe.scenario(mode, d_max, _schedule(degree))
    grid = bar.ProbeGrid.build(scen.n, seed=pipe.seed)
    try:
        seeds = bar.find_safe_seeds(scen, n_seeds, grid)
        B0 = bar.initialize(scen, seeds)
    except INFEASIBLE_ERRORS as exc:
        _fail_infeasible(exc)
    if quick:
        est = bar.RosEstimate(B0, scen, 0, B0.degree() + B0.degree() % 2,
                              [float(np.mean(
                                  B0.evaluate_many(grid.points) <= 0.0))])
    else:
        est = bar.expand(scen, B0, grid)
    report = bar.sample_validate(est, trials, seed=pipe.seed)
    sound = bar.pointwise_soundness(scen, est.barrier)
    guard_path = pipe.out / f"guard_mode{mode}.json"
    est.save(guard_path)
    pipe.write_json(f"ros_report_mode{mode}.json", {
        "mode": mode, "degree": est.degree, "iterations": est.iterations,
        "coverage": est.growth_history[-1],
        "growth_history": est.growth_history,
        "validation": {"trials": report.trials,
                       "violations": report.violations,
                       "worst_peak": report.worst_peak},
        "pointwise": sound})
    click.echo(f"mode {mode}: degree {est.degree}, "
               f"coverage {est.growth_history[-1]:.3f}, "
               f"{report.trials} trials, {report.violations} violations")
    click.echo(f"wrote {guard_path}")
    if not (report.ok and sound["ok"]):
        click.echo("validation failed; do not use this guard", err=True)
        sys.exit(1)


@main.command("guard-eval")
@click.option("--mode", type=click.IntRange(1, 5), required=True)
@click.option("--guard", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--d-max", type=float, default=0.15, show_default=True)
@click.option("--degree", type=int, default=None)
@with_options(scenario_options)
@click.pass_obj
def guard_eval(pipe, mode, guard, d_max, degree, step, step_time, horizon,
               limit):
    """Evaluate a stored guard along the unsupported trajectory."""
    scen = pipe.scenario(mode, d_max, _schedule(degree))
    est = bar.RosEstimate.load(guard, scen)
    traj = hyb.simulate(pipe.automaton,
                        _hyb_scenario(step, step_time, horizon, limit),
                        hyb.Policy())
    ups = hyb.guard_crossings(traj, est, "neg_to_pos")
    downs = hyb.guard_crossings(traj, est, "pos_to_neg")
    pipe.write_json(f"guard_eval_mode{mode}.json", {
        "mode": mode, "exits": ups, "entries": downs})
    if ups:
        t, dw = ups[0]
        click.echo(f"first exit from the region of safety at t = {t:.3f} s "
                   f"(dw = {dw:+.4f} Hz)")
    else:
        click.echo("trajectory never leaves the region of safety")


@main.command()
@click.option("--mode", type=click.IntRange(2, 5), required=True,
              help="Support mode to engage.")
@click.option("--guard", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Guard file for the target mode; without "
              "it the deadband comes from direct simulation bisection.")
@click.option("--d-max", type=float, default=0.15, show_default=True)
@with_options(scenario_options)
@click.pass_obj
def deadband(pipe, mode, guard, d_max, step, step_time, horizon, limit):
    """Largest safe activation deadband for one support mode."""
    scen = _hyb_scenario(step, step_time, horizon, limit)
    try:
        if guard:
            est = bar.RosEstimate.load(
                guard, pipe.scenario(mode, d_max, bar.DEFAULT_SCHEDULE))
            t_cr, db = hyb.critical_deadband(pipe.automaton, mode, est, scen)
            method = "guard"
        else:
            db = hyb.max_safe_deadband(pipe.automaton, mode, scen)
            t_cr = hyb.activation_time(pipe.automaton, mode, scen, db)
            method = "simulation"
    except INFEASIBLE_ERRORS as exc:
        _fail_infeasible(exc)
    pipe.write_json(f"deadband_mode{mode}.json", {
        "mode": mode, "deadband_hz": db, "switch_time_s": t_cr,
        "method": method})
    click.echo(f"mode {mode}: deadband {db:.4f} Hz "
               f"(switch at t = {t_cr:.3f} s, {method})")


@main.command()
@click.option("--deadband2", type=float, default=0.30, show_default=True)
@click.option("--deadband3", type=float, default=0.42, show_default=True)
@click.option("--deadband5", type=float, default=0.30, show_default=True)
@click.option("--guard1", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Mode-1 guard file; enables "
              "certificate-based instants.")
@click.option("--guard3", type=click.Path(exists=True, dir_okay=False),
              default=None)
@click.option("--d-max", type=float, default=0.15, show_default=True)
@with_options(scenario_options)
@click.pass_obj
def recover(pipe, deadband2, deadband3, deadband5, guard1, guard3, d_max,
            step, step_time, horizon, limit):
    """Earliest support deactivation instants and mode-5 step-down
    deadlines."""
    scen = _hyb_scenario(step, step_time, horizon, limit)
    auto = pipe.automaton
    out = {}
    try:
        if guard1:
            g1 = bar.RosEstimate.load(
                guard1, pipe.scenario(1, d_max, bar.DEFAULT_SCHEDULE))
            out["return_mode2_s"] = hyb.earliest_deactivation(
                auto, 2, g1, scen, deadband2)
            out["return_mode3_s"] = hyb.earliest_deactivation(
                auto, 3, g1, scen, deadband3)
            if guard3:
                g3 = bar.RosEstimate.load(
                    guard3, pipe.scenario(3, d_max, bar.DEFAULT_SCHEDULE))
                w1, w3 = hyb.deactivation_window(auto, g1, g3, scen,
                                                deadband5)
                out["deadline_5_to_1_s"] = w1
                out["deadline_5_to_3_s"] = w3
            out["method"] = "guard"
        else:
            out["return_mode2_s"] = hyb.earliest_safe_return(
                auto, 2, scen, deadband2)
            out["return_mode3_s"] = hyb.earliest_safe_return(
                auto, 3, scen, deadband3)
            out["deadline_5_to_1_s"] = hyb.latest_safe_switch(
                auto, 5, 1, scen, deadband5)
            out["deadline_5_to_3_s"] = hyb.latest_safe_switch(
                auto, 5, 3, scen, deadband5)
            out["method"] = "simulation"
    except INFEASIBLE_ERRORS as exc:
        _fail_infeasible(exc)
    pipe.write_json("recovery.json", out)
    for k, v in out.items():
        click.echo(f"{k} = {v if isinstance(v, str) else f'{v:.3f}'}")


@main.command()
@click.option("--policy", "policy_spec", default="none", show_default=True,
              help="none | deadband:DB:MODE | schedule:T=M[,T=M...] | "
              "deadband:DB:MODE+schedule:T=M[,...]")
@click.option("--order", type=click.Choice(["full", "reduced"]),
              default="full", show_default=True)
@click.option("--dt", type=float, default=1e-3, show_default=True)
@with_options(scenario_options)
@click.pass_obj
def simulate(pipe, policy_spec, order, dt, step, step_time, horizon, limit):
    """Simulate the hybrid closed loop and export the trajectory."""
    db, db_mode, sched = None, None, ()
    for part in policy_spec.split("+"):
        if part == "none":
            continue
        kind, _, rest = part.partition(":")
        if kind == "deadband":
            v, _, m = rest.partition(":")
            db, db_mode = float(v), int(m)
        elif kind == "schedule":
            sched = tuple((float(t), int(m)) for t, m in
                          (e.split("=") for e in rest.split(",")))
        else:
            raise click.BadParameter(f"unknown policy element {part!r}")
    traj = hyb.simulate(pipe.automaton,
                        _hyb_scenario(step, step_time, horizon, limit),
                        hyb.Policy(deadband=db, deadband_mode=db_mode,
                                   schedule=sched),
                        order=order, dt=dt)
    csv_path = pipe.out / "trajectory.csv"
    traj.to_csv(csv_path)
    traj.events_json(pipe.out / "events.json")
    click.echo(f"nadir {traj.nadir():+.4f} Hz, peak |dw| "
               f"{traj.max_abs_dw():.4f} Hz, settle {traj.settle():+.4f} Hz")
    if traj.mode[-1] == 1:
        rec = hyb.rotor_recovery_check(traj)
        click.echo(f"support area {rec['support_area']:+.4f} pu s, "
                   f"recovery area {rec['recovery_area']:+.4f} pu s, "
                   f"balanced: {rec['balanced']}")
    else:
        click.echo("support still active at the horizon; "
                   "recovery check skipped")
    click.echo(f"wrote {csv_path}")


@main.command("export-sdpa")
@click.option("--mode", type=click.IntRange(1, 5), required=True)
@click.option("--degree", type=int, default=4, show_default=True)
@click.option("--d-max", type=float, default=0.15, show_default=True)
@click.pass_obj
def export_sdpa_cmd(pipe, mode, degree, d_max):
    """Export the initialization program as an SDPA sparse file."""
    scen = pipe.scenario(mode, d_max, (degree,))
    origin = scen.scaling.to_scaled(np.zeros(scen.n))
    g_I = bar._seed_balls(scen, origin[None, :], 0.02)
    from .polyalg import Polynomial
    prog = build_barrier_program(
        scen.f, scen.g_X, g_I, scen.g_U, scen.g_D, scen.epsilon, degree,
        lam_B=Polynomial.constant(scen.xd_vars, 1.0))
    comp = sos_compile(prog)
    path = pipe.out / f"barrier_mode{mode}_deg{degree}.dat-s"
    export_sdpa(comp.problem, path)
    m = len(comp.problem.constraints)
    click.echo(f"wrote {path} ({m} constraints, "
               f"blocks {comp.problem.block_dims})")


@main.command()
@click.option("--quick", is_flag=True,
              help="Skip the slow mode-5 deadline scans.")
@click.pass_obj
def reproduce(pipe, quick):
    """Run the whole case study and report pass/fail per check."""
    checks = []

    def check(name, value, ok, target=""):
        checks.append({"name": name, "value": value, "ok": bool(ok),
                       "target": target})
        click.echo(f"[{'ok' if ok else 'FAIL'}] {name}: {value:+.4f}"
                   + (f"  (target {target})" if target else ""))

    red = pipe.red
    check("rotor mode A_rd", red.a_rd,
          abs(red.a_rd + 0.0723) < 0.005, "-0.0723")
    check("output coupling C_rd", red.c_rd,
          abs(red.c_rd - 0.0127) < 0.002, "0.0127")
    b1, d1, _, _ = red.gain_coeffs(-0.10, 0.0)
    check("B_rd1 at K_ie=-0.10", b1, abs(b1 / 0.6246 - 1) < 0.01, "0.6246")
    q2 = quantify_support(red, MODE_GAINS[2])
    check("H_e(0) in mode 2", q2.h_e[0], abs(q2.h_e[0] - 3.0) < 1e-9, "3.0")
    q5 = quantify_support(red, MODE_GAINS[5])
    check("D_e at activation in mode 5", q5.d_e[0],
          abs(q5.d_e[0] - 3.6) < 1e-6, "3.6")

    auto = pipe.automaton
    scen = hyb.Scenario()
    base = hyb.simulate(auto, scen, hyb.Policy(), dt=hyb.CHECK_DT)
    check("unsupported nadir", base.nadir(), base.nadir() < -0.5, "< -0.5")
    check("unsupported settle", base.settle(),
          abs(base.settle() + 0.4286) < 0.005, "-0.4286")

    for mode, target in ((2, 0.30), (3, 0.42)):
        db = hyb.max_safe_deadband(auto, mode, scen)
        t_cr = hyb.activation_time(auto, mode, scen, db)
        safe = hyb.simulate(
            auto, scen, hyb.Policy(deadband=db, deadband_mode=mode),
            dt=hyb.CHECK_DT).max_abs_dw() <= scen.limit
        check(f"mode-{mode} deadband", db,
              safe and abs(db - target) < 0.05, f"{target:.2f}")
        check(f"mode-{mode} switch instant", t_cr, safe,
              "simulation-safe")

    for mode, db in ((2, 0.30), (3, 0.42)):
        t_back = hyb.earliest_safe_return(auto, mode, scen, db)
        check(f"mode-{mode} earliest return", t_back,
              abs(t_back - 2.0) < 1.0, "~2 s")

    if not quick:
        t51 = hyb.latest_safe_switch(auto, 5, 1, scen, 0.30)
        t53 = hyb.latest_safe_switch(auto, 5, 3, scen, 0.30)
        check("5->1 binding deadline", t51, t51 > 15.2, "> 15.2 s")
        check("5->3 binding deadline", t53, t53 > 30.2, "> 30.2 s")
        peak_bad = hyb.simulate(
            auto, scen, hyb.Policy(deadband=0.30, deadband_mode=5,
                                   schedule=((22.0, 1),)),
            dt=hyb.CHECK_DT).max_abs_dw()
        check("direct 5->1 at 22 s peak", peak_bad, peak_bad > 0.5,
              "> 0.5 (unsafe)")
        peak_ok = hyb.simulate(
            auto, scen, hyb.Policy(deadband=0.30, deadband_mode=5,
                                   schedule=((22.0, 3), (40.0, 1))),
            dt=hyb.CHECK_DT).max_abs_dw()
        check("stepped 1-5-3-1 via 22 s peak", peak_ok, peak_ok <= 0.5,
              "<= 0.5 (safe)")

    worst = 0.0
    for mode in (2, 3, 4, 5):
        a = hyb.simulate(auto, hyb.Scenario(horizon=30.0),
                         hyb.Policy(schedule=((1.0, mode),)),
                         order="full", dt=hyb.CHECK_DT)
        b = hyb.simulate(auto, hyb.Scenario(horizon=30.0),
                         hyb.Policy(schedule=((1.0, mode),)),
                         order="reduced", dt=hyb.CHECK_DT)
        worst = max(worst, float(np.max(np.abs(a.x[:, 0] - b.x[:, 0]))))
    check("reduced-vs-full worst error", worst, worst <= 0.03, "<= 0.03 Hz")

    ok = all(c["ok"] for c in checks)
    path = pipe.write_json("reproduce.json",
                           {"pass": ok, "checks": checks})
    click.echo(f"{'PASS' if ok else 'FAIL'} "
               f"({sum(c['ok'] for c in checks)}/{len(checks)} checks), "
               f"wrote {path}")
    if not ok:
        sys.exit(1)


if __name__ == "__main__":
    main()
