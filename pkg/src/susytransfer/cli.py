"""Command line driver: spectrum, report, sweep, mc, det-trace, check."""
from __future__ import annotations

import argparse
import datetime
import math
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import analysis, dettransfer, sde, spectra
from .forms import BasisError, make_basis
from .geometry import GeometryError
from .operators import OperatorError, OperatorSet, nilpotency_residual, d_commutator_residual
from .scenario import Scenario, ScenarioError, load_scenario

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INVARIANT = 3
EXIT_NUMERICAL = 4
EXIT_CHECK = 5

_NUMERICAL = (spectra.SpectrumError, analysis.AmbiguousGapError, analysis.PoleError, analysis.DensityError,
              dettransfer.FlowError, dettransfer.NonHyperbolicError, sde.McError, np.linalg.LinAlgError)
_INPUT = (ScenarioError, BasisError, GeometryError, OperatorError)


@dataclass
class RunReport:
    """Sections of ``key = value`` lines; the timing section is excluded from comparisons."""

    sections: list = field(default_factory=list)
    ok: bool = True
    exit_code: int = EXIT_OK

    def add(self, title: str, lines) -> None:
        if isinstance(lines, str):
            lines = lines.splitlines()
        self.sections.append((title, list(lines)))

    def to_text(self) -> str:
        out = []
        for title, lines in self.sections:
            out.append(f"[{title}]")
            out += lines
            out.append("")
        return "\n".join(out)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, complex):
        return f"{v.real!r}{v.imag:+.17g}j"
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _kv(pairs) -> list:
    return [f"{k} = {_fmt(v)}" for k, v in pairs]


# pipeline pieces

def build_operators(sc: Scenario, T: float | None = None, refined: bool = False) -> OperatorSet:
    basis = make_basis(sc.manifold_object(refined))
    return OperatorSet(basis, sc.drift(), sc.noise(), sc.temperature if T is None else T)


def _hamiltonian(ops: OperatorSet, convention: str):
    return ops.H_strat if convention == "stratonovich" else ops.H_ito


def invariant_suite(ops: OperatorSet, spec: spectra.Spectrum | None = None) -> tuple[bool, list]:
    """d^2 = 0, [d, H_strat] = [d, H_ito] = 0 and conjugation closure."""
    d = ops.d
    d2 = nilpotency_residual(d)
    rows = [("d_squared_max_entry", float(d2))]
    ok = d2 == 0.0
    for name, h in (("strat", ops.H_strat), ("ito", ops.H_ito)):
        hn = h.norm()
        r = d_commutator_residual(d, h)
        rows.append((f"d_commutator_{name}_relative", float(r / hn) if hn else float(r)))
        ok &= r < 1e-12 * max(hn, 1e-300) or r == 0.0
    if spec is not None:
        conj = spectra.conjugation_pairing(spec)
        rel = conj.max_residual / max(spec.norm, 1e-300)
        rows.append(("conjugation_residual_relative", float(rel)))
        ok &= rel < 1e-8
    rows.append(("status", "pass" if ok else "fail"))
    return bool(ok), rows


def decompose(sc: Scenario, T: float | None = None, refined: bool = False, vectors: bool = True):
    ops = build_operators(sc, T, refined)
    tol = float(sc.solver.get("backward_tol", 1e-8))
    spec = spectra.eigendecompose(_hamiltonian(ops, sc.convention), want_vectors=vectors, tol=tol)
    return ops, spec


def _resolution(sc: Scenario, refined: bool) -> str:
    if sc.manifold == "line":
        return str(sc.grid_count * (2 if refined else 1))
    return str(sc.n_cut + (2 if refined else 0))


def converged_pair(sc: Scenario, T: float | None = None):
    """Coarse spectrum with per-eigenvalue convergence flags from the refined run."""
    ops, spec = decompose(sc, T)
    fine = None
    if sc.solver.get("refine", True):
        _, fine = decompose(sc, T, refined=True)
        spectra.mark_convergence(spec, fine, float(sc.solver.get("convergence_tol", 1e-6)))
    return ops, spec, fine


def _convergence_lines(sc: Scenario, spec, fine) -> tuple[list, dict]:
    key = "grid_count_pair" if sc.manifold == "line" else "n_cut_pair"
    if fine is None:
        return _kv([(key, _resolution(sc, False)), ("status", "unconverged")]), {}
    tol = float(sc.solver.get("convergence_tol", 1e-6))
    zc, zf = spectra.zero_modes(spec), spectra.zero_modes(fine)
    gd = analysis.ground_delta(spec, fine)
    label_c = analysis.classify(spec, sc.t_grid, zc).classification
    label_f = analysis.classify(fine, sc.t_grid, zf).classification
    flags = {
        "zero_modes": zc.counts == zf.counts,
        "ground_state": gd < tol,
        "classification": label_c == label_f,
    }
    nconv = sum(int(np.sum(spec.converged[k])) for k in spec.degrees)
    lines = _kv([
        (key, f"{_resolution(sc, False)},{_resolution(sc, True)}"),
        ("converged_eigenvalues", f"{nconv}/{spec.count()}"),
        ("ground_delta", gd),
        ("zero_mode_counts_fine", zf.counts),
        ("classification_fine", label_f),
        ("status", "converged" if all(flags.values()) else "unconverged"),
    ])
    return lines, flags


def _susy_lines(rep: analysis.SusyReport, flags: dict) -> list:
    claim_flag = {
        "witten_index": "zero_modes", "zero_mode_counts": "zero_modes", "gamma_g": "ground_state",
        "e_g": "ground_state", "classification": "classification", "eta_t_broken": "ground_state",
    }
    out = []
    for line in rep.to_text().splitlines():
        name = line.split(" = ")[0]
        out.append(line)
        flag = flags.get(claim_flag.get(name, ""), None) if flags else False
        if flag is None:
            flag = all(flags.values()) if flags else False
        out.append(f"{name}.converged = {_fmt(bool(flag))}")
    return out


# subcommands

def cmd_check(sc: Scenario, out: str, threads: int) -> RunReport:
    rep = RunReport()
    rep.add("scenario", sc.echo())
    ops = build_operators(sc)
    spec = spectra.eigendecompose(_hamiltonian(ops, sc.convention), want_vectors=False)
    ok, rows = invariant_suite(ops, spec)
    rep.add("invariants", _kv(rows))
    rep.ok = ok
    rep.exit_code = EXIT_OK if ok else EXIT_INVARIANT
    return rep


def cmd_spectrum(sc: Scenario, out: str, threads: int) -> RunReport:
    rep = RunReport()
    rep.add("scenario", sc.echo())
    ops, spec, fine = converged_pair(sc)
    ok, rows = invariant_suite(ops, spec)
    rep.add("invariants", _kv(rows))
    if not ok:
        rep.ok, rep.exit_code = False, EXIT_INVARIANT
        return rep
    zeros = spectra.zero_modes(spec, ops.d)
    spectra.write_eigenvalue_csv(spec, os.path.join(out, "eigenvalues.csv"), zeros)
    lines, _ = _convergence_lines(sc, spec, fine)
    rep.add("convergence", lines)
    rep.add("spectrum", _kv([("eigenvalue_csv", "eigenvalues.csv"), ("count", spec.count()),
                             ("norm", spec.norm), ("zero_mode_counts", zeros.counts),
                             ("zero_threshold", zeros.threshold)]))
    return rep


def cmd_report(sc: Scenario, out: str, threads: int) -> RunReport:
    rep = RunReport()
    rep.add("scenario", sc.echo())
    ops, spec, fine = converged_pair(sc)
    ok, rows = invariant_suite(ops, spec)
    zeros = spectra.zero_modes(spec, ops.d)
    bf = analysis.bf_pairing(spec, zeros=zeros)
    rows = rows[:-1] + [("bf_pairing_residual_relative", bf.max_residual / max(spec.norm, 1e-300)),
                        ("bf_unmatched", bf.unmatched),
                        ("zero_mode_right_closed_residual", zeros.right_closed_residual),
                        ("zero_mode_left_closed_residual", zeros.left_closed_residual)] + rows[-1:]
    rep.add("invariants", _kv(rows))
    if not ok:
        rep.ok, rep.exit_code = False, EXIT_INVARIANT
        return rep
    spectra.write_eigenvalue_csv(spec, os.path.join(out, "eigenvalues.csv"), zeros)
    lines, flags = _convergence_lines(sc, spec, fine)
    rep.add("convergence", lines)
    susy = analysis.classify(spec, sc.t_grid, zeros)
    rep.add("susy", _susy_lines(susy, flags))
    extra = [("eigenvalue_csv", "eigenvalues.csv")]
    if susy.witten_index is not None:
        extra += [(f"sharp_det_z{z}", complex(analysis.sharp_counting_determinants(spec, z, 1.0, bf)[0]))
                  for z in (0.25, 0.5, 0.75)]
    rep.add("derived", _kv(extra))
    return rep


def cmd_sweep(sc: Scenario, out: str, threads: int) -> RunReport:
    rep = RunReport()
    rep.add("scenario", sc.echo())

    def build(T):
        return decompose(sc, T)[1]

    refine = (lambda T: decompose(sc, T, refined=True)[1]) if sc.solver.get("refine", True) else None
    # invariant suite at the first temperature guards the whole sweep
    ops = build_operators(sc, sc.temperatures[0])
    ok, rows = invariant_suite(ops)
    rep.add("invariants", _kv(rows))
    if not ok:
        rep.ok, rep.exit_code = False, EXIT_INVARIANT
        return rep
    table = analysis.temperature_sweep(build, sc.temperatures, refine, float(sc.solver.get("convergence_tol", 1e-6)),
                                       sc.t_grid, workers=threads)
    with open(os.path.join(out, "sweep.csv"), "w") as fh:
        fh.write(table.to_csv())
    lines = []
    for r in table.rows:
        lines.append(f"T{r.temperature!r}.classification = {r.report.classification}")
        lines.append(f"T{r.temperature!r}.gamma_g = {r.report.gamma_g!r}")
        lines.append(f"T{r.temperature!r}.converged = {_fmt(r.converged)}")
        lines.append(f"T{r.temperature!r}.ground_delta = {r.ground_delta!r}")
    t_star = table.restoration_temperature()
    lines.append(f"restoration_temperature = {'none' if t_star is None else repr(t_star)}")
    lines.append("sweep_csv = sweep.csv")
    rep.add("sweep", lines)
    return rep


def _mc_preset(sc: Scenario):
    if sc.manifold == "torus" and sc.dim == 1:
        return sc.drift(), sc.noise()
    if sc.manifold == "line":
        return sc.drift(), sc.noise()
    raise ScenarioError("manifold: mc runs are supported on T^1 and the line")


def cmd_mc(sc: Scenario, out: str, threads: int) -> RunReport:
    rep = RunReport()
    rep.add("scenario", sc.echo())
    F, e = _mc_preset(sc)
    T = sc.temperature
    mc = sc.mc
    ops = build_operators(sc)
    dens = {}
    for conv, h in (("strat", ops.H_strat), ("ito", ops.H_ito)):
        dens[conv] = analysis.te_state_density(spectra.eigendecompose(h))
    burn = mc["burn_in_steps"] or math.ceil(10.0 / (T * mc["step"]))
    lines = []
    ok = True
    for i, integ in enumerate(mc["integrators"]):
        run = sde.McRun(integ, mc["step"], burn, mc["sample_steps"], sc.seed, mc["trajectories"],
                        thin=mc["thin"], bins=mc["bins"], gaussian=mc["gaussian"], chunk=mc["chunk"],
                        domain=sc.manifold, half_width=sc.half_width)
        hist = sde.integrate(run, F, e, T, workers=threads)
        name = "histogram.csv" if i == 0 else f"histogram_{integ}.csv"
        sde.write_histogram_csv(hist, os.path.join(out, name))
        ok &= abs(hist.integral() - 1.0) < 1e-9
        lines += [f"{integ}.{k} = {_fmt(v)}" for k, v in hist.metadata.items()]
        lines += [f"{integ}.histogram_csv = {name}",
                  f"{integ}.l1_vs_strat = {sde.compare_density(hist, dens['strat'])!r}",
                  f"{integ}.l1_vs_ito = {sde.compare_density(hist, dens['ito'])!r}"]
    rep.add("mc", lines)
    rep.ok = bool(ok)
    rep.exit_code = EXIT_OK if ok else EXIT_CHECK
    return rep


def _flow_for_det(sc: Scenario):
    if sc.manifold == "sphere":
        return dettransfer.SphereCharts()
    if sc.manifold != "torus" or sc.dim > 2:
        raise ScenarioError("manifold: det-trace supports T^1, T^2 and the sphere")
    return sc.drift()


def cmd_det_trace(sc: Scenario, out: str, threads: int) -> RunReport:
    rep = RunReport()
    rep.add("scenario", sc.echo())
    F = _flow_for_det(sc)
    det = sc.det
    dens = int(det["seed_grid_density"])
    lef = dettransfer.lefschetz_time_independence(F, det["t_list"], dens)
    t0 = float(det["t_list"][0])
    fps = dettransfer._fixed_points_for(F, t0, dens)
    w = dettransfer.weighted_trace(fps, "w", t0)
    dettransfer.write_fixed_point_csv(fps, w, os.path.join(out, "fixed_points.csv"))
    tz = float(det["z_time"])
    ztr = dettransfer.weighted_trace(dettransfer._fixed_points_for(F, tz, dens), "z", tz)
    locs = [(f"{fp.chart}:" if fp.chart else "") + " ".join(repr(float(x)) for x in fp.location) for fp in fps]
    lines = [f"fixed_points_t{t0!r} = " + ";".join(locs)]
    for t, v, c in zip(lef.t_list, lef.values, lef.fixed_point_counts):
        lines.append(f"lefschetz_t{float(t)!r} = {v}")
        lines.append(f"fixed_point_count_t{float(t)!r} = {c}")
    lines += [f"lefschetz_constant = {_fmt(lef.constant)}", f"z_trace_t{tz!r} = {ztr.value!r}",
              "fixed_points_csv = fixed_points.csv"]
    rep.add("det_trace", lines)
    rep.ok = lef.constant
    rep.exit_code = EXIT_OK if lef.constant else EXIT_CHECK
    return rep


COMMANDS = {
    "spectrum": cmd_spectrum,
    "report": cmd_report,
    "sweep": cmd_sweep,
    "mc": cmd_mc,
    "det-trace": cmd_det_trace,
    "check": cmd_check,
}


def run(command: str, sc: Scenario, out: str, threads: int = 1) -> RunReport:
    """Run one subcommand, write report.txt and return the report (with exit code)."""
    os.makedirs(out, exist_ok=True)
    start = time.perf_counter()
    try:
        rep = COMMANDS[command](sc, out, threads)
    except _INPUT as exc:
        rep = RunReport(ok=False, exit_code=EXIT_USAGE)
        rep.add("error", [f"module = {type(exc).__module__.split('.')[-1]}", f"message = {exc}"])
    except _NUMERICAL as exc:
        rep = RunReport(ok=False, exit_code=EXIT_NUMERICAL)
        rep.add("error", [f"module = {type(exc).__module__.split('.')[-1]}", f"type = {type(exc).__name__}",
                          f"message = {exc}"])
    rep.add("timing", [f"timestamp = {datetime.datetime.now(datetime.timezone.utc).isoformat()}",
                       f"elapsed_s = {time.perf_counter() - start:.3f}"])
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(rep.to_text())
    return rep


def strip_timing(text: str) -> str:
    """Report text without the timing section (for determinism comparisons)."""
    return text.split("[timing]")[0]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="susytransfer", description=__doc__)
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--scenario", required=True, help="TOML scenario file")
    ap.add_argument("--out", default=".", help="output directory")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--seed", type=int, default=None, help="overrides the scenario seed (u64)")
    args = ap.parse_args(argv)
    try:
        sc = load_scenario(args.scenario)
    except (OSError, ScenarioError) as exc:
        print(f"scenario: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            print("scenario: --seed must be an unsigned 64-bit integer", file=sys.stderr)
            return EXIT_USAGE
        sc.seed = args.seed
    if args.threads < 1:
        print("--threads must be positive", file=sys.stderr)
        return EXIT_USAGE
    rep = run(args.command, sc, args.out, args.threads)
    print(rep.to_text())
    return rep.exit_code


if __name__ == "__main__":
    sys.exit(main())
