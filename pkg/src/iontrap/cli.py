"""Command-line entry point: ``iontrap <command> --config run.json``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import plotting
from .electrode_field import (NotATrapError, SearchError, SecularTriple, TrapPotential, find_minimum, secular_frequencies,
                              stability_q, trap_depth)
from .gate_engine import (DriftModel, GateConfig, GateInfeasibleError, ThermalState, detuning_sweep,
                          fidelity, lamb_dicke, save_pulse, solve_pulse, sweep_grid)
from .io import header_line, read_json, run_metadata, write_json
from .ion_dynamics import (IntegrationError, IonLossError, NearCollisionError, HarmonicForces, PseudoForces, SimConfig,
                           Trajectory, default_damping, load_equilibrium, minimize_energy, run_equilibrium, save_equilibrium)
from .layout import ConfigError, Role, TrapLayout, example_layout
from .normal_modes import (ModeSpectrum, UnstableCrystalError, assemble_hessian, axis_spectrum, detect_segments,
                           dominant_modes, interaction_matrix, relax_crystal, save_spectrum, site_triple)
from .species import Species, load_species
from .voltage_optimizer import (DEFAULT_BOUNDS, InfeasibleVoltageError, LayoutModel, OptimizeConfig,
                                TargetSpectrum, depth_check, linear_start, optimize, save_run)

logger = logging.getLogger("iontrap")

EXIT_OK, EXIT_CONFIG, EXIT_ION_LOSS, EXIT_UNSTABLE, EXIT_OPTIMIZER, EXIT_GATE = 0, 2, 3, 4, 5, 6

BUILTIN_LAYOUTS = {
    "example-ca": lambda: example_layout(),
    "example-be": lambda: example_layout(v_rf=85.0, omega_rf=2 * np.pi * 240e6),
    "empty": lambda: TrapLayout([], None, "empty"),
}


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


@dataclass
class RunContext:
    cfg: dict
    base: Path
    out: Path
    seed: int
    threads: int
    meta: dict

    def path(self, value) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base / p

    def block(self, name: str) -> dict:
        b = self.cfg.get(name, {})
        if not isinstance(b, dict):
            raise ConfigError(f"'{name}' must be an object")
        return b

    def layout(self) -> TrapLayout:
        ref = self.cfg.get("layout", "builtin:example-ca")
        if isinstance(ref, dict):
            return TrapLayout.from_dict(ref)
        if isinstance(ref, str) and ref.startswith("builtin:"):
            name = ref.split(":", 1)[1]
            if name not in BUILTIN_LAYOUTS:
                raise ConfigError(f"unknown builtin layout {name!r}")
            return BUILTIN_LAYOUTS[name]()
        data, _ = read_json(self.path(ref))
        return TrapLayout.from_dict(data)

    def species(self, ref=None) -> Species:
        ref = ref if ref is not None else self.cfg.get("species", "ca40")
        if isinstance(ref, dict):
            return Species.from_dict(ref)
        try:
            return load_species(ref)
        except OSError:
            pass
        try:
            return load_species(self.path(ref))
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"bad species {ref!r}: {exc}") from exc

    def dc(self, layout: TrapLayout):
        ref = self.cfg.get("dc_voltages")
        if ref is None:
            return layout.dc_vector(None)
        if isinstance(ref, str):
            ref, _ = read_json(self.path(ref))
            ref = ref.get("voltages_by_id", ref) if isinstance(ref, dict) else ref
        return layout.dc_vector(ref)

    def csv_header(self) -> str:
        return header_line(self.meta)


def _well_guesses(layout: TrapLayout, height: float) -> list[np.ndarray]:
    centres = [e.center for e in layout.electrodes if e.role == Role.DC_CENTRAL]
    return [np.array([c[0], c[1], height]) for c in sorted(centres, key=lambda c: (c[0], c[1]))]


def _ions(ctx: RunContext, layout: TrapLayout, block: dict):
    """Species and initial positions for the ions listed in ``block['wells']``."""
    height = float(block.get("height_m", ctx.cfg.get("height_m", 20e-6)))
    guesses = _well_guesses(layout, height)
    wells = block.get("wells", ctx.cfg.get("wells"))
    if wells is None:
        wells = list(range(len(guesses)))
    per_well = int(block.get("ions_per_well", 1))
    sp = ctx.species(block.get("species"))
    spacing = float(block.get("intra_well_spacing_m", 1.5e-6))
    pos, species = [], []
    for w in wells:
        if not 0 <= int(w) < len(guesses):
            raise ConfigError(f"well index {w} out of range (0..{len(guesses) - 1})")
        for k in range(per_well):
            p = guesses[int(w)].copy()
            p[0] += (k - (per_well - 1) / 2) * spacing
            pos.append(p)
            species.append(sp)
    return species, np.array(pos)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_trap_show(ctx: RunContext) -> int:
    layout = ctx.layout()
    sp = ctx.species()
    dc = ctx.dc(layout)
    block = ctx.block("trap_show")
    height = float(block.get("height_m", ctx.cfg.get("height_m", 20e-6)))
    rows, minima = [], []
    if layout.rf_electrodes:
        field = TrapPotential(layout, sp, dc)
        for g in _well_guesses(layout, height):
            try:
                m = find_minimum(field, g)
            except (SearchError, NotATrapError) as exc:
                logger.info("no minimum near %s: %s", g, exc)
                continue
            if any(np.linalg.norm(m.point - q) < 1e-6 for q in minima):
                continue
            minima.append(m.point)
        for k, p in enumerate(minima):
            m = find_minimum(field, p)
            sec = secular_frequencies(field, m, sp, m.hessian)
            nb = [q for j, q in enumerate(minima) if j != k]
            neighbor = min(nb, key=lambda q: np.linalg.norm(q - p)) if nb else None
            depth = trap_depth(field, m, neighbor=neighbor)
            q, stable = stability_q(float(sec.omega.max()), field.drive)
            rows.append([k, *p, *sec.freq_hz, depth.depth_mev, q, int(stable)])
    with open(ctx.out / "wells.csv", "w", newline="") as f:
        f.write(f"# {ctx.csv_header()}\n")
        w = csv.writer(f)
        w.writerow(["well", "x_m", "y_m", "z_m", "fx_hz", "fy_hz", "fz_hz", "depth_mev", "q", "stable"])
        for r in rows:
            w.writerow([r[0], *(repr(float(v)) for v in r[1:-1]), r[-1]])
    summary = {"meta": ctx.meta, "n_wells": len(rows),
               "wells": [{"x_m": r[1], "y_m": r[2], "z_m": r[3], "freq_hz": r[4:7], "depth_mev": r[7],
                          "q": r[8], "stable": bool(r[9])} for r in rows]}
    if layout.rf_electrodes:
        _potential_slice(ctx, layout, sp, dc, block, minima)
    write_json(ctx.out / "trap_show.json", summary)
    print(f"{len(rows)} wells")
    for r in rows:
        print(f"well {r[0]}: z={r[3] * 1e6:.2f} um f=({r[4] / 1e6:.3f}, {r[5] / 1e6:.3f}, {r[6] / 1e6:.3f}) MHz "
              f"depth={r[7]:.1f} meV q={r[8]:.3f}")
    return EXIT_OK


def _potential_slice(ctx, layout, sp, dc, block, minima):
    xs = [c for e in layout.electrodes for c in (e.corner_a[0], e.corner_b[0])]
    nx, nz = int(block.get("nx", 121)), int(block.get("nz", 41))
    x = np.linspace(block.get("x_min_m", min(xs)), block.get("x_max_m", max(xs)), nx)
    z = np.linspace(block.get("z_min_m", 5e-6), block.get("z_max_m", 60e-6), nz)
    field = TrapPotential(layout, sp, dc)
    grid = np.stack(np.meshgrid(x, z), axis=-1)
    pts = np.concatenate([grid, np.zeros(grid.shape[:-1] + (1,))], axis=-1)[..., [0, 2, 1]]
    vals = sp.charge_number * field.potential(pts) * 1e3  # meV
    with open(ctx.out / "potential_xz.csv", "w", newline="") as f:
        f.write(f"# {ctx.csv_header()}\n")
        w = csv.writer(f)
        w.writerow(["x_m", "z_m", "potential_mev"])
        for j in range(nz):
            for i in range(nx):
                w.writerow([repr(float(x[i])), repr(float(z[j])), repr(float(vals[j, i]))])
    plotting.potential_map(x, z, np.minimum(vals, np.percentile(vals, 90)), ctx.out / "potential_xz.svg",
                           minima, ctx.meta, "potential (meV)")


def cmd_simulate(ctx: RunContext) -> int:
    layout = ctx.layout()
    block = ctx.block("sim")
    species, pos = _ions(ctx, layout, block)
    if layout.drive is None:
        raise ConfigError("simulation needs an RF drive")
    period = 2 * np.pi / layout.drive.omega_rf
    dt = float(block.get("dt_s", period / 20))
    slow = float(block.get("damping_reference_hz", 5e6)) * 2 * np.pi
    gamma = block.get("damping_kg_per_s", [default_damping(s.mass, slow) for s in species])
    cfg = SimConfig(dt=dt, n_steps=int(block.get("n_steps", 4000)), damping=gamma,
                    temperature=float(block.get("temperature_k", 0.5e-3)),
                    noise_amplitude=block.get("noise_amplitude"), rng_seed=ctx.seed,
                    record_every=int(block.get("record_every", 20)),
                    bounding_box=float(block.get("bounding_box_m", 1e-3)))
    offset = np.asarray(block.get("initial_offset_m", [0.2e-6, 0.0, 0.2e-6]))
    res = run_equilibrium(layout, None, ctx.dc(layout), species, pos + offset, cfg,
                          average_periods=int(block.get("average_periods", 20)))
    traj = res.trajectory
    stride = max(1, int(block.get("record_every", 20)))
    Trajectory(traj.times[::stride], traj.positions[::stride], traj.velocities[::stride]).to_csv(
        ctx.out / "trajectory.csv", ctx.csv_header())
    save_equilibrium(res.positions, ctx.out / "equilibrium.json", ctx.meta)
    summary = {"meta": ctx.meta, "height_spread": res.height_spread, "residual_amplitude_m": res.residual_amplitude,
               "mean_height_m": float(res.positions[:, 2].mean())}
    write_json(ctx.out / "simulate.json", summary)
    plotting.trajectory_plot(traj.times[::stride], traj.positions[::stride], ctx.out / "trajectory.svg", ctx.meta)
    print(f"equilibrium of {len(species)} ions: height spread {res.height_spread:.3e}, "
          f"residual {res.residual_amplitude:.2e} m")
    return EXIT_OK


def cmd_modes(ctx: RunContext) -> int:
    layout = ctx.layout()
    block = ctx.block("modes")
    species, pos = _ions(ctx, layout, block)
    dc = ctx.dc(layout)
    if block.get("equilibrium"):
        pos = load_equilibrium(ctx.path(block["equilibrium"]))
        if len(pos) != len(species):
            raise ConfigError("equilibrium file does not match the ion list")
        model = PseudoForces(layout, species, dc)
        sites = [site_triple(model.field(i), pos[i], s) for i, s in enumerate(species)]
    else:
        cr = relax_crystal(layout, species, pos, dc)
        pos, sites = cr.positions, cr.sites
    ch = assemble_hessian(sites, pos, species)
    axes = block.get("axes", ["x", "y", "z"])
    threshold = float(block.get("segment_threshold", 1e-4))
    report = {"meta": ctx.meta, "cross_axis_ratio": ch.cross_ratio, "decoupled": ch.decoupled, "axes": {}}
    for a in axes:
        spec = axis_spectrum(ch, a)
        save_spectrum(spec, ctx.out / f"spectrum_{a}.json", ctx.meta)
        im = interaction_matrix(spec)
        offsets = spec.freq_hz - spec.freq_hz.max()
        plotting.interaction_heatmap(im, offsets, ctx.out / f"interaction_{a}.svg", ctx.meta, f"{a} modes")
        seg = detect_segments(spec, threshold)
        report["axes"][a] = {"frequencies_hz": spec.freq_hz.tolist(), **seg.to_dict()}
        print(f"{a}: {len(spec.omega)} modes {spec.freq_hz.min() / 1e6:.4f}-{spec.freq_hz.max() / 1e6:.4f} MHz, "
              f"{len(seg.segments)} segment(s)")
    write_json(ctx.out / "modes.json", report)
    return EXIT_OK


def cmd_optimize(ctx: RunContext) -> int:
    layout = ctx.layout()
    block = ctx.block("optimize")
    if "targets" not in block:
        raise ConfigError("optimize block needs 'targets'")
    sp = ctx.species(block.get("species"))
    height = float(block.get("height_m", ctx.cfg.get("height_m", 20e-6)))
    guesses = _well_guesses(layout, height)
    t = block["targets"]
    sites = [int(w) for w in t["wells"]]
    free_ids = block.get("free_electrodes", [layout.dc_ids[i] for i in layout.dc_index(Role.DC_CENTRAL)])
    try:
        free = np.array([layout.dc_ids.index(e) for e in free_ids])
    except ValueError as exc:
        raise ConfigError(f"unknown electrode in free_electrodes: {exc}") from exc
    base = ctx.dc(layout)
    model = LayoutModel(layout, sp, [guesses[w] for w in sites], free=free, base=base)
    bounds = {**DEFAULT_BOUNDS}
    for role, lim in block.get("bounds", {}).items():
        bounds[Role(role)] = tuple(lim)
    lo = np.array([bounds[layout.dc_electrodes[i].role][0] for i in free])
    hi = np.array([bounds[layout.dc_electrodes[i].role][1] for i in free])
    axis = t.get("axis", "z")
    v0 = base[free].copy()
    if "initial" in block:
        init = block["initial"]
        v0 = np.array([init.get(e, v0[k]) for k, e in enumerate(free_ids)]) if isinstance(init, dict) else np.asarray(init, float)
    try:
        f0 = model.site_frequencies(v0)
        ax = TargetSpectrum(np.ones(len(sites)), axis).axis_indices()
        current = f0[np.arange(len(sites)), ax]
        if "target_hz" in t:
            tgt = 2 * np.pi * np.broadcast_to(np.asarray(t["target_hz"], dtype=float), (len(sites),))
        else:
            tgt = np.full(len(sites), current.min() * float(t.get("common_scale", 0.995)))
        targets = TargetSpectrum(tgt, axis, np.asarray(t["weights"], float) if "weights" in t else None)
        if block.get("linear_start", False):
            v0 = linear_start(targets, model, v0, lower=lo, upper=hi)
        c = block.get("adam", {})
        cfg = OptimizeConfig(lr=float(c.get("lr", 0.05)), beta1=float(c.get("beta1", 0.9)),
                             beta2=float(c.get("beta2", 0.999)), eps=float(c.get("eps", 1e-8)),
                             max_iter=int(block.get("max_iter", 500)), tol_hz=float(block.get("tol_hz", 10.0)),
                             plateau_patience=c.get("plateau_patience"))
        res = optimize(targets, v0, model, cfg, lo, hi,
                       progress=lambda i, f, e: print(f"{i}, {f:.6e}, {e:.3f}", flush=True))
    except InfeasibleVoltageError as exc:
        raise CliError(EXIT_OPTIMIZER, f"infeasible voltages: {exc}") from exc
    full = model.full_vector(res.voltages)
    depths = depth_check(layout, sp, full, model.minima(), cfg.min_depth_mev)
    res.flags["depth_mev"] = [d for d, _ in depths]
    res.flags["depth_ok"] = all(ok for _, ok in depths)
    save_run(res, ctx.out / "optimize.json", [layout.dc_ids[i] for i in free], ctx.meta)
    write_json(ctx.out / "voltages.json", {"meta": ctx.meta, "voltages_by_id": dict(zip(layout.dc_ids, full.tolist()))})
    plotting.loss_curve(res.loss_history, ctx.out / "loss.svg", ctx.meta)
    print(f"final max site error {res.max_error_hz:.3f} Hz, flags {res.flags}")
    if not res.converged:
        raise CliError(EXIT_OPTIMIZER, "optimizer stopped without convergence (best-so-far written)")
    return EXIT_OK


def _gate_inputs(ctx: RunContext, block: dict):
    sp = ctx.species(block.get("species", "be9"))
    if "spectrum" in block:
        data, _ = read_json(ctx.path(block["spectrum"]))
        spectrum = ModeSpectrum.from_dict(data)
    else:
        chain = block.get("chain")
        if not chain:
            raise ConfigError("gate block needs 'spectrum' or 'chain'")
        spectrum = synthetic_chain_spectrum(sp, [float(f) for f in chain["site_freqs_hz"]],
                                            float(chain.get("spacing_m", 28e-6)),
                                            [float(f) for f in chain.get("radial_hz", [38e6, 60e6])])
    pair = tuple(int(i) for i in block.get("pair", [0, 1]))
    cfg = GateConfig(pair, 2 * np.pi * float(block.get("mu_hz", 0.0)) if "mu_hz" in block else 0.0,
                     float(block.get("t_g_s", 200e-6)), int(block.get("n_segments", 5)),
                     rabi_cap=2 * np.pi * float(block.get("rabi_cap_hz", 0.25e6)))
    modes = block.get("segment_modes")
    modes = np.asarray(modes, int) if modes is not None else dominant_modes(spectrum, pair)
    eta_all = lamb_dicke(spectrum, sp, cfg)
    segment = spectrum.subset(modes)
    thermal = ThermalState(float(block.get("n_bar_c", 0.0)), float(segment.omega.min()))
    drift = DriftModel(float(block.get("drift_rate", 0.0)), block.get("drift_unit", "hz_per_min"))
    return spectrum, segment, eta_all, eta_all[:, modes], cfg, thermal, drift


def synthetic_chain_spectrum(sp: Species, site_freqs_hz, spacing: float, radial_hz):
    """Axial spectrum of one ion per harmonic well, wells ``spacing`` apart on x."""
    n = len(site_freqs_hz)
    centers = np.array([[k * spacing, 0.0, 0.0] for k in range(n)])
    om = 2 * np.pi * np.array([[f, *radial_hz] for f in site_freqs_hz])
    model = HarmonicForces([sp] * n, om, centers)
    pos = minimize_energy(model, centers, length_scale=1e-8)
    sites = [SecularTriple(o, np.eye(3), p) for o, p in zip(om, pos)]
    return axis_spectrum(assemble_hessian(sites, pos, [sp] * n), "x")


def cmd_gate(ctx: RunContext, action: str) -> int:
    block = ctx.block("gate")
    spectrum, segment, eta_all, eta_seg, cfg, thermal, drift = _gate_inputs(ctx, block)
    if action == "solve":
        if "mu_hz" not in block:
            raise ConfigError("gate solve needs mu_hz")
        try:
            pulse = solve_pulse(cfg, segment, eta_seg)
        except GateInfeasibleError as exc:
            raise CliError(EXIT_GATE, str(exc)) from exc
        fr = fidelity(pulse, cfg, spectrum, eta_all, thermal, drift)
        save_pulse(pulse, ctx.out / "pulse.json", {**ctx.meta, "infidelity": fr.infidelity})
        plotting.rabi_heatmap([pulse.mu / (2 * np.pi)], pulse.omega_s / (2 * np.pi), ctx.out / "rabi.svg", ctx.meta)
        print(f"max Rabi {pulse.max_rabi / (2 * np.pi) / 1e3:.2f} kHz, chi={pulse.chi:.12f}, "
              f"infidelity {fr.infidelity:.3e}")
        if not pulse.cap_ok:
            raise CliError(EXIT_GATE, "Rabi cap exceeded")
        return EXIT_OK
    sw = block.get("sweep", {})
    try:
        mus = sweep_grid(float(sw["start_hz"]), float(sw["stop_hz"]), float(sw.get("step_hz", 2.0)))
    except KeyError as exc:
        raise ConfigError(f"sweep needs {exc}") from exc
    fixed = None
    if "reuse_pulse_at_hz" in sw:
        try:
            fixed = solve_pulse(cfg.with_mu(2 * np.pi * float(sw["reuse_pulse_at_hz"])), segment, eta_seg).omega_s
        except GateInfeasibleError as exc:
            raise CliError(EXIT_GATE, f"reference pulse: {exc}") from exc
    res = detuning_sweep(mus, cfg, segment, eta_seg, spectrum, eta_all, thermal, drift,
                         workers=ctx.threads, fixed_pulse=fixed)
    res.to_csv(ctx.out / "sweep.csv", ctx.csv_header())
    plotting.infidelity_curve(mus / (2 * np.pi), res.infidelity, ctx.out / "sweep.svg", ctx.meta,
                              label=f"n_c={thermal.n_bar_c:g}")
    print(f"{len(mus)} detunings, {int(res.feasible.sum())} feasible, worst infidelity {res.worst():.3e}")
    if not res.feasible.any():
        raise CliError(EXIT_GATE, "no feasible detuning in the sweep")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iontrap", description="Multi-well surface ion trap toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("trap-show", "simulate", "modes", "optimize", "gate"):
        sp = sub.add_parser(name)
        if name == "gate":
            sp.add_argument("action", choices=["solve", "sweep"])
        sp.add_argument("--config", required=True)
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, default=1)
    return p


def _setup_logging():
    level = os.environ.get("IONTRAP_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg, raw = read_json(args.config)
        if not isinstance(cfg, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        base = Path(args.config).resolve().parent
        out = Path(args.out) if args.out else base / cfg.get("out", "out")
        out.mkdir(parents=True, exist_ok=True)
        ctx = RunContext(cfg, base, out, seed, max(1, args.threads), run_metadata(raw, seed))
        if args.command == "trap-show":
            return cmd_trap_show(ctx)
        if args.command == "simulate":
            return cmd_simulate(ctx)
        if args.command == "modes":
            return cmd_modes(ctx)
        if args.command == "optimize":
            return cmd_optimize(ctx)
        return cmd_gate(ctx, args.action)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IonLossError, NearCollisionError, IntegrationError) as exc:
        print(f"ion loss: {exc}", file=sys.stderr)
        return EXIT_ION_LOSS
    except UnstableCrystalError as exc:
        print(f"unstable crystal: {exc}; imaginary modes: {exc.eigenvalues}", file=sys.stderr)
        return EXIT_UNSTABLE
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
