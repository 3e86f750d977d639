"""Configuration-driven benchmark runner.

A JSON config describes one experiment grid: a plant, a controller list,
iteration/seed counts, and output options. ``run`` executes every
(controller, seed) cell through the ILC loop (optionally in a process
pool), writing one records CSV per cell, trajectory snapshots, the
reference path, a summary JSON, and a manifest with the fully resolved
configuration. Error columns are bit-reproducible given (config, seed);
timing columns are wall-clock measurements and are not.
"""

from __future__ import annotations

import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import jsonschema
from threadpoolctl import threadpool_limits

from .errors import ConfigError
from .ilc_core import ControllerSpec, ExperimentRecord, GainSchedule, RolloutAborted, run_ilc_loop
from .kernels import KernelFamily
from .sim_envs import (
    DisturbanceSpec,
    ManipConfig,
    ManipulatorPlant,
    VehicleConfig,
    VehiclePlant,
)

SCHEMA_VERSION = 1
CSV_HEADER = "controller,seed,iteration,rms_error,max_error,predict_s,estimate_s,rollout_s,cumulative_s"

_GAINS_SCHEMA = {
    "type": "object",
    "properties": {
        "base_L": {"type": "number", "minimum": 0},
        "base_K": {"type": "number", "minimum": 0},
        "mode": {"enum": ["constant", "inverse_iteration"]},
    },
    "required": ["base_L"],
    "additionalProperties": False,
}

_CONTROLLER_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["standard", "qpgp_block", "qpgp_element", "gp_full", "gp_sparse"]},
        "name": {"type": "string"},
        "gains": _GAINS_SCHEMA,
        "kernel_mode": {"enum": ["general", "parametric:rbf", "parametric:periodic"]},
        "kernel_floor_scale": {"type": "number", "exclusiveMinimum": 0},
        "online_gain": {"type": ["number", "null"]},
        "num_inducing": {"type": "integer", "minimum": 1},
        "sparse_refit_every": {"type": "integer", "minimum": 1},
        "sparse_refine_iterations": {"type": "integer", "minimum": 0},
        "sparse_placement_window": {"type": ["integer", "null"], "minimum": 1},
        "gp_kernel": {
            "type": "object",
            "properties": {
                "variance": {"type": "number", "exclusiveMinimum": 0},
                "lengthscales": {
                    "type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                    "minItems": 1, "maxItems": 2,
                },
            },
            "required": ["variance", "lengthscales"],
            "additionalProperties": False,
        },
        "gp_noise_variance": {"type": "number", "exclusiveMinimum": 0},
    },
    "required": ["kind", "gains"],
    "additionalProperties": False,
}

_VEHICLE_OVERRIDES = {
    "type": "object",
    "properties": {
        name: {"type": "number"}
        for name in (
            "speed", "wheelbase", "dt", "steering_gain", "bias", "drift_slope",
            "noise_variance", "heading_drift", "saturation", "correction_damping",
        )
    } | {"lookahead_steps": {"type": "integer", "minimum": 1}},
    "additionalProperties": False,
}

_MANIP_OVERRIDES = {
    "type": "object",
    "properties": {
        "lengths": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        "center": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        "radius": {"type": "number", "exclusiveMinimum": 0},
        "noise_sds": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 3, "maxItems": 3},
        "bias_scale": {"type": "number"},
    },
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "plant": {"enum": ["vehicle", "manipulator"]},
        "iterations": {"type": "integer", "minimum": 2},
        "samples_per_iteration": {"type": "integer", "minimum": 3},
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "controllers": {"type": "array", "items": _CONTROLLER_SCHEMA, "minItems": 1},
        "plant_overrides": {"type": "object"},
        "disturbance": {
            "type": "object",
            "properties": {
                "iteration": {"type": "integer", "minimum": 1},
                "offsets": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
            },
            "required": ["iteration"],
            "additionalProperties": False,
        },
        "trajectory_iterations": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "output_dir": {"type": "string"},
    },
    "required": ["plant", "iterations", "samples_per_iteration", "seeds", "controllers"],
    "additionalProperties": False,
}


@dataclass
class ExperimentConfig:
    """Validated experiment description (see CONFIG_SCHEMA)."""

    raw: dict = field(repr=False)

    def __post_init__(self):
        try:
            jsonschema.validate(self.raw, CONFIG_SCHEMA)
            overrides = self.raw.get("plant_overrides", {})
            sub = _VEHICLE_OVERRIDES if self.raw["plant"] == "vehicle" else _MANIP_OVERRIDES
            jsonschema.validate(overrides, sub)
        except jsonschema.ValidationError as exc:
            raise ConfigError(f"invalid config: {exc.message}") from exc
        if self.raw["plant"] == "vehicle" and "disturbance" in self.raw:
            raise ConfigError("disturbance injection is a manipulator feature")
        names = [c.get("name", c["kind"]) for c in self.raw["controllers"]]
        if len(set(names)) != len(names):
            raise ConfigError("controller names must be unique; set 'name' explicitly")

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls(raw=raw)

    @property
    def plant_name(self) -> str:
        return self.raw["plant"]

    @property
    def iterations(self) -> int:
        return self.raw["iterations"]

    @property
    def seeds(self) -> list[int]:
        return list(self.raw["seeds"])

    @property
    def controller_names(self) -> list[str]:
        return [c.get("name", c["kind"]) for c in self.raw["controllers"]]

    @property
    def trajectory_iterations(self) -> list[int]:
        n = self.iterations
        default = sorted({1, (n + 1) // 2, n})
        out = self.raw.get("trajectory_iterations", default)
        return [i for i in out if i <= n]

    def resolved(self) -> dict:
        """Full configuration with defaults materialized (for the manifest)."""
        plant = self.build_plant()
        out = {
            "schema_version": SCHEMA_VERSION,
            "plant": self.plant_name,
            "iterations": self.iterations,
            "samples_per_iteration": self.raw["samples_per_iteration"],
            "seeds": self.seeds,
            "plant_config": asdict(plant.config),
            "trajectory_iterations": self.trajectory_iterations,
            "controllers": [],
        }
        if self.plant_name == "manipulator" and plant.config.disturbance is not None:
            out["plant_config"]["disturbance"] = {
                "iteration": plant.config.disturbance.iteration,
                "offsets": list(plant.config.disturbance.offsets),
            }
        for spec in self.build_controller_specs():
            entry = {
                "name": spec.name,
                "kind": spec.kind,
                "gains": {
                    "base_L": spec.gains.base_L,
                    "base_K": spec.gains.base_K,
                    "mode": spec.gains.mode,
                },
            }
            if spec.kind in ("qpgp_block", "qpgp_element"):
                entry["kernel_mode"] = spec.kernel_mode
                entry["kernel_floor_scale"] = spec.kernel_floor_scale
            if spec.kind == "qpgp_element":
                entry["online_gain"] = spec.online_gain
            if spec.kind in ("gp_full", "gp_sparse"):
                kernel = spec.gp_kernel or KernelFamily(kind="rbf", variance=1.0, params=(2.0, 5.0))
                entry["gp_kernel"] = {
                    "variance": kernel.variance,
                    "lengthscales": list(kernel.params),
                }
                entry["gp_noise_variance"] = spec.gp_noise_variance
            if spec.kind == "gp_sparse":
                entry["num_inducing"] = spec.num_inducing
                entry["sparse_refit_every"] = spec.sparse_refit_every
                entry["sparse_refine_iterations"] = spec.sparse_refine_iterations
                entry["sparse_placement_window"] = spec.sparse_placement_window
            out["controllers"].append(entry)
        return out

    def build_plant(self):
        p = self.raw["samples_per_iteration"]
        overrides = dict(self.raw.get("plant_overrides", {}))
        if self.plant_name == "vehicle":
            if "lookahead_steps" in overrides:
                overrides["lookahead_steps"] = int(overrides["lookahead_steps"])
            return VehiclePlant(VehicleConfig(p=p, **overrides))
        for key in ("lengths", "center", "noise_sds"):
            if key in overrides:
                overrides[key] = tuple(overrides[key])
        disturbance = None
        if "disturbance" in self.raw:
            d = self.raw["disturbance"]
            disturbance = DisturbanceSpec(
                iteration=d["iteration"],
                offsets=tuple(d.get("offsets", (0.1, -0.1, 0.05))),
            )
        return ManipulatorPlant(ManipConfig(p=p, disturbance=disturbance, **overrides))

    def build_controller_specs(self) -> list[ControllerSpec]:
        specs = []
        for c in self.raw["controllers"]:
            gains = GainSchedule(
                base_L=c["gains"]["base_L"],
                base_K=c["gains"].get("base_K", 0.0),
                mode=c["gains"].get("mode", "constant"),
            )
            kwargs = {}
            if "gp_kernel" in c:
                gk = c["gp_kernel"]
                kwargs["gp_kernel"] = KernelFamily(
                    kind="rbf", variance=gk["variance"], params=tuple(gk["lengthscales"])
                )
            for key in (
                "name", "kernel_mode", "kernel_floor_scale", "online_gain",
                "num_inducing", "sparse_refit_every", "sparse_refine_iterations",
                "sparse_placement_window", "gp_noise_variance",
            ):
                if key in c:
                    kwargs[key] = c[key]
            specs.append(ControllerSpec(kind=c["kind"], gains=gains, **kwargs))
        return specs


def _format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_records_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        writer = csv.writer(fh)
        for rec in records:
            writer.writerow([_format_value(v) for v in rec.row()])


def read_records_csv(path) -> list[ExperimentRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = CSV_HEADER.split(",")
        if reader.fieldnames != expected:
            raise ConfigError(f"unexpected CSV header in {path}")
        for row in reader:
            out.append(
                ExperimentRecord(
                    controller=row["controller"],
                    seed=int(row["seed"]),
                    iteration=int(row["iteration"]),
                    rms_error=float(row["rms_error"]),
                    max_error=float(row["max_error"]),
                    predict_s=float(row["predict_s"]),
                    estimate_s=float(row["estimate_s"]),
                    rollout_s=float(row["rollout_s"]),
                    cumulative_s=float(row["cumulative_s"]),
                )
            )
    return out


def _cell_filename(controller: str, seed: int) -> str:
    return f"records_{controller}_s{seed}.csv"


def _run_cell(payload: dict) -> dict:
    """Worker: execute one (controller, seed) cell and write its CSV."""
    config = ExperimentConfig(raw=payload["config"])
    out_dir = Path(payload["out_dir"])
    idx, seed = payload["controller_index"], payload["seed"]
    spec = config.build_controller_specs()[idx]
    with threadpool_limits(limits=payload.get("blas_threads", 1)):
        plant = config.build_plant()
        result = {"controller": spec.name, "seed": seed, "status": "ok"}
        try:
            rollouts, records = run_ilc_loop(plant, spec, config.iterations, seed)
        except RolloutAborted as exc:
            write_records_csv(out_dir / _cell_filename(spec.name, seed), exc.records)
            return {**result, "status": "aborted", "message": str(exc)}
        write_records_csv(out_dir / _cell_filename(spec.name, seed), records)
        traj_files = []
        for it in config.trajectory_iterations:
            ro = rollouts[it - 1]
            if ro.path_xy is None:
                continue
            name = f"trajectory_{spec.name}_s{seed}_i{it}.csv"
            with open(out_dir / name, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["step", "x", "y"])
                for step, (x, y) in enumerate(ro.path_xy, start=1):
                    writer.writerow([step, repr(float(x)), repr(float(y))])
            traj_files.append(name)
        result["trajectories"] = traj_files
        result["final_cumulative_s"] = records[-1].cumulative_s
    return result


def run(
    config: ExperimentConfig,
    out_dir,
    jobs: int | None = None,
    quiet: bool = False,
) -> int:
    """Execute the experiment grid; returns a process exit code (0/3)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = [
        {"config": config.raw, "out_dir": str(out_dir), "controller_index": i, "seed": seed}
        for i, _ in enumerate(config.raw["controllers"])
        for seed in config.seeds
    ]
    jobs = jobs or min(len(cells), os.cpu_count() or 1)
    results = []
    if jobs <= 1:
        for cell in cells:
            results.append(_run_cell(cell))
            if not quiet:
                r = results[-1]
                print(f"[{r['status']}] {r['controller']} seed={r['seed']}", file=sys.stderr)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for r in pool.map(_run_cell, cells):
                results.append(r)
                if not quiet:
                    print(f"[{r['status']}] {r['controller']} seed={r['seed']}", file=sys.stderr)

    plant = config.build_plant()
    plant.path.export_csv(out_dir / "reference_path.csv")
    aborted = [r for r in results if r["status"] != "ok"]
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config": config.resolved(),
        "files": {
            "records": [
                _cell_filename(name, seed)
                for name in config.controller_names
                for seed in config.seeds
            ],
            "reference_path": "reference_path.csv",
            "trajectories": sorted(
                f for r in results for f in r.get("trajectories", [])
            ),
            "summary": "summary.json",
        },
        "aborted_cells": [
            {"controller": r["controller"], "seed": r["seed"], "message": r.get("message", "")}
            for r in aborted
        ],
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    if not aborted:
        summary = summarize_directory(out_dir)
        with open(out_dir / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
        return 0
    if not quiet:
        for r in aborted:
            print(f"ABORTED: {r['controller']} seed={r['seed']}: {r['message']}", file=sys.stderr)
    return 3


def iterations_to_fraction(rms: np.ndarray, fraction: float):
    """Iterations elapsed (beyond the first) until RMS falls to
    ``fraction`` of the first iteration's RMS; None if never."""
    target = fraction * rms[0]
    hits = np.nonzero(rms <= target)[0]
    return int(hits[0]) if hits.size else None


def summarize(records_by_cell: dict) -> dict:
    """Aggregate per-controller statistics across seeds.

    ``records_by_cell`` maps (controller, seed) to a record list.
    """
    if not records_by_cell:
        raise ConfigError("no records to summarize")
    controllers = {}
    for (name, _seed), records in sorted(records_by_cell.items()):
        controllers.setdefault(name, []).append(records)
    out = {"schema_version": SCHEMA_VERSION, "controllers": {}}
    for name, runs in controllers.items():
        rms = np.array([[r.rms_error for r in run_] for run_ in runs])
        finals = [run_[-1].cumulative_s for run_ in runs]
        halves = [iterations_to_fraction(row, 0.5) for row in rms]
        tenths = [iterations_to_fraction(row, 0.1) for row in rms]

        def agg(vals):
            reached = [v for v in vals if v is not None]
            return {
                "mean": float(np.mean(reached)) if reached else None,
                "reached": len(reached),
                "of": len(vals),
            }

        out["controllers"][name] = {
            "seeds": len(runs),
            "iterations": rms.shape[1],
            "mean_rms_per_iteration": np.mean(rms, axis=0).tolist(),
            "std_rms_per_iteration": np.std(rms, axis=0).tolist(),
            "mean_final10_rms": float(np.mean(rms[:, -10:])),
            "iterations_to_half": agg(halves),
            "iterations_to_tenth": agg(tenths),
            "total_compute_s": float(np.mean(finals)),
        }
    return out


def summarize_directory(out_dir) -> dict:
    """Summarize all record CSVs found in a run directory."""
    out_dir = Path(out_dir)
    cells = {}
    for path in sorted(out_dir.glob("records_*.csv")):
        records = read_records_csv(path)
        if records:
            cells[(records[0].controller, records[0].seed)] = records
    return summarize(cells)
