"""Scenario files, bundled presets, batch runs and their persisted outputs.

A scenario is an INI file::

    [run]          name, duration, settle_threshold, monitor
    [engine]       dt, horizon, spacing, v_nominal, threads
    [solver]       any SolverOptions field (optional)
    [leader]       breakpoints = [[t, v], ...], initial_position
    [topology]     preset + followers, or edges = [[j, i], ...] + pins = [...]
    [vehicle.N]    mass, tau, drag_coeff, wheel_radius (+ optional VehicleParams fields)
    [weights.N]    q, r, f, g as scalars (times I2) or 2x2 lists
    [initial]      optional: states = [[s, v, T], ...] or spacing_errors / velocity_errors

Values are JSON literals; bare words are taken as strings.
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .engine import EngineConfig, EngineHalt, LeaderModel, StepRecord, initial_errors, run, setpoint_states
from .monitor import StabilityMonitor, check_weight_condition, kron_spectrum_check
from .ocp import OcpError, WeightSet
from .sqp import SolverOptions
from .topology import Topology, TopologyError, from_preset, spectral_report
from .vehicle import VehicleParams, VehicleState

CSV_HEADER = ["t", "node", "s", "v", "T", "u", "spacing_err", "velocity_err", "J_i", "status"]
DEFAULT_SETTLE = 0.05

EXIT_OK = 0
EXIT_MONITOR = 1
EXIT_HALT = 2
EXIT_IO = 3
EXIT_CONFIG = 4

_SECTION_KEYS = {
    "run": {"name", "duration", "settle_threshold", "monitor"},
    "engine": {"dt", "horizon", "spacing", "v_nominal", "threads"},
    "solver": {f.name for f in dataclasses.fields(SolverOptions)},
    "leader": {"breakpoints", "initial_position"},
    "topology": {"preset", "followers", "edges", "pins"},
    "vehicle": {f.name for f in dataclasses.fields(VehicleParams)},
    "weights": {"q", "r", "f", "g"},
    "initial": {"states", "spacing_errors", "velocity_errors"},
}
_REQUIRED = {
    "run": {"duration"},
    "engine": {"dt", "horizon", "spacing"},
    "leader": {"breakpoints"},
    "vehicle": {"mass", "tau", "drag_coeff", "wheel_radius"},
    "weights": {"q", "r", "f", "g"},
}


class ScenarioError(ValueError):
    """Invalid or unreadable scenario; the message names the offending item."""


@dataclass
class ScenarioConfig:
    name: str
    engine: EngineConfig
    leader: LeaderModel
    duration: float
    initial_states: list
    monitor: bool = True
    settle_threshold: float = DEFAULT_SETTLE
    source: str = ""

    def __post_init__(self):
        if not self.duration > 0:
            raise ScenarioError("duration must be > 0")
        if not self.settle_threshold > 0:
            raise ScenarioError("settle_threshold must be > 0")
        if len(self.initial_states) != self.engine.followers:
            raise ScenarioError(f"need {self.engine.followers} initial states")

    @property
    def steps(self) -> int:
        return max(1, int(round(self.duration / self.engine.dt)))


# ---------------------------------------------------------------- loading


def preset_names() -> list[str]:
    folder = resources.files("platoon_dmpc") / "presets"
    return sorted(p.name[:-4] for p in folder.iterdir() if p.name.endswith(".ini"))


def preset_path(name: str):
    return resources.files("platoon_dmpc") / "presets" / f"{name}.ini"


def _value(raw: str, where: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        if raw.strip().startswith(("[", "{", '"')):
            raise ScenarioError(f"{where}: malformed value {raw!r}") from None
        return raw.strip()


def _number(x, where: str) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ScenarioError(f"{where} must be a number")
    return float(x)


def _section(parser, name: str, kind: str) -> dict:
    allowed = _SECTION_KEYS[kind]
    out = {}
    for key, raw in parser.items(name):
        if key not in allowed:
            raise ScenarioError(f"[{name}] unknown key {key!r}")
        out[key] = _value(raw, f"[{name}] {key}")
    missing = _REQUIRED.get(kind, set()) - set(out)
    if missing:
        raise ScenarioError(f"[{name}] missing keys {sorted(missing)}")
    return out


def _numbered(parser, prefix: str) -> dict[int, str]:
    found = {}
    for sec in parser.sections():
        if sec.startswith(prefix + "."):
            tail = sec[len(prefix) + 1 :]
            if not tail.isdigit() or int(tail) < 1:
                raise ScenarioError(f"[{sec}] must be numbered from 1")
            found[int(tail)] = sec
    return found


def _topology(sec: dict) -> Topology:
    try:
        if "preset" in sec:
            if "edges" in sec or "pins" in sec:
                raise ScenarioError("[topology] give either preset or edges/pins, not both")
            if "followers" not in sec:
                raise ScenarioError("[topology] preset needs followers")
            return from_preset(str(sec["preset"]), int(sec["followers"]))
        if "edges" not in sec or "pins" not in sec or "followers" not in sec:
            raise ScenarioError("[topology] needs preset or followers + edges + pins")
        return Topology.from_edges(int(sec["followers"]), [tuple(e) for e in sec["edges"]], sec["pins"])
    except (TopologyError, ValueError, TypeError) as e:
        if isinstance(e, ScenarioError):
            raise
        raise ScenarioError(f"[topology] {e}") from None


def _initial_states(sec: Optional[dict], cfg: EngineConfig, leader: LeaderModel) -> list:
    base = setpoint_states(cfg, leader)
    if not sec:
        return base
    n = cfg.followers
    if "states" in sec:
        if len(sec) > 1:
            raise ScenarioError("[initial] states cannot be combined with error offsets")
        states = sec["states"]
        if len(states) != n or any(len(x) != 3 for x in states):
            raise ScenarioError(f"[initial] states must list {n} [s, v, T] triples")
        return [VehicleState(*(float(c) for c in x)) for x in states]
    de = np.array(sec.get("spacing_errors", [0.0] * n), dtype=float)
    dv = np.array(sec.get("velocity_errors", [0.0] * n), dtype=float)
    if de.shape != (n,) or dv.shape != (n,):
        raise ScenarioError(f"[initial] error offsets need {n} entries")
    # spacing error i is s_{i-1} - s_i - d0, so positions shift by the running sum
    shift = np.cumsum(de)
    return [VehicleState(x.position - shift[i], x.velocity + dv[i], x.torque) for i, x in enumerate(base)]


def parse_scenario(text: str, source: str = "<string>") -> ScenarioConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ScenarioError(f"parse error: {e}") from None

    known = {"run", "engine", "solver", "leader", "topology", "initial"}
    for sec in parser.sections():
        if sec not in known and not sec.startswith(("vehicle.", "weights.")):
            raise ScenarioError(f"unknown section [{sec}]")
    for sec in ("run", "engine", "leader", "topology"):
        if not parser.has_section(sec):
            raise ScenarioError(f"missing section [{sec}]")

    run_sec = _section(parser, "run", "run")
    eng = _section(parser, "engine", "engine")
    solver = _section(parser, "solver", "solver") if parser.has_section("solver") else {}
    lead = _section(parser, "leader", "leader")
    topo = _topology(_section(parser, "topology", "topology"))
    initial = _section(parser, "initial", "initial") if parser.has_section("initial") else None

    n = topo.follower_count
    vehicles, weights = _numbered(parser, "vehicle"), _numbered(parser, "weights")
    for label, found in (("vehicle", vehicles), ("weights", weights)):
        if sorted(found) != list(range(1, n + 1)):
            raise ScenarioError(f"need sections [{label}.1] .. [{label}.{n}] for {n} followers")

    try:
        params = [VehicleParams(**{k: _number(v, f"[vehicle.{i}] {k}") for k, v in _section(parser, vehicles[i], "vehicle").items()}) for i in range(1, n + 1)]
        wsets = [WeightSet(**_section(parser, weights[i], "weights")) for i in range(1, n + 1)]
        opts = SolverOptions(**solver)
        leader = LeaderModel(tuple(tuple(p) for p in lead["breakpoints"]), float(lead.get("initial_position", 0.0)))
        horizon = eng["horizon"]
        if isinstance(horizon, bool) or not isinstance(horizon, int):
            raise ScenarioError("[engine] horizon must be an integer")
        cfg = EngineConfig(
            dt=_number(eng["dt"], "[engine] dt"),
            horizon=horizon,
            spacing=_number(eng["spacing"], "[engine] spacing"),
            params=params,
            topology=topo,
            weights=wsets,
            v_nominal=_number(eng.get("v_nominal", 20.0), "[engine] v_nominal"),
            solver=opts,
            threads=int(eng.get("threads", 1)),
        )
        monitor = run_sec.get("monitor", True)
        if not isinstance(monitor, bool):
            raise ScenarioError("[run] monitor must be true or false")
        return ScenarioConfig(
            name=str(run_sec.get("name", Path(source).stem)),
            engine=cfg,
            leader=leader,
            duration=_number(run_sec["duration"], "[run] duration"),
            initial_states=_initial_states(initial, cfg, leader),
            monitor=monitor,
            settle_threshold=_number(run_sec.get("settle_threshold", DEFAULT_SETTLE), "[run] settle_threshold"),
            source=source,
        )
    except ScenarioError:
        raise
    except (OcpError, TopologyError, ValueError, TypeError) as e:
        raise ScenarioError(f"validation error: {e}") from None


def load_scenario(ref: str) -> ScenarioConfig:
    """Load a scenario from a file path or a bundled preset name.

    Raises ``FileNotFoundError`` if neither exists and :class:`ScenarioError`
    on parse or validation problems.
    """
    path = Path(ref)
    if path.is_file():
        text, source = path.read_text(), str(path)
    elif ref in preset_names():
        text, source = preset_path(ref).read_text(), f"preset:{ref}"
    else:
        raise FileNotFoundError(f"no scenario file or preset named {ref!r}")
    return parse_scenario(text, source)


# ---------------------------------------------------------------- running


@dataclass
class RunSummary:
    name: str
    topology: str
    steps: int
    dt: float
    max_spacing_error: list
    max_velocity_error: list
    final_spacing_error: list
    settling_time: list
    monitor: dict
    wall_time: float
    status: str = "ok"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunSummary":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class RunResult:
    summary: RunSummary
    records: list
    checks: list
    exit_code: int
    files: dict = field(default_factory=dict)
    diagnostic: Optional[dict] = None


def settling_times(errors: np.ndarray, times: np.ndarray, threshold: float) -> list:
    """Per column, the first time after which ``|error|`` stays below ``threshold``.

    ``None`` if the last sample is still above it.
    """
    out = []
    for col in np.abs(errors).T:
        above = np.nonzero(col >= threshold)[0]
        if above.size == 0:
            out.append(float(times[0]))
        elif above[-1] == len(col) - 1:
            out.append(None)
        else:
            out.append(float(times[above[-1] + 1]))
    return out


def summarize(cfg: ScenarioConfig, records: Sequence[StepRecord], monitor_counts: dict, wall: float, status: str = "ok") -> RunSummary:
    e0, v0 = initial_errors(cfg.engine, cfg.leader, cfg.initial_states)
    sp = np.vstack([e0] + [r.spacing_errors for r in records])
    ve = np.vstack([v0] + [r.velocity_errors for r in records])
    times = np.arange(len(sp)) * cfg.engine.dt
    return RunSummary(
        name=cfg.name,
        topology=cfg.engine.topology.name,
        steps=len(records),
        dt=cfg.engine.dt,
        max_spacing_error=np.max(np.abs(sp), axis=0).tolist(),
        max_velocity_error=np.max(np.abs(ve), axis=0).tolist(),
        final_spacing_error=np.abs(sp[-1]).tolist(),
        settling_time=settling_times(sp, times, cfg.settle_threshold),
        monitor=monitor_counts,
        wall_time=wall,
        status=status,
    )


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def trace_rows(records: Sequence[StepRecord], dt: float):
    """CSV rows; ``t`` is the time of the state reached after applying ``u``."""
    for r in records:
        t = (r.t + 1) * dt
        for i in range(len(r.inputs)):
            s, v, T = r.states[i]
            yield [
                _fmt(t), str(i + 1), _fmt(s), _fmt(v), _fmt(T), _fmt(r.inputs[i]),
                _fmt(r.spacing_errors[i]), _fmt(r.velocity_errors[i]), _fmt(r.costs[i]), r.statuses[i].value,
            ]


def write_trace(path, records: Sequence[StepRecord], dt: float):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        w.writerows(trace_rows(records, dt))


def read_trace(path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rec = {k: float(v) for k, v in row.items() if k not in ("node", "status")}
            rec["node"] = int(row["node"])
            rec["status"] = row["status"]
            out.append(rec)
    return out


def _prepare_out(out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"trace": out / "trace.csv", "report": out / "report.json", "summary": out / "summary.json"}
    for p in files.values():
        if p.exists() and not os.access(p, os.W_OK):
            raise PermissionError(f"cannot write {p}")
    if not os.access(out, os.W_OK):
        raise PermissionError(f"cannot write into {out}")
    return files


def run_scenario(cfg: ScenarioConfig, out_dir=None, steps: Optional[int] = None, monitor: Optional[bool] = None, threads: Optional[int] = None) -> RunResult:
    """Simulate, check and (if ``out_dir`` is given) persist one scenario.

    I/O problems raise ``OSError`` before any simulation work is done when the
    output directory is unusable.
    """
    files = _prepare_out(out_dir) if out_dir is not None else {}
    engine = cfg.engine
    if threads is not None:
        engine = dataclasses.replace(engine, threads=threads)
    use_monitor = cfg.monitor if monitor is None else monitor
    mon = StabilityMonitor(engine, cfg.leader) if use_monitor else None
    n_steps = cfg.steps if steps is None else steps

    start = time.perf_counter()
    diagnostic = None
    try:
        records = run(engine, cfg.leader, cfg.initial_states, n_steps, callback=mon.observe if mon else None)
        status = "ok"
    except EngineHalt as halt:
        records, diagnostic, status = halt.records, {"error": str(halt), **halt.diagnostic}, "halted"
    wall = time.perf_counter() - start

    counts = mon.counts() if mon else {"checks": 0, "asserted": 0, "asserted_passed": 0, "asserted_failed": 0}
    checks = mon.report() if mon else []
    summary = summarize(cfg, records, counts, wall, status)
    if status == "halted":
        code = EXIT_HALT
    elif counts["asserted_failed"]:
        code = EXIT_MONITOR
    else:
        code = EXIT_OK

    if files:
        write_trace(files["trace"], records, engine.dt)
        report = {"scenario": cfg.name, "status": status, "counts": counts, "checks": checks}
        if mon:
            report["weight_condition"] = [dataclasses.asdict(c) for c in mon.weight_checks]
        if diagnostic is not None:
            report["diagnostic"] = diagnostic
        files["report"].write_text(json.dumps(_jsonable(report), indent=1))
        files["summary"].write_text(json.dumps(summary.to_dict(), indent=1))
    return RunResult(summary, records, checks, code, {k: str(v) for k, v in files.items()}, diagnostic)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return None if math.isnan(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def load_summary(path) -> RunSummary:
    return RunSummary.from_dict(json.loads(Path(path).read_text()))


def compare_summaries(summaries: Sequence[RunSummary], fmt: str = "text") -> str:
    """Side-by-side table with one row per run."""
    if not summaries:
        raise ValueError("compare_summaries needs at least one summary")
    header = ["name", "topology", "steps", "max_spacing_err", "max_velocity_err", "final_spacing_err", "settling_time", "failed_checks", "wall_time"]
    rows = []
    for s in summaries:
        settle = [x for x in s.settling_time]
        settle_str = "never" if any(x is None for x in settle) else f"{max(settle):.2f}"
        rows.append([
            s.name, s.topology, str(s.steps), f"{max(s.max_spacing_error):.6f}", f"{max(s.max_velocity_error):.6f}",
            f"{max(s.final_spacing_error):.3e}", settle_str, str(s.monitor.get("asserted_failed", 0)), f"{s.wall_time:.1f}",
        ])
    if fmt == "csv":
        return "\n".join(",".join(r) for r in [header] + rows) + "\n"
    if fmt != "text":
        raise ValueError(f"unknown table format {fmt!r}")
    widths = [max(len(r[c]) for r in [header] + rows) for c in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in [header] + rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def analyze_topology(cfg: ScenarioConfig) -> dict:
    """Spectral and weight-condition report of a scenario, without simulating."""
    topo = cfg.engine.topology
    rep = spectral_report(topo)
    kron = kron_spectrum_check(topo, cfg.engine.dt)
    return _jsonable({
        "scenario": cfg.name,
        "topology": topo.name,
        "followers": topo.follower_count,
        "edges": topo.edges(),
        "pins": topo.pins(),
        "eigenvalue_magnitudes": rep.eigenvalue_magnitudes,
        "spectral_radius": rep.spectral_radius,
        "nilpotency_degree": rep.nilpotency_degree,
        "kron_check": kron,
        "weight_condition": [dataclasses.asdict(c) for c in check_weight_condition(topo, cfg.engine.weights)],
    })
