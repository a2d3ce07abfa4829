"""Experiment orchestration: run directories, CSV artifacts, sweeps."""
from __future__ import annotations

import configparser
import csv
import itertools
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .argus.similarity import energy_map
from .config import ConfigError, RunConfig, emit, load, with_overrides
from .defense import ACCEPTED
from .sim import ATTACKER, RunResult, simulate

log = logging.getLogger(__name__)

OUT_ENV = "ARGUS_DL_OUT"
METRIC_COLUMNS = ("round", "node", "role", "ca", "asr", "asr_undefined", "rejections_out",
                  "rejections_in", "trusted", "suspected", "ejected")
EDGE_COLUMNS = ("round", "receiver", "sender", "sender_role", "decision")
SUMMARY_COLUMNS = ("node", "role", "ca", "asr", "param_norm", "rejections_out_total",
                   "rejections_in_total")
MAX_SWEEP_RUNS = 10_000


def output_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _num(x) -> str:
    """Stable text for CSV cells: repr for floats, blank for missing."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def metric_rows(res: RunResult):
    w = res.world
    for rec in res.records:
        out_rej = np.zeros(w.graph.n, dtype=np.int64)
        in_rej = np.zeros(w.graph.n, dtype=np.int64)
        for (i, j), dec in rec.decisions.items():
            if dec != ACCEPTED:
                in_rej[i] += 1
                out_rej[j] += 1
        for node in w.nodes:
            i = node.id
            tc = rec.trust_counts[i] or {}
            yield (rec.round, i, node.role,
                   None if rec.ca is None else rec.ca[i],
                   None if rec.asr is None else rec.asr[i],
                   None if rec.asr_undefined is None else rec.asr_undefined[i],
                   out_rej[i], in_rej[i],
                   tc.get("trusted"), tc.get("suspected"), tc.get("ejected"))


def edge_rows(res: RunResult):
    w = res.world
    for rec in res.records:
        for (i, j) in sorted(rec.decisions):
            role = ATTACKER if j in w.attacker_set else "honest"
            yield rec.round, i, j, role, rec.decisions[(i, j)]


def summary_rows(res: RunResult):
    w = res.world
    last = res.records[-1]
    tot_out = np.zeros(w.graph.n, dtype=np.int64)
    tot_in = np.zeros(w.graph.n, dtype=np.int64)
    for rec in res.records:
        for (i, j), dec in rec.decisions.items():
            if dec != ACCEPTED:
                tot_in[i] += 1
                tot_out[j] += 1
    for node in w.nodes:
        yield (node.id, node.role, last.ca[node.id], last.asr[node.id], node.model.norm(),
               tot_out[node.id], tot_in[node.id])


def write_rows(fh, header, rows) -> None:
    wr = csv.writer(fh, lineterminator="\n")
    wr.writerow(header)
    for row in rows:
        wr.writerow([_num(x) for x in row])


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        write_rows(fh, header, rows)


def write_pgm(path: Path, values: np.ndarray) -> None:
    """Plain (P2) graymap of a trigger's per-pixel energy, scaled to 0..255."""
    e = energy_map(values)
    peak = e.max()
    g = np.zeros(e.shape, dtype=np.int64) if peak <= 0 else np.rint(255 * e / peak).astype(np.int64)
    lines = ["P2", f"{g.shape[1]} {g.shape[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in g]
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


def write_run(res: RunResult, out: Path, dump_triggers: bool = False) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    w = res.world
    (out / "config.cfg").write_text(emit(w.cfg), encoding="utf-8")
    write_csv(out / "metrics.csv", METRIC_COLUMNS, metric_rows(res))
    write_csv(out / "edges.csv", EDGE_COLUMNS, edge_rows(res))
    write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary_rows(res))
    if w.calibration is not None and w.cfg.defense.xi is None:
        (out / "calibration.json").write_text(
            json.dumps(w.calibration.to_record(), sort_keys=True) + "\n", encoding="utf-8")
    if dump_triggers:
        tdir = out / "triggers"
        tdir.mkdir(exist_ok=True)
        for rec in res.records:
            for i, j, cand in rec.flag_events:
                write_pgm(tdir / f"r{rec.round:04d}_n{i:02d}_from{j:02d}_t{cand.target}.pgm",
                          cand.values)
    return out


def run(cfg: RunConfig, out: Path, dump_triggers: bool = False) -> RunResult:
    res = simulate(cfg, keep_flag_events=dump_triggers)
    write_run(res, out, dump_triggers)
    return res


# --------------------------------------------------------------------------
# sweeps


@dataclass
class SweepSpec:
    base: RunConfig
    axes: dict = field(default_factory=dict)   # dotted key -> list of raw values
    seeds: list = field(default_factory=lambda: [0])

    def cells(self) -> list[dict]:
        keys = list(self.axes)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(self.axes[k] for k in keys))]

    def size(self) -> int:
        return len(self.cells()) * len(self.seeds)


def parse_sweep(text: str, base_dir: Path = Path(".")) -> SweepSpec:
    """``[sweep]`` section: ``base`` config path, ``seeds`` list, dotted keys with value lists."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed sweep spec: {exc}") from None
    if "sweep" not in cp:
        raise ConfigError("missing [sweep] section")
    sect = dict(cp["sweep"])
    if "base" not in sect:
        raise ConfigError("sweep needs a base config path")
    base_path = Path(sect.pop("base"))
    base = load(base_path if base_path.is_absolute() else base_dir / base_path)
    seeds = [int(s) for s in sect.pop("seeds", str(base.seed)).split(",")]
    axes = {k: [v.strip() for v in raw.split(",")] for k, raw in sect.items()}
    spec = SweepSpec(base, axes, seeds)
    for cell in spec.cells():
        with_overrides(base, cell).validate()
    if spec.size() > MAX_SWEEP_RUNS:
        raise ConfigError(f"sweep has {spec.size()} runs, limit is {MAX_SWEEP_RUNS}")
    return spec


def _final_metrics(cfg: RunConfig) -> tuple[float, float, float]:
    res = simulate(cfg)
    hon = res.world.honest
    last = res.records[-1]
    rej = float(np.mean([r.rejection_rate() for r in res.records]))
    return float(last.ca[hon].mean()), float(last.asr[hon].mean()), rej


def _cell_job(args):
    cfg, = args
    try:
        return _final_metrics(cfg), ""
    except Exception as exc:  # a failed cell is reported, the others proceed
        return None, f"{type(exc).__name__}: {exc}"


def sweep(spec: SweepSpec, jobs: int = 1) -> tuple[list[str], list[list]]:
    """Final-round honest CA/ASR and mean rejection rate, mean and std over seeds per cell."""
    cells = spec.cells()
    cfgs = [with_overrides(spec.base, dict(cell, seed=s)) for cell in cells for s in spec.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_cell_job, [(c,) for c in cfgs]))
    else:
        results = [_cell_job((c,)) for c in cfgs]

    keys = list(spec.axes)
    header = keys + ["seeds", "ca_mean", "ca_std", "asr_mean", "asr_std", "rejection_mean",
                     "rejection_std", "status"]
    rows = []
    ns = len(spec.seeds)
    for c, cell in enumerate(cells):
        chunk = results[c * ns:(c + 1) * ns]
        errors = [e for _, e in chunk if e]
        vals = np.array([m for m, _ in chunk if m is not None])
        row = [cell[k] for k in keys] + [ns]
        if errors:
            for e in errors:
                log.error("cell %s failed: %s", cell, e)
            row += [None] * 6 + ["failed: " + errors[0]]
        else:
            for col in range(3):
                row += [float(vals[:, col].mean()), float(vals[:, col].std())]
            row.append("ok")
        rows.append(row)
    return header, rows
