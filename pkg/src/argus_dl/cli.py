"""Command line: run, sweep, calibrate, theory."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .argus.similarity import calibrate_xi
from .argus.trust import Thresholds
from .config import ConfigError, load
from .graph import gen_regular, gossip_from_graph, jacobi_eigh
from .harness import output_root, parse_sweep, run, sweep, write_csv, write_rows
from .theory import (
    TwoRateModel, ejection_bounds, mc_ejection, mixing_constants, pi, spectrum_closed_form,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

THEORY_COLUMNS = ("d", "n", "p_fp", "p_fn", "k1", "k2", "k3", "T", "pi_fp", "pi_mal",
                  "mal_survive_ub", "mal_eject_lb", "honest_eject_ub", "a", "b", "c", "rho",
                  "mc_mal_eject", "mc_mal_stderr", "mc_honest_eject", "mc_honest_stderr")


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",")]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",")]


def cmd_run(args) -> int:
    cfg = load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out) if args.out else output_root() / f"{Path(args.config).stem}-seed{cfg.seed}"
    t0 = time.time()
    res = run(cfg, out, args.dump_triggers)
    last = res.records[-1]
    hon = res.world.honest
    print(f"wrote {out}  ca {last.ca[hon].mean():.4f}  asr {last.asr[hon].mean():.4f}  "
          f"{time.time() - t0:.1f}s")
    return EXIT_OK


def cmd_sweep(args) -> int:
    path = Path(args.sweep_file)
    spec = parse_sweep(path.read_text(encoding="utf-8"), path.parent)
    header, rows = sweep(spec, args.jobs)
    out = Path(args.out) if args.out else output_root() / f"{path.stem}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, header, rows)
    print(f"wrote {out} ({len(rows)} cells)")
    return EXIT_OK if all(r[-1] == "ok" for r in rows) else EXIT_RUNTIME


def cmd_calibrate(args) -> int:
    t0 = time.time()
    res = calibrate_xi(args.height, args.width, args.k, args.window, args.sigma, args.samples,
                       args.quantile, args.seed)
    rec = dict(res.to_record(), seconds=round(time.time() - t0, 3))
    print(json.dumps(rec, sort_keys=True))
    return EXIT_OK


def theory_rows(args):
    for d in args.d:
        eigs = jacobi_eigh(gossip_from_graph(gen_regular(args.n, d, args.graph_seed)))[0]
        for p_fp in args.p_fp:
            a, b, c = mixing_constants(d, p_fp)
            rho = spectrum_closed_form(d, p_fp, eigs).rho
            for p_fn in args.p_fn:
                for k1 in args.k1:
                    for k2 in args.k2:
                        for k3 in args.k3:
                            if k2 > k3:
                                continue
                            th = Thresholds(k1, k2, k3)
                            model = TwoRateModel(p_fp, p_fn, th, d)
                            for horizon in args.T:
                                eb = ejection_bounds(model, horizon)
                                mc = (mc_ejection(model, horizon, args.trials, args.seed)
                                      if args.trials else None)
                                yield (d, args.n, p_fp, p_fn, k1, k2, k3, horizon,
                                       pi(p_fp, th), pi(1.0 - p_fn, th), eb.mal_survive_ub,
                                       eb.mal_eject_lb, eb.honest_eject_ub, a, b, c, rho,
                                       mc and mc.malicious, mc and mc.malicious_stderr,
                                       mc and mc.honest, mc and mc.honest_stderr)


def cmd_theory(args) -> int:
    if args.trials and args.trials < 10_000:
        raise ConfigError("--trials must be 0 or at least 10000")
    rows = list(theory_rows(args))
    if args.out:
        write_csv(Path(args.out), THEORY_COLUMNS, rows)
    else:
        write_rows(sys.stdout, THEORY_COLUMNS, rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="argus-dl", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="simulate one config and write CSV artifacts")
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default: $ARGUS_DL_OUT/<name>-seed<seed>)")
    p.add_argument("--dump-triggers", action="store_true", help="write flagged triggers as PGM")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sweep", help="run a cross-product of overrides and aggregate over seeds")
    p.add_argument("sweep_file")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("calibrate", help="similarity threshold from the Gaussian null model")
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--k", type=int, default=51)
    p.add_argument("--window", type=int, default=11)
    p.add_argument("--sigma", type=float, default=2.0)
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--quantile", type=float, default=0.99)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("theory", help="ejection bounds and mixing spectrum over a grid")
    p.add_argument("--d", type=_ints, default=[3])
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--graph-seed", type=int, default=0)
    p.add_argument("--p-fp", type=_floats, default=[0.011])
    p.add_argument("--p-fn", type=_floats, default=[0.2])
    p.add_argument("--k1", type=_ints, default=[2])
    p.add_argument("--k2", type=_ints, default=[1])
    p.add_argument("--k3", type=_ints, default=[3])
    p.add_argument("--T", type=_ints, default=[50])
    p.add_argument("--trials", type=int, default=0, help="Monte-Carlo trials (0 = none)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_theory)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
