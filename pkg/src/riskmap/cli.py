"""Command-line entry point: gen, train, plan, eval and ablate."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from riskmap.encoder import RiskHeads, ShapeError, load_checkpoint, save_params
from riskmap.metrics import EvalReport, evaluate_row
from riskmap.planner import PlannerError, plan
from riskmap.predictor import PredictorModel
from riskmap.riskfield import COL_MODES
from riskmap.scenario import KINDS, ScenarioError, generate_scenarios, load_scenario, save_scenario
from riskmap.training import (
    TERMS, ConfigError, TrainConfig, TrainingDivergence, stage2_samples, train_stage1, train_stage2,
    with_mask, write_curve_csv,
)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _join_dash_values(argv):
    # argparse would read "--loss-mask -demo_cost" as two flags
    out, i = [], 0
    while i < len(argv):
        a = argv[i]
        if a == "--loss-mask" and i + 1 < len(argv) and argv[i + 1].startswith("-") \
                and argv[i + 1].lstrip("-+").split(",")[0] in TERMS:
            out.append(f"{a}={argv[i + 1]}")
            i += 2
            continue
        out.append(a)
        i += 1
    return out


# --------------------------------------------------------------------------- helpers

def _scenario_files(directory):
    d = Path(directory)
    if not d.is_dir():
        raise CliError(EXIT_IO, f"scenario directory not found: {d}")
    files = sorted(d.glob("*.json"))
    if not files:
        raise CliError(EXIT_CONFIG, f"no scenario files in {d}")
    return files


def _load_scenarios(directory):
    files = _scenario_files(directory)
    return [p.stem for p in files], [load_scenario(p) for p in files]


def _out_dir(path):
    d = Path(path)
    try:
        d.mkdir(parents=True, exist_ok=True)
        probe = d / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write to {d}: {exc.strerror or exc}") from None
    return d


def _checkpoint(path, what):
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_IO, f"{what} checkpoint not found: {p}")
    return load_checkpoint(p)


def _models(args, horizon=30):
    data = _checkpoint(args.ckpt_predictor, "predictor")
    rng = np.random.default_rng([args.seed, 1])
    predictor = PredictorModel.from_dict(data) if data else PredictorModel.init(rng, horizon=horizon)
    data = _checkpoint(args.ckpt_planner, "planner")
    heads = RiskHeads.from_dict(data) if data else RiskHeads.init(np.random.default_rng([args.seed, 2]),
                                                                   horizon=horizon, tv=args.tv)
    return predictor, heads


def _train_config(args, **over) -> TrainConfig:
    kw = dict(seed=args.seed, tv=args.tv, count=args.count, col_mode=args.col_mode, mask=args.loss_mask)
    for name in ("lr", "epochs", "batch_size"):
        if getattr(args, name, None) is not None:
            kw[name] = getattr(args, name)
    kw.update(over)
    return TrainConfig(**kw)


STAGE_DEFAULTS = {1: dict(lr=1e-3, epochs=50, batch_size=32), 2: dict(lr=3e-3, epochs=100, batch_size=32)}


# --------------------------------------------------------------------------- commands

def cmd_gen(args):
    out = _out_dir(args.out)
    kinds = KINDS if args.kind == "all" else (args.kind,)
    written = []
    for kind in kinds:
        for i, s in enumerate(generate_scenarios(kind, args.count, args.seed)):
            path = out / f"{kind}_{args.seed}_{i}.json"
            try:
                save_scenario(s, path)
            except OSError as exc:
                raise CliError(EXIT_IO, f"cannot write {path}: {exc.strerror or exc}") from None
            written.append(str(path))
    print(json.dumps({"written": len(written), "out": str(out)}))


def cmd_train(args):
    _, scenarios = _load_scenarios(args.scenarios)
    out = _out_dir(args.out)
    defaults = {k: v for k, v in STAGE_DEFAULTS[args.stage].items() if getattr(args, k) is None}
    config = _train_config(args, **defaults)
    if args.stage == 1:
        result = train_stage1(scenarios, config)
        ckpt, curve_path = out / "predictor.json", out / "stage1_loss.csv"
    else:
        if args.ckpt_predictor is None:
            raise CliError(EXIT_CONFIG, "stage 2 needs --ckpt-predictor (a stage-1 checkpoint)")
        predictor = PredictorModel.from_dict(_checkpoint(args.ckpt_predictor, "predictor"))
        result = train_stage2(scenarios, predictor, config)
        ckpt, curve_path = out / "planner.json", out / "stage2_loss.csv"
    save_params(result.model, ckpt)
    write_curve_csv(result.curve, curve_path)
    last = result.curve[-1]
    print(json.dumps({"checkpoint": str(ckpt), "curve": str(curve_path), "final": last}, sort_keys=True))


def _cost_rows(table):
    return [{"risk_ref": c.risk_ref, "risk_sdf": c.risk_sdf, "risk_tl": c.risk_tl, "risk_col": c.risk_col,
             "c_acc": float(c.c_smooth[0]), "c_yaw": float(c.c_smooth[1]), "d_v": c.d_v, "total": c.total}
            for c in table.rows()]


def write_riskmap_csv(result, path):
    xy = result.samples.xy
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("sample", "t", "x", "y", "r_ref", "r_sdf", "r_tl", "r_col"))
        N, T = xy.shape[:2]
        for i in range(N):
            for t in range(T):
                w.writerow([i, t] + [repr(float(v)) for v in (*xy[i, t], *result.riskmap[i, t])])


def cmd_plan(args):
    path = Path(args.scenario)
    if not path.is_file():
        raise CliError(EXIT_IO, f"scenario file not found: {path}")
    scenario = load_scenario(path)
    predictor, heads = _models(args, scenario.horizon)
    result = plan(scenario, predictor, heads, args.count, args.col_mode)
    if args.dump_riskmap:
        try:
            write_riskmap_csv(result, args.dump_riskmap)
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot write {args.dump_riskmap}: {exc.strerror or exc}") from None
    rows = _cost_rows(result.costs)
    doc = {
        "scenario": path.stem,
        "count": args.count,
        "index": result.index,
        "target_speed": result.trajectory.target_speed,
        "lateral_offset": result.trajectory.lateral_offset,
        "trajectory": result.trajectory.states.tolist(),
        "cost": rows[result.index],
        "cost_table": rows,
        "wall_time_ms": result.wall_time_ms,
    }
    print(json.dumps(doc))


def evaluate(names, scenarios, predictor, heads, count, col_mode="integrated") -> EvalReport:
    rows = [evaluate_row(n, plan(s, predictor, heads, count, col_mode).trajectory.states, s)
            for n, s in zip(names, scenarios)]
    return EvalReport(rows, count)


def _parse_counts(text):
    try:
        counts = [int(c) for c in str(text).split(",") if c.strip()]
    except ValueError:
        raise CliError(EXIT_CONFIG, f"bad --counts value {text!r}") from None
    if not counts:
        raise CliError(EXIT_CONFIG, "--counts is empty")
    return counts


def cmd_eval(args):
    names, scenarios = _load_scenarios(args.scenarios)
    out = _out_dir(args.out)
    predictor, heads = _models(args, scenarios[0].horizon)
    summary = {}
    for count in _parse_counts(args.counts):
        report = evaluate(names, scenarios, predictor, heads, count, args.col_mode)
        (out / f"report_{count}.json").write_text(report.to_json())
        report.write_csv(out / f"report_{count}.csv")
        summary[str(count)] = report.aggregate
    print(json.dumps(summary, sort_keys=True))


def cmd_ablate(args):
    """Retrain stage 2 once per removed term and evaluate each on held-out scenarios."""
    _, train = _load_scenarios(args.scenarios)
    names, held = _load_scenarios(args.eval_scenarios)
    out = _out_dir(args.out)
    if args.ckpt_predictor is None:
        raise CliError(EXIT_CONFIG, "ablate needs --ckpt-predictor (a stage-1 checkpoint)")
    predictor = PredictorModel.from_dict(_checkpoint(args.ckpt_predictor, "predictor"))
    defaults = {k: v for k, v in STAGE_DEFAULTS[2].items() if getattr(args, k) is None}
    base = _train_config(args, **defaults)
    samples = stage2_samples(train, predictor, base)
    results = {}
    for label, mask in [("all", None)] + [(f"-{t}", f"-{t}") for t in TERMS]:
        heads = train_stage2(train, predictor, with_mask(base, mask), samples=samples).model
        report = evaluate(names, held, predictor, heads, args.count, args.col_mode)
        results[label] = report.aggregate
    (out / "ablation.json").write_text(json.dumps(results, sort_keys=True, indent=1) + "\n")
    print(json.dumps(results, sort_keys=True))


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--count", type=int, default=400, help="lattice size (a square number)")
    common.add_argument("--tv", dest="tv", action="store_true", default=True,
                        help="time-varying beta/lambda (default)")
    common.add_argument("--no-tv", dest="tv", action="store_false")
    common.add_argument("--col-mode", choices=COL_MODES, default="integrated")
    common.add_argument("--loss-mask", default=None, help="e.g. -demo_cost or -l_sel,-l_con")
    common.add_argument("--ckpt-predictor", default=None)
    common.add_argument("--ckpt-planner", default=None)

    p = argparse.ArgumentParser(prog="riskmap", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate synthetic scenarios")
    g.add_argument("kind", choices=KINDS + ("all",))
    g.add_argument("n", type=int, nargs="?", default=None, help="scenarios per kind")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", parents=[common], help="train stage 1 or 2")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--scenarios", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)

    pl = sub.add_parser("plan", parents=[common], help="plan one scenario, JSON to stdout")
    pl.add_argument("scenario")
    pl.add_argument("--dump-riskmap", default=None)

    e = sub.add_parser("eval", parents=[common], help="metrics over a scenario directory")
    e.add_argument("--scenarios", required=True)
    e.add_argument("--counts", default="100,400,900")
    e.add_argument("--out", required=True)

    a = sub.add_parser("ablate", parents=[common], help="stage-2 loss ablation sweep")
    a.add_argument("--scenarios", required=True)
    a.add_argument("--eval-scenarios", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--lr", type=float, default=None)
    a.add_argument("--epochs", type=int, default=None)
    a.add_argument("--batch-size", type=int, default=None)
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "plan": cmd_plan, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    argv = _join_dash_values(list(sys.argv[1:] if argv is None else argv))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "gen":
        args.count = args.n if args.n is not None else 10
        if args.count < 0:
            print("error: count must be >= 0", file=sys.stderr)
            return EXIT_CONFIG
    try:
        COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except TrainingDivergence as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, PlannerError, ShapeError, ScenarioError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
