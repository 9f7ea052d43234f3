"""``infex`` command line: dataset generation, training, evaluation, agents, reports.

Every stage writes into its own directory under the output root together
with a ``config.json`` snapshot, and refuses to replace existing outputs
unless ``--overwrite`` is given.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .. import agent as agent_mod
from .. import hashcount as hc
from ..envs import gen_dataset, load_dataset, uniform_policy
from ..errors import ConfigurationError, FormatError, InputValidationError, NonFiniteError, UsageError
from ..prediction import PredictionNet, eval_multistep_mse, fmt, quantize, train_prediction
from . import report as report_mod
from .config import ExperimentConfig, parse_overrides

log = logging.getLogger("infex")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_MISSING = 0, 1, 2, 3


class MissingArtifact(Exception):
    def __init__(self, path):
        super().__init__(f"missing input artifact: {path}")
        self.path = path


class OutputExists(Exception):
    pass


# ---------------------------------------------------------------------------
# layout
# ---------------------------------------------------------------------------

class Layout:
    def __init__(self, root: Path):
        self.root = Path(root)

    data = property(lambda s: s.root / "data")
    pred = property(lambda s: s.root / "pred")
    ae1 = property(lambda s: s.root / "ae1")
    ae2 = property(lambda s: s.root / "ae2")
    codes = property(lambda s: s.root / "codes")
    agent = property(lambda s: s.root / "agent")

    def dataset(self):
        return self.data / "transitions.iexd"

    def pairs(self):
        return self.data / "pairs.iexd"

    def pred_model(self):
        return self.pred / "model.iexp"

    def ae_model(self, phase):
        return (self.ae1 if phase == 1 else self.ae2) / "model.iexp"


def require(path: Path) -> Path:
    if not Path(path).exists():
        raise MissingArtifact(path)
    return Path(path)


def prepare(directory: Path, outputs, cfg: ExperimentConfig, overwrite: bool):
    directory.mkdir(parents=True, exist_ok=True)
    clash = [p for p in outputs if Path(p).exists()]
    if clash and not overwrite:
        raise OutputExists(f"refusing to overwrite {clash[0]} (pass --overwrite)")
    cfg.save(directory / "config.json")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def split(cfg, ds, name):
    return ds.split_by_episode(cfg.rng(name), cfg.data.val_fraction)


def cmd_gen_data(cfg, lay, args):
    out = [lay.dataset(), lay.pairs()]
    prepare(lay.data, out, cfg, args.overwrite)
    spec = cfg.env.spec(random_start=cfg.data.random_start)
    policy = uniform_policy(spec.n_actions)
    gen_dataset(spec, policy, cfg.data.n, cfg.data.epsilon, cfg.seed_for("data"), out[0])
    gen_dataset(spec, policy, cfg.data.pairs, cfg.data.epsilon, cfg.seed_for("pairs"), out[1])
    print(f"wrote {out[0]} and {out[1]}")


def cmd_train_pred(cfg, lay, args):
    ds = load_dataset(require(lay.dataset()))
    out = [lay.pred_model(), lay.pred / "curve.csv"]
    prepare(lay.pred, out, cfg, args.overwrite)
    train, val = split(cfg, ds, "split.pred")
    net = PredictionNet(ds.r, ds.m, ds.n, ds.n_actions, cfg.pred.hidden, cfg.pred.joint, rng=cfg.rng("init.pred"))
    train_prediction(net, train, val, cfg.pred.optim(), cfg.rng("train.pred"), curve_path=out[1])
    net.save(out[0])
    print(f"wrote {out[0]}")


def cmd_eval_pred(cfg, lay, args):
    ds = load_dataset(require(lay.dataset()))
    net = PredictionNet.load(require(lay.pred_model()))
    out = lay.pred / "multistep.csv"
    prepare(lay.pred, [out], cfg, args.overwrite)
    _, val = split(cfg, ds, "split.pred")
    horizons = cfg.horizons()
    rows, skipped = eval_multistep_mse(net, val, horizons)
    header = ["domain"] + [f"{k}-step" for k in horizons] + ["n_starts", "skipped"]
    write_csv(out, header, [[cfg.env.kind] + [m for _, m, _ in rows] + [rows[0][2], skipped]])
    print(out.read_text(), end="")


def seen_frames(cfg, lay):
    ds = load_dataset(require(lay.dataset()))
    train, val = split(cfg, ds, "split.pred")
    return train.next_frames, val.next_frames


def predicted_pairs(cfg, lay):
    """(seen, predicted) frame pairs from the pairs dataset, split by episode."""
    ds = load_dataset(require(lay.pairs()))
    net = PredictionNet.load(require(lay.pred_model()))
    train, val = split(cfg, ds, "split.pairs")
    def pairs(part):
        return part.next_frames, quantize(net.predict(part.states, part.actions))
    return pairs(train), pairs(val)


def cmd_train_ae_phase1(cfg, lay, args):
    frames, val = seen_frames(cfg, lay)
    out = [lay.ae_model(1), lay.ae1 / "curve.csv"]
    prepare(lay.ae1, out, cfg, args.overwrite)
    ae = hc.Autoencoder(frames.shape[1], frames.shape[2], rng=cfg.rng("init.ae"))
    proj = hc.Projection(cfg.ae.bits, ae.feature_dim, seed=cfg.seed_for("projection"))
    log.info("autoencoder feature dim d=%d", ae.feature_dim)
    hc.train_phase1(ae, frames, val, cfg.ae.phase1(), cfg.rng("train.ae1"), curve_path=out[1])
    hc.save_autoencoder(out[0], ae, proj)
    print(f"wrote {out[0]}")


def cmd_train_ae_phase2(cfg, lay, args):
    ae, proj = hc.load_autoencoder(require(lay.ae_model(1)))
    (seen, pred), (vs, vp) = predicted_pairs(cfg, lay)
    out = [lay.ae_model(2), lay.ae2 / "metrics.csv"]
    prepare(lay.ae2, out, cfg, args.overwrite)
    hc.train_phase2(ae, seen, pred, vs, vp, cfg.ae.lam, cfg.ae.phase2(), cfg.rng("train.ae2"), proj,
                    curve_path=out[1])
    hc.save_autoencoder(out[0], ae, proj)
    print(f"wrote {out[0]}")


CODE_COLUMNS = ("pairs", "mean_code_loss", "median_code_loss", "fraction_zero", "rec_mse_seen", "rec_mse_pred")


def eval_codes(ae_a, proj_a, ae_b, proj_b, seen, pred):
    """Statistics rows for two autoencoders over the same pairs under one projection."""
    if proj_a != proj_b:
        raise ConfigurationError("the two checkpoints carry different projections; codes are not comparable")
    return [hc.evaluate_pairs(ae_a, proj_a, seen, pred), hc.evaluate_pairs(ae_b, proj_b, seen, pred)]


def cmd_eval_codes(cfg, lay, args):
    p1 = require(Path(args.phase1) if args.phase1 else lay.ae_model(1))
    p2 = require(Path(args.phase2) if args.phase2 else lay.ae_model(2))
    ae1, proj1 = hc.load_autoencoder(p1)
    ae2, proj2 = hc.load_autoencoder(p2)
    _, (seen, pred) = predicted_pairs(cfg, lay)
    out = lay.codes / "codes.csv"
    prepare(lay.codes, [out], cfg, args.overwrite)
    stats = eval_codes(ae1, proj1, ae2, proj2, seen, pred)
    write_csv(out, ("phase",) + CODE_COLUMNS,
              [[name] + [s[c] for c in CODE_COLUMNS] for name, s in zip(("phase1", "phase2"), stats)])
    print(out.read_text(), end="")


def cmd_train_agent(cfg, lay, args):
    mode = args.mode or cfg.policy.mode
    cfg.update({"policy.mode": mode})
    seeds = args.seeds
    directory = lay.agent / mode
    curves = [directory / f"curve_seed{i}.csv" for i in range(seeds)]
    net = PredictionNet.load(require(lay.pred_model())) if mode == "informed-hash" else None
    ae, proj = hc.load_autoencoder(require(lay.ae_model(2)))
    prepare(directory, curves, cfg, args.overwrite)
    spec = cfg.env.spec()
    summary = []
    for i, path in enumerate(curves):
        curve, _, table = agent_mod.train_agent(
            spec, cfg.policy, cfg.agent, i, cfg.rng(f"agent.{mode}.{i}"), pred_net=net,
            hasher=hc.FrameHasher(ae, proj), curve_path=path)
        summary.append(report_mod.seed_summary(curve, cfg.agent.budget) | {"seed": i, "table_total": table.total})
        print(f"seed {i}: {summary[-1]}", flush=True)
    (directory / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


def cmd_report(cfg, lay, args):
    run = Path(args.run) if args.run else lay.agent
    result = report_mod.report(run)
    out = run / "report.json"
    if out.exists() and not args.overwrite:
        raise OutputExists(f"refusing to overwrite {out} (pass --overwrite)")
    out.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(out.read_text(), end="")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-pred": cmd_train_pred,
    "eval-pred": cmd_eval_pred,
    "train-ae-phase1": cmd_train_ae_phase1,
    "train-ae-phase2": cmd_train_ae_phase2,
    "eval-codes": cmd_eval_codes,
    "train-agent": cmd_train_agent,
    "report": cmd_report,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of dotted keys")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="output root (IEX_OUT takes precedence)")
    common.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress per epoch")

    parser = argparse.ArgumentParser(prog="infex", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen-data", parents=[common])
    p.add_argument("--env", choices=("goal-grid", "paddle-ball"))
    p.add_argument("--n", type=int, help="number of transitions")
    sub.add_parser("train-pred", parents=[common]).add_argument("--epochs", type=int)
    sub.add_parser("eval-pred", parents=[common]).add_argument("--horizons", help="e.g. 1,3,5,10")
    sub.add_parser("train-ae-phase1", parents=[common])
    sub.add_parser("train-ae-phase2", parents=[common])
    p = sub.add_parser("eval-codes", parents=[common])
    p.add_argument("--phase1", help="phase-1 checkpoint")
    p.add_argument("--phase2", help="phase-2 checkpoint")
    p = sub.add_parser("train-agent", parents=[common])
    p.add_argument("--mode", choices=agent_mod.MODES, help="exploration mode (default: policy.mode)")
    p.add_argument("--seeds", type=int, default=1, help="number of independent seeds")
    p.add_argument("--budget", type=int, help="environment steps per seed")
    sub.add_parser("report", parents=[common]).add_argument("--run", help="directory of curve CSVs")
    return parser


def make_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    flat = {}
    if args.seed is not None:
        flat["seed"] = args.seed
    if args.out is not None:
        flat["out"] = args.out
    for flag, key in (("env", "env.kind"), ("n", "data.n"), ("epochs", "pred.epochs"),
                      ("horizons", "pred.horizons"), ("budget", "agent.budget")):
        if getattr(args, flag, None) is not None:
            flat[key] = getattr(args, flag)
    flat.update(parse_overrides(args.set))
    cfg.update(flat)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = make_config(args)
        lay = Layout(cfg.out_root())
        COMMANDS[args.command](cfg, lay, args)
    except MissingArtifact as exc:
        print(f"infex: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except report_mod.EmptyRun as exc:
        print(f"infex: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except UsageError as exc:
        print(f"infex: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, InputValidationError, FormatError, NonFiniteError, OutputExists) as exc:
        print(f"infex: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
