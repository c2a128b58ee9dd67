"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 invariant violation, 3 numerical failure.
Every run writes a manifest (``--manifest``, else ``<output>.manifest.json``
or ``run_manifest.json`` in the output directory) with the seed, every flag and SHA-256 digests of its inputs
and outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import tensor as T
from .calibration import ScaleHyperParams, ScaleState, calibrate_scales, scaled_hooks
from .checkpoint_io import load_checkpoint, read_manifest, save_checkpoint
from .config import PRESETS, ConfigError, ModelConfig, get_preset
from .data import load_corpus
from .evaluation import mean_loss
from .gates import BudgetViolation, GateHyperParams
from .materialize import SlicePlan, materialize, retained_from_meta, verify_equivalence
from .memory import estimate_memory
from .model import Checkpoint
from .pipeline import CALIBRATION_WINDOWS, DATA_SEED, load_mask, make_splits, prune, save_mask
from .pretrain import TrainingDiverged, pretrain_backbone
from .projection import InfeasibleBudget, RankingRule, RankVariant, ScanRule, selection_bias_report
from .registry import EmptyRegistry, build_registry, mask_cost
from .report import PruneReport, retention_report

log = logging.getLogger("budgetprune")

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class InvariantError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Collects inputs and outputs of one invocation for its manifest."""

    def __init__(self, args: argparse.Namespace, argv: Sequence[str]):
        self.args = args
        self.argv = list(argv)
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.results: dict = {}

    def input(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise UsageError(f"no such file: {path}")
        self.inputs[str(path)] = _sha256(path)
        return path

    def output(self, path) -> None:
        self.outputs[str(path)] = _sha256(path)

    def write_manifest(self, path) -> None:
        flags = {k: v for k, v in vars(self.args).items() if k != "func"}
        doc = {
            "command": self.args.command,
            "argv": self.argv,
            "seed": self.args.seed,
            "flags": flags,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "results": self.results,
            "version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        }
        Path(path).write_text(json.dumps(doc, indent=2, default=str))


def _corpus(run: Run):
    if run.args.corpus is None:
        return load_corpus()
    return load_corpus(run.input(run.args.corpus))


def _checkpoint(run: Run, path) -> Checkpoint:
    return load_checkpoint(run.input(path))


def _gate_hp(args) -> GateHyperParams:
    rule = RankingRule(RankVariant(args.rank), scan=ScanRule(args.scan))
    return GateHyperParams(lr=args.lr, tau=args.tau, epochs=args.epochs,
                           snapshot_interval=args.snapshot_interval, rule=rule)


def _splits(run: Run):
    a = run.args
    return make_splits(_corpus(run), n_calibration=a.calibration_windows, data_seed=a.data_seed)


def _outdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_pretrain(run: Run) -> Path:
    a = run.args
    config = get_preset(a.config_preset)
    res = pretrain_backbone(config, _corpus(run), steps=a.steps, lr=a.lr if a.lr_set else 3e-3, seed=a.seed,
                            batch_size=a.batch_size, log_every=a.log_every)
    save_checkpoint(res.checkpoint, a.out)
    run.output(a.out)
    run.results = {"final_loss": res.losses[-1] if res.losses else None, "params": res.checkpoint.num_params()}
    print(f"pretrained {config.n_layers}-layer model, final loss {run.results['final_loss']:.4f} -> {a.out}")
    return Path(f"{a.out}.manifest.json")


def cmd_prune(run: Run) -> Path:
    a = run.args
    ckpt = _checkpoint(run, a.checkpoint)
    out = _outdir(a.out_dir)
    before = {k: v.copy() for k, v in ckpt.tensors.items()}
    registry, spec = build_registry(ckpt.config, a.ratio, a.cost_scale, a.target)
    if spec.budget >= spec.total_cost:
        # every unit fits: the projection keeps all of them whatever p is
        log.info("keep ratio 1: nothing to prune, skipping gate training")
        mask = np.ones(len(registry), dtype=bool)
        extra = {"seed": a.seed, "trained": False}
        gate_log = {}
    else:
        registry, spec, gate = prune(ckpt, _splits(run), a.ratio, a.cost_scale, a.target, _gate_hp(a), seed=a.seed)
        if gate.max_step_cost > spec.budget:
            raise InvariantError("a training step exceeded the budget")
        mask = gate.mask.mask
        extra = {"seed": a.seed, "trained": True, "scores": gate.state.scores.tolist(),
                 "p": gate.state.p.tolist(), "hyperparams": gate.hyperparams.to_dict()}
        gate_log = gate.log_dict()
    for k, v in ckpt.tensors.items():
        if not np.array_equal(v, before[k]):
            raise InvariantError(f"backbone tensor {k} changed during pruning")
    cost = mask_cost(mask, registry)
    if cost > spec.budget:
        raise InvariantError(f"mask cost {cost} exceeds budget {spec.budget}")
    save_mask(out / "mask.json", ckpt.config, spec, mask, extra)
    (out / "gate_log.json").write_text(json.dumps(gate_log, indent=1))
    run.output(out / "mask.json")
    run.output(out / "gate_log.json")
    ret = retention_report(mask, registry)
    run.results = {"kept": int(mask.sum()), "units": len(registry), "cost": str(cost),
                   "budget": str(spec.budget), "retention": ret["global"]}
    print(f"kept {int(mask.sum())}/{len(registry)} units, cost {float(cost):.3f} <= budget {float(spec.budget):.3f}")
    print("global keep: " + ", ".join(f"{k} {v:.3f}" for k, v in ret["global"].items()))
    return out / "run_manifest.json"


def cmd_calibrate(run: Run) -> Path:
    a = run.args
    ckpt = _checkpoint(run, a.checkpoint)
    _, registry, _, mask, _ = load_mask(run.input(a.mask))
    hp = ScaleHyperParams(lr=a.lr if a.lr_set else 1e-2, epochs=a.epochs if a.epochs_set else 1)
    state = calibrate_scales(ckpt, mask, registry, _splits(run).calibration, hp, seed=a.seed)
    Path(a.out).write_text(json.dumps(state.to_dict(), indent=1))
    run.output(a.out)
    run.results = {"initial_loss": state.initial_loss, "final_loss": state.final_loss, "reverted": state.reverted,
                   "anomalies": len(state.anomalies())}
    print(f"calibration loss {state.initial_loss:.4f} -> {state.final_loss:.4f}"
          + (" (reverted to identity)" if state.reverted else ""))
    return Path(f"{a.out}.manifest.json")


def _load_scales(run: Run, path) -> Optional[ScaleState]:
    if path is None:
        return None
    return ScaleState.from_dict(json.loads(run.input(path).read_text()))


def cmd_materialize(run: Run) -> Path:
    a = run.args
    ckpt = _checkpoint(run, a.checkpoint)
    _, registry, spec, mask, doc = load_mask(run.input(a.mask))
    gamma = _load_scales(run, a.scales)
    meta = {"keep_ratio": str(spec.keep_ratio), "seed": doc.get("seed"), "hyperparams": doc.get("hyperparams"),
            "base": dict(ckpt.meta)}
    pruned = materialize(ckpt, registry, mask, gamma, meta)
    rep = verify_equivalence(ckpt, registry, mask, gamma, pruned, tolerance=a.tolerance, seed=a.seed)
    run.results = {"equivalence": rep.to_dict(), "params": pruned.num_params(), "base_params": ckpt.num_params()}
    if not rep.passed:
        raise InvariantError(f"sliced model deviates from the masked model by {rep.max_abs:.3g} > {a.tolerance}")
    save_checkpoint(pruned, a.out)
    run.output(a.out)
    print(f"params {ckpt.num_params()} -> {pruned.num_params()}, max logit deviation {rep.max_abs:.3g} -> {a.out}")
    return Path(f"{a.out}.manifest.json")


def cmd_eval(run: Run) -> Path:
    a = run.args
    ckpt = _checkpoint(run, a.checkpoint)
    hooks = None
    if a.mask is not None:
        _, registry, _, mask, _ = load_mask(run.input(a.mask))
        hooks = scaled_hooks(ckpt, registry, mask, _load_scales(run, a.scales))
    elif a.scales is not None:
        raise UsageError("--scales needs --mask")
    held = _splits(run).held_out
    loss = mean_loss(ckpt, held, hooks, workers=a.workers)
    run.results = {"loss": loss, "perplexity": float(np.exp(loss)), "windows": len(held)}
    print(f"held-out loss {loss:.4f}  ppl {np.exp(loss):.3f}  ({len(held)} windows)")
    if a.out:
        Path(a.out).write_text(json.dumps(run.results, indent=1))
        run.output(a.out)
        return Path(f"{a.out}.manifest.json")
    return Path(f"{a.checkpoint}.eval.manifest.json")


def cmd_estimate_memory(run: Run) -> Path:
    a = run.args
    if a.checkpoint is not None:
        man = read_manifest(run.input(a.checkpoint))
        config = get_preset(a.config_preset) if a.preset_set else ModelConfig.from_dict(man["config"])
        retained = retained_from_meta(Checkpoint(config, {}, man.get("meta", {})))
    else:
        config = get_preset(a.config_preset)
        retained = None
    rows = []
    for t in a.seq:
        est = estimate_memory(config, t, a.batch, a.bytes, retained=retained)
        rows.append(est.to_dict())
        print(f"T={t}: weights {est.weights_mib:.1f} MiB, KV cache {est.kv_cache_mib:.1f} MiB")
    run.results = {"estimates": rows}
    if a.out:
        Path(a.out).write_text(json.dumps(rows, indent=1))
        run.output(a.out)
        return Path(f"{a.out}.manifest.json")
    return Path("estimate-memory.manifest.json")


def cmd_report(run: Run) -> Path:
    a = run.args
    config, registry, spec, mask, doc = load_mask(run.input(a.mask))
    out = _outdir(a.out_dir)
    stability, losses = {}, []
    if a.gate_log is not None:
        g = json.loads(run.input(a.gate_log).read_text())
        stability, losses = g.get("stability", {}), g.get("loss", [])
    plan = SlicePlan.from_mask(config, registry, mask)
    memory = [estimate_memory(config, t, a.batch, a.bytes, retained=plan.layers).to_dict() for t in a.seq]
    bias = selection_bias_report(np.asarray(doc["p"]), registry, spec.budget) if "p" in doc else None
    rep = PruneReport(retention_report(mask, registry), losses, stability, memory, bias,
                      {"budget": spec.to_dict(), "mask_cost": str(mask_cost(mask, registry))})
    rep.write(out / "report.json", out / "retention.csv")
    run.output(out / "report.json")
    run.output(out / "retention.csv")
    print(f"wrote {out / 'report.json'} and {out / 'retention.csv'}")
    return out / "run_manifest.json"


def cmd_ablate(run: Run) -> Path:
    """Baseline (rank p, both kinds, unit cost scale) against the configured variant."""
    a = run.args
    ckpt = _checkpoint(run, a.checkpoint)
    splits = _splits(run)
    out = _outdir(a.out_dir)
    base_args = dict(rank="p", target="both", cost_scale=1.0)
    variant_args = dict(rank=a.rank, target=a.target, cost_scale=a.cost_scale)
    rows = []
    for name, cfg in (("baseline", base_args), ("variant", variant_args)):
        ns = argparse.Namespace(**{**vars(a), **cfg})
        registry, spec, gate = prune(ckpt, splits, a.ratio, cfg["cost_scale"], cfg["target"], _gate_hp(ns), seed=a.seed)
        loss = mean_loss(ckpt, splits.held_out, scaled_hooks(ckpt, registry, gate.mask.mask), workers=a.workers)
        ret = retention_report(gate.mask.mask, registry)["global"]
        rows.append({"run": name, **cfg, "keep_ratio": a.ratio, "held_out_loss": loss, **{f"keep_{k}": v for k, v in ret.items()}})
        print(f"{name:9s} rank={cfg['rank']:8s} target={cfg['target']:4s} cost_scale={cfg['cost_scale']:g}  "
              f"held-out loss {loss:.4f}")
    (out / "ablation.json").write_text(json.dumps(rows, indent=1))
    run.output(out / "ablation.json")
    run.results = {"rows": rows}
    return out / "run_manifest.json"


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


class _Track(argparse.Action):
    """Store the value and remember that the flag was given explicitly."""

    def __call__(self, parser, namespace, values, option_string=None):
        setattr(namespace, self.dest, values)
        setattr(namespace, f"{self.dest}_set", True)


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--ratio", type=float, default=0.5, help="keep ratio rho in (0, 1]")
    g.add_argument("--rank", choices=[v.value for v in RankVariant], default="p")
    g.add_argument("--scan", choices=[v.value for v in ScanRule], default="skip")
    g.add_argument("--target", choices=["both", "ffn", "kv"], default="both")
    g.add_argument("--cost-scale", type=float, default=1.0)
    g.add_argument("--epochs", type=_positive_int, default=4, action=_Track)
    g.add_argument("--lr", type=float, default=1e-2, action=_Track)
    g.add_argument("--tau", type=float, default=1.5)
    g.add_argument("--snapshot-interval", type=_positive_int, default=None)
    g.add_argument("--config-preset", choices=sorted(PRESETS), default="toy", action=_Track)
    g.add_argument("--corpus", default=None, help="byte corpus (default: bundled text)")
    g.add_argument("--calibration-windows", type=_positive_int, default=CALIBRATION_WINDOWS)
    g.add_argument("--data-seed", type=int, default=DATA_SEED)
    g.add_argument("--workers", type=_positive_int, default=1, help="evaluation threads")
    g.add_argument("--manifest", default=None, help="where to write the run manifest")
    g.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="budgetprune", description="Budgeted structured pruning of small decoder LMs.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("pretrain", parents=[common], help="train a toy backbone")
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=_positive_int, default=2000)
    s.add_argument("--batch-size", type=_positive_int, default=16)
    s.add_argument("--log-every", type=int, default=0)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("prune", parents=[common], help="learn a budgeted mask")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_prune)

    s = sub.add_parser("calibrate", parents=[common], help="fit per-unit scales on a fixed mask")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("materialize", parents=[common], help="slice and fold into a dense checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--scales", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--tolerance", type=float, default=1e-5)
    s.set_defaults(func=cmd_materialize)

    s = sub.add_parser("eval", parents=[common], help="held-out loss and perplexity")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--mask", default=None)
    s.add_argument("--scales", default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("estimate-memory", parents=[common], help="weights and KV-cache MiB")
    s.add_argument("--checkpoint", default=None, help="pruned checkpoint whose manifest gives retained units")
    s.add_argument("--seq", type=_positive_int, nargs="+", default=[256])
    s.add_argument("--batch", type=_positive_int, default=1)
    s.add_argument("--bytes", type=_positive_int, default=2)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_estimate_memory)

    s = sub.add_parser("report", parents=[common], help="retention JSON/CSV, stability, memory, selection bias")
    s.add_argument("--mask", required=True)
    s.add_argument("--gate-log", default=None)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seq", type=_positive_int, nargs="+", default=[256])
    s.add_argument("--batch", type=_positive_int, default=1)
    s.add_argument("--bytes", type=_positive_int, default=2)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("ablate", parents=[common], help="compare the flagged rule/target/cost scale to the default")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_ablate)
    return p


def _validate(args) -> None:
    if not (0 < args.ratio <= 1):
        raise UsageError("--ratio must lie in (0, 1]")
    if args.tau <= 0:
        raise UsageError("--tau must be positive")
    if args.lr <= 0:
        raise UsageError("--lr must be positive")
    if args.cost_scale < 0:
        raise UsageError("--cost-scale must be nonnegative")
    if args.command == "ablate" and args.rank == "p" and args.target == "both" and args.cost_scale == 1.0:
        raise UsageError("ablate needs at least one of --rank, --target or --cost-scale to differ from the default")


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    for flag in ("epochs", "lr", "config_preset"):
        setattr(args, f"{flag}_set", getattr(args, f"{flag}_set", False))
    args.preset_set = args.config_preset_set
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    run = Run(args, argv)
    t0 = time.perf_counter()
    try:
        _validate(args)
        manifest = args.func(run)
    except (UsageError, ConfigError, FileNotFoundError) as e:
        parser.print_usage(sys.stderr)
        print(f"budgetprune: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (InvariantError, BudgetViolation, InfeasibleBudget, EmptyRegistry, AssertionError) as e:
        print(f"budgetprune: invariant violated: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except (T.NonFiniteError, TrainingDiverged, FloatingPointError) as e:
        print(f"budgetprune: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"budgetprune: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    run.results.setdefault("seconds", time.perf_counter() - t0)
    run.write_manifest(args.manifest or manifest)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
