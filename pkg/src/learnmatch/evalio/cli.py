"""Command-line entry point: ``learnmatch <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..diffmath import NumericError
from .config import ConfigError, load_config, save_config
from .io import CheckpointError, MetricsLog, export_embeddings, load_checkpoint, save_checkpoint

log = logging.getLogger("learnmatch")

COMMANDS = ("train", "eval", "gradcheck", "gen", "export-emb")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="learnmatch", description="Learned distribution matching experiments.")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")

    t = sub.add_parser("train", help="train L2M or a baseline from a config file")
    t.add_argument("--config", required=True, help="experiment TOML file")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--out", help="output directory (overrides out_dir)")

    e = sub.add_parser("eval", help="evaluate a checkpoint on its configured domains")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--seed", type=int, help="regenerate the domains with this seed")
    e.add_argument("--out", help="directory for eval.json")

    g = sub.add_parser("gradcheck", help="finite-difference check for every matching mode")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-4)

    n = sub.add_parser("gen", help="generative toy on the 8-mode ring")
    n.add_argument("--loss-mode", choices=("mmd", "l2m"), default="mmd")
    n.add_argument("--steps", type=int, default=2000)
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--out", default="runs/gen")

    x = sub.add_parser("export-emb", help="write source and target embeddings of a checkpoint")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--seed", type=int)
    x.add_argument("--out", required=True)
    return p


def _train(args) -> int:
    from ..l2m import train

    try:
        cfg = load_config(args.config)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        _parser().print_usage(sys.stderr)
        return 2
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.out is not None:
        cfg = cfg.replace(out_dir=args.out)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.toml")
    metrics = MetricsLog(out / "metrics.csv")
    ckpt = out / "checkpoint.json"

    def on_epoch(row, bundle):
        metrics.write(row)
        save_checkpoint(bundle, cfg, ckpt)
        log.info("epoch %d  cls %.4f  match %.4f  target acc %.3f", row.epoch, row.loss_cls,
                 row.loss_match, row.target_accuracy)

    try:
        result = train(cfg, on_epoch=on_epoch)
    except NumericError as err:
        print(f"error: {err}; last completed epoch is in {ckpt}", file=sys.stderr)
        return 1
    last = result.metrics[-1]
    print(f"target_accuracy {last.target_accuracy:.4f}  a_distance {last.a_distance}  -> {out}")
    return 0


def _load(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        print(f"error: checkpoint file not found: {path}", file=sys.stderr)
    except (CheckpointError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
    return None


def _eval(args) -> int:
    from ..l2m import evaluate_losses, load_domains, match_setup
    from .metrics import accuracy, precision_recall_f1, proxy_a_distance

    loaded = _load(args.checkpoint)
    if loaded is None:
        return 1
    bundle, cfg = loaded
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    source, target = load_domains(cfg)
    pred_t = bundle.predict(target.features)
    p, r, f1 = precision_recall_f1(pred_t, target.labels, positive_class=1)
    l_cls, l_match = evaluate_losses(bundle, source, target, match_setup(cfg))
    report = {
        "source_accuracy": accuracy(bundle.predict(source.features), source.labels),
        "target_accuracy": accuracy(pred_t, target.labels),
        "target_precision": p, "target_recall": r, "target_f1": f1,
        "a_distance": proxy_a_distance(bundle.embed(source.features), bundle.embed(target.features), cfg.seed),
        "loss_cls": l_cls, "loss_match": l_match,
    }
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval.json").write_text(text + "\n", encoding="utf-8")
    return 0


def _gradcheck(args) -> int:
    from ..gradcheck import run_suite

    worst = 0.0
    for rep in run_suite(seed=args.seed):
        worst = max(worst, rep.max_rel_error)
        print(f"{rep.mode:10s} {rep.objective:5s} max rel error {rep.max_rel_error:.3e}")
    ok = worst <= args.tol
    print(f"{'PASS' if ok else 'FAIL'} worst {worst:.3e} (tolerance {args.tol:g})")
    return 0 if ok else 1


def _gen(args) -> int:
    from ..genmatch import GenSpec, train_generator, write_gen_metrics_csv, write_samples_csv

    spec = GenSpec(loss_mode=args.loss_mode, steps=args.steps, seed=args.seed)
    try:
        result = train_generator(spec)
    except NumericError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_samples_csv(result.sample(2000), out / "samples.csv")
    write_gen_metrics_csv(result.metrics, out / "metrics.csv")
    print(f"final mmd2 {result.final_mmd2:.6f}  modes covered {result.coverage()}/{spec.modes}  -> {out}")
    return 0


def _export(args) -> int:
    from ..l2m import load_domains

    loaded = _load(args.checkpoint)
    if loaded is None:
        return 1
    bundle, cfg = loaded
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    source, target = load_domains(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ns = export_embeddings(bundle, source, out / "embeddings_source.csv")
    nt = export_embeddings(bundle, target, out / "embeddings_target.csv")
    print(f"wrote {ns} source and {nt} target embeddings to {out}")
    return 0


_HANDLERS = {"train": _train, "eval": _eval, "gradcheck": _gradcheck, "gen": _gen, "export-emb": _export}


def run_cli(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as stop:
        return int(stop.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return _HANDLERS[args.command](args)
    except (OSError, ValueError, RuntimeError, ArithmeticError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
