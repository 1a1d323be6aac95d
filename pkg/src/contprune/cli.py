"""Command-line entry points.

Typical workflow:

    contprune gen-corpora --out data --tokens 200000 --seed 0
    contprune train --corpora-dir data --out model.ckpt --seed 0
    contprune run-grid --model model.ckpt --corpora-dir data \
        --out runs --seed 0
    contprune report --run-dir runs

Every run-grid option can also come from a JSON config file (--config);
explicit flags override file values.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import corpus as corpus_mod
from . import harness, importance, metrics, model, pruner, trainer
from .seeding import derive_seed


def _add_corpora_args(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--corpora-dir",
        help="directory holding <name>.bin corpora (as written by gen-corpora)",
    )
    p.add_argument(
        "--corpus",
        action="append",
        default=[],
        metavar="NAME=PATH",
        help="explicit corpus entry; repeatable",
    )


def _collect_corpora(args) -> dict[str, str]:
    entries: dict[str, str] = {}
    if args.corpora_dir:
        for path in sorted(Path(args.corpora_dir).glob("*.bin")):
            entries[path.stem] = str(path)
    for spec in args.corpus:
        name, _, path = spec.partition("=")
        if not path:
            raise SystemExit(f"--corpus expects NAME=PATH, got {spec!r}")
        entries[name] = path
    if not entries:
        raise SystemExit("no corpora given; use --corpora-dir or --corpus")
    return entries


def cmd_gen_corpora(args) -> int:
    paths = corpus_mod.generate_corpora(args.out, n_tokens=args.tokens, seed=args.seed)
    for name, path in sorted(paths.items()):
        print(f"wrote {name}: {path}")
    return 0


def cmd_train(args) -> int:
    entries = _collect_corpora(args)
    corpora = [corpus_mod.load_corpus(p, n) for n, p in sorted(entries.items())]
    net = model.make_decoder(
        d=args.dim, hidden=args.hidden, blocks=args.blocks, seed=derive_seed(args.seed, "init")
    )
    cfg = trainer.TrainConfig(
        steps=args.steps,
        batch=args.batch,
        seq_len=args.seq_len,
        learning_rate=args.lr,
        seed=args.seed,
        corpora=[c.name for c in corpora],
    )
    losses: list[float] = []
    net = trainer.train(net, corpora, cfg, loss_log=losses)
    model.save_checkpoint(net, args.out)
    first = sum(losses[:50]) / max(len(losses[:50]), 1) if losses else float("nan")
    last = sum(losses[-50:]) / max(len(losses[-50:]), 1) if losses else float("nan")
    print(f"trained {args.steps} steps: loss {first:.4f} -> {last:.4f}; saved {args.out}")
    return 0


def cmd_prune(args) -> int:
    net = model.load_checkpoint(args.model)
    corpus = corpus_mod.load_corpus(args.corpus_path, args.corpus_name)
    calib = corpus_mod.sample_calibration(
        corpus, args.n_samples, args.seq_len, derive_seed(args.seed, "calib", corpus.name)
    )
    kwargs = {"nm": tuple(int(v) for v in args.nm.split(":"))} if args.nm else {"sparsity": args.sparsity}
    config = pruner.PruneConfig(
        criterion=args.criterion,
        init_mode=args.init_mode,
        seed=args.seed,
        epsilon=args.epsilon,
        **kwargs,
    )
    state = None
    if args.criterion == "sensitivity":
        state = importance.load_state(args.state, net) if args.state else importance.init_state(net)
    pruned, masks, frag = pruner.prune_step(net, state, config, calib)
    model.save_checkpoint(pruned, args.out)
    if args.save_state:
        importance.save_state(state, args.save_state)
    if args.export_masks:
        pruner.export_masks(masks, args.export_masks)
    print(json.dumps(frag, indent=2, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    net = model.load_checkpoint(args.model)
    corpus = corpus_mod.load_corpus(args.corpus_path, args.corpus_name)
    ppl = metrics.perplexity(net, corpus, seq_len=args.seq_len)
    print(f"{corpus.name}: perplexity {ppl:.6f}")
    return 0


def _experiment_config(args) -> harness.ExperimentConfig:
    values: dict = {}
    if getattr(args, "config", None):
        values.update(json.loads(Path(args.config).read_text()))
    entries = {}
    if values.get("corpora"):
        entries.update(values["corpora"])
    try:
        entries.update(_collect_corpora(args))
    except SystemExit:
        if not entries:
            raise
    if args.model:
        values["model_path"] = args.model
    if args.seed is not None:
        values["seed"] = args.seed
    if args.out:
        values["output_dir"] = args.out
    if args.criteria:
        values["criteria"] = tuple(args.criteria.split(","))
    if args.sparsity:
        values["sparsities"] = tuple(float(s) for s in args.sparsity.split(","))
    if args.nm:
        values["nm_patterns"] = tuple(tuple(int(v) for v in p.split(":")) for p in args.nm.split(","))
    if args.n_samples is not None:
        values["n_samples"] = args.n_samples
    if args.seq_len is not None:
        values["seq_len"] = args.seq_len
    if args.epsilon is not None:
        values["epsilon"] = args.epsilon
    if args.w_draws is not None:
        values["w_draws"] = args.w_draws
    if args.eval_fraction is not None:
        values["eval_fraction"] = args.eval_fraction
    if args.init_mode:
        values["init_mode_override"] = args.init_mode
    if getattr(args, "sparsity_sweep", None):
        values["sparsity_sweep"] = tuple(float(s) for s in args.sparsity_sweep.split(","))
    if getattr(args, "samples_sweep", None):
        values["samples_sweep"] = tuple(int(n) for n in args.samples_sweep.split(","))
    values["corpora"] = entries
    if "seed" not in values or values["seed"] is None:
        raise SystemExit("--seed is required")
    if "model_path" not in values:
        raise SystemExit("--model is required")
    values.setdefault("output_dir", "runs")
    if "nm_patterns" in values:
        values["nm_patterns"] = tuple(tuple(p) for p in values["nm_patterns"])
    if "criteria" in values:
        values["criteria"] = tuple(values["criteria"])
    if "sparsities" in values:
        values["sparsities"] = tuple(values["sparsities"])
    if "sparsity_sweep" in values:
        values["sparsity_sweep"] = tuple(values["sparsity_sweep"])
    if "samples_sweep" in values:
        values["samples_sweep"] = tuple(values["samples_sweep"])
    return harness.ExperimentConfig(**values)


def cmd_run_grid(args) -> int:
    cfg = _experiment_config(args)
    out = harness.run_continual(cfg)
    print(harness.render_table(out))
    print(f"reports written to {cfg.output_dir}")
    return 0


def cmd_ablate_sparsity(args) -> int:
    cfg = _experiment_config(args)
    rows = harness.run_ablation_sparsity(cfg)
    for row in rows:
        print(row)
    return 0


def cmd_ablate_samples(args) -> int:
    cfg = _experiment_config(args)
    criteria = tuple(args.ablate_criteria.split(",")) if args.ablate_criteria else ("sensitivity",)
    rows = harness.run_ablation_samples(cfg, criteria=criteria)
    for row in rows:
        print(row)
    return 0


def cmd_report(args) -> int:
    grid = json.loads((Path(args.run_dir) / "grid.json").read_text())
    print(harness.render_table(grid))
    return 0


def _add_grid_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--model", help="model checkpoint path")
    _add_corpora_args(p)
    p.add_argument("--out", help="output directory for reports")
    p.add_argument("--seed", type=int, help="master seed (required)")
    p.add_argument("--criteria", help="comma-separated criteria")
    p.add_argument("--sparsity", help="comma-separated unstructured sparsities")
    p.add_argument("--nm", help="comma-separated N:M patterns, e.g. 2:4,4:8")
    p.add_argument("--n-samples", type=int, dest="n_samples")
    p.add_argument("--seq-len", type=int, dest="seq_len")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--w-draws", type=int, dest="w_draws",
                   help="weight perturbation draws per calibration segment")
    p.add_argument("--eval-fraction", type=float, dest="eval_fraction",
                   help="trailing fraction of each corpus held out for evaluation")
    p.add_argument("--init-mode", choices=("sequential", "global"), dest="init_mode",
                   help="force one initialization mode for all criteria")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contprune", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpora", help="write the three synthetic corpora")
    p.add_argument("--out", required=True)
    p.add_argument("--tokens", type=int, default=200_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_corpora)

    p = sub.add_parser("train", help="train a base checkpoint on a corpus mixture")
    _add_corpora_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--seq-len", type=int, default=64, dest="seq_len")
    p.add_argument("--lr", type=float, default=0.3)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prune", help="one prune step on one corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus-path", required=True, dest="corpus_path")
    p.add_argument("--corpus-name", default="corpus", dest="corpus_name")
    p.add_argument("--criterion", default="sensitivity", choices=pruner.CRITERIA)
    p.add_argument("--sparsity", type=float, default=0.5)
    p.add_argument("--nm", help="N:M pattern, e.g. 2:4 (overrides --sparsity)")
    p.add_argument("--init-mode", default="global", choices=("sequential", "global"), dest="init_mode")
    p.add_argument("--n-samples", type=int, default=16, dest="n_samples")
    p.add_argument("--seq-len", type=int, default=128, dest="seq_len")
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--state", help="importance state to continue from")
    p.add_argument("--save-state", dest="save_state", help="write updated importance state here")
    p.add_argument("--export-masks", dest="export_masks", help="directory for mask export")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("eval", help="perplexity of a checkpoint on one corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus-path", required=True, dest="corpus_path")
    p.add_argument("--corpus-name", default="corpus", dest="corpus_name")
    p.add_argument("--seq-len", type=int, default=128, dest="seq_len")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run-grid", help="full permutation grid over criteria")
    _add_grid_args(p)
    p.set_defaults(func=cmd_run_grid)

    p = sub.add_parser("ablate-sparsity", help="sparsity sweep of A-BWT/M-BWT")
    _add_grid_args(p)
    p.add_argument("--sparsity-sweep", dest="sparsity_sweep", help="comma-separated values")
    p.set_defaults(func=cmd_ablate_sparsity)

    p = sub.add_parser("ablate-samples", help="calibration sample-count sweep")
    _add_grid_args(p)
    p.add_argument("--samples-sweep", dest="samples_sweep", help="comma-separated counts")
    p.add_argument("--ablate-criteria", dest="ablate_criteria", help="criteria for the sweep")
    p.set_defaults(func=cmd_ablate_samples)

    p = sub.add_parser("report", help="re-render the table from a run directory")
    p.add_argument("--run-dir", required=True, dest="run_dir")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
