"""Command-line entry points.

Subcommands: gen-corpus, augment, train, attack, eval-bias, eval-ppl,
run-matrix, report. Training runs write a self-describing run directory
(config.json, vocab.txt, per-epoch checkpoints, final/reference snapshots,
JSON-lines logs); the evaluation commands rebuild their inputs from that
directory deterministically.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiment
from .attack import AttackConfig, run_attack, run_attack_cda, write_trace
from .bias import bias_scorecard, load_triplets
from .cda import augment_text_corpus, bundled_pair_table, load_pairs
from .corpus import load_corpus, make_synthetic_corpus
from .model import load_checkpoint
from .utility import utility_report


def _add_common(parser):
    parser.add_argument("--profile", choices=sorted(experiment.PROFILES),
                        default="desk", help="desk-scale profile to start from")
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON file of profile field overrides")
    parser.add_argument("--seed", type=int, default=0)


def _resolve_profile(args) -> experiment.Profile:
    overrides = None
    if args.config is not None:
        overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
    return experiment.profile_from(args.profile, overrides)


def _load_run(run_dir: Path):
    """Rebuild a run's data and snapshots from its directory."""
    config = json.loads((run_dir / "record.json").read_text(encoding="utf-8"))["config"]
    profile = experiment.profile_from(config["profile"]["name"],
                                      {k: v for k, v in config["profile"].items() if k != "name"})
    data = experiment.prepare_data(profile, config["seed"])
    final = load_checkpoint(run_dir / "final.ckpt", data.vocab)
    reference = load_checkpoint(run_dir / "reference.ckpt", data.vocab)
    return config, profile, data, final, reference


def cmd_gen_corpus(args) -> int:
    sentences = make_synthetic_corpus(args.seed, args.n_sentences, args.gender_skew)
    text = "\n".join(sentences) + "\n"
    if args.out is None:
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {len(sentences)} sentences to {args.out}")
    return 0


def cmd_augment(args) -> int:
    table = load_pairs(args.pairs) if args.pairs else bundled_pair_table()
    sentences = load_corpus(args.infile, min_tokens=0)
    augmented = augment_text_corpus(sentences, table, mode=args.mode)
    text = "\n".join(augmented) + "\n"
    if args.out is None:
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {len(augmented)} sentences to {args.out}")
    return 0


def cmd_train(args) -> int:
    profile = _resolve_profile(args)
    arm = experiment.resolve_arm(args.arm, profile, args.seed)
    record = experiment.run_arm(arm, profile, args.seed, out_dir=args.out)
    print(json.dumps(record.to_dict(), indent=2))
    return 0 if record.status == "complete" else 1


def cmd_attack(args) -> int:
    run_dir = Path(args.run)
    config, profile, data, final, reference = _load_run(run_dir)
    cfg = AttackConfig(alpha=args.alpha if args.alpha is not None else profile.alpha)
    members, nonmembers = data.split.train, data.split.dev
    std = run_attack(final, reference, members, nonmembers, cfg)
    write_trace(std, run_dir / "attack_standard.jsonl")
    summaries = {"standard": std.summary()}
    if config["augmentation"] is not None:
        adj = run_attack_cda(final, reference, members, nonmembers, data.table, cfg)
        write_trace(adj, run_dir / "attack_cda.jsonl")
        summaries["cda-adjusted"] = adj.summary()
    print(json.dumps(summaries, indent=2))
    return 0


def cmd_eval_bias(args) -> int:
    run_dir = Path(args.run)
    _, profile, data, final, _ = _load_run(run_dir)
    card = bias_scorecard(final, permutations=profile.permutations, seed=data.seed)
    (run_dir / "bias.json").write_text(json.dumps(card.to_dict(), indent=2) + "\n",
                                       encoding="utf-8")
    print(json.dumps(card.to_dict(), indent=2))
    return 0


def cmd_eval_ppl(args) -> int:
    run_dir = Path(args.run)
    _, _, data, final, _ = _load_run(run_dir)
    report = utility_report(final, data.split.dev, load_triplets())
    (run_dir / "utility.json").write_text(json.dumps(report, indent=2) + "\n",
                                          encoding="utf-8")
    print(json.dumps(report, indent=2))
    return 0


def cmd_run_matrix(args) -> int:
    profile = _resolve_profile(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed]
    arms = args.arms.split(",") if args.arms else None
    records, tables = experiment.run_matrix(
        arms=arms, seeds=seeds, profile=profile, out_dir=args.out,
        corpus_path=args.corpus,
    )
    for name in ("bias", "leakage", "utility"):
        print(f"== {name} ==")
        print(tables[name])
        print()
    failures = [r for r in records if r.status != "complete"]
    for r in failures:
        print(f"incomplete: {r.arm} seed {r.seed}: {r.error}", file=sys.stderr)
    return 0 if not failures else 1


def cmd_report(args) -> int:
    matrix = json.loads((Path(args.out) / "matrix.json").read_text(encoding="utf-8"))
    for name in ("bias", "leakage", "utility"):
        text = (Path(args.out) / f"table_{name}.txt").read_text(encoding="utf-8")
        print(f"== {name} ==")
        print(text)
    print(json.dumps(matrix["tables"], indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fairpriv",
        description="train small LMs under debiasing/privacy objectives and "
                    "measure bias, leakage and utility trade-offs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a deterministic synthetic corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-sentences", type=int, default=2000)
    p.add_argument("--gender-skew", type=float, default=0.5)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("augment", help="word-pair augment a text corpus")
    p.add_argument("--infile", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--pairs", type=Path, default=None,
                   help="pair table TSV (default: bundled tables)")
    p.add_argument("--mode", choices=("one-sided", "two-sided"), default="two-sided")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train one arm and evaluate it")
    _add_common(p)
    p.add_argument("--arm", choices=experiment.ARM_LABELS, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="membership inference on a finished run")
    p.add_argument("--run", type=Path, required=True, help="run directory")
    p.add_argument("--alpha", type=float, default=None)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval-bias", help="bias scorecard for a finished run")
    p.add_argument("--run", type=Path, required=True)
    p.set_defaults(func=cmd_eval_bias)

    p = sub.add_parser("eval-ppl", help="held-out perplexity for a finished run")
    p.add_argument("--run", type=Path, required=True)
    p.set_defaults(func=cmd_eval_ppl)

    p = sub.add_parser("run-matrix", help="run the experiment matrix")
    _add_common(p)
    p.add_argument("--arms", default=None,
                   help="comma-separated arm labels (default: all six)")
    p.add_argument("--seeds", default=None, help="comma-separated seeds")
    p.add_argument("--corpus", type=Path, default=None,
                   help="plain-text corpus instead of the synthetic one")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_run_matrix)

    p = sub.add_parser("report", help="print tables from a matrix output directory")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
