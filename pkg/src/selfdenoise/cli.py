"""Command-line entry point: synth, pretrain, eval, ablate, gradcheck.

Human-readable logs go to stderr. Machine-readable output (JSON lines,
report JSON, CSV) goes to stdout or to the file named with ``-o``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import List, Optional

from . import ablation, checks
from .config import DEFAULTS, ConfigError, load_config, make_config
from .data import FsdsError, SynthSpec, load_fsds, synth_generate, write_fsds
from .fewshot import EpisodeError
from .model import CheckpointError, canonical_json, load_checkpoint, save_checkpoint
from .pipeline import evaluate_config, pretrain

log = logging.getLogger("selfdenoise")


class _Output:
    """Text sink: a file opened for writing, or stdout."""

    def __init__(self, path: Optional[str]):
        self.path = path
        self.fh = None

    def __enter__(self):
        self.fh = open(self.path, "w", encoding="utf-8", newline="\n") if self.path else sys.stdout
        return self.fh

    def __exit__(self, *exc):
        if self.path:
            self.fh.close()
        else:
            self.fh.flush()


def cmd_synth(args) -> int:
    if args.classes < 2:
        args.parser.error("--classes must be at least 2")
    novel = args.novel if args.novel is not None else args.classes // 2
    spec = SynthSpec(num_classes=args.classes, samples_per_class=args.per_class, image_size=args.image_size,
                     num_novel=novel, num_val=args.val, seed=args.seed)
    ds = synth_generate(spec)
    write_fsds(ds, args.output)
    log.info("wrote %d images (%d classes) to %s", ds.images.shape[0], ds.num_classes, args.output)
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config) if args.config else make_config()
    ds = load_fsds(args.data)
    with _Output(args.log) as out:
        def emit(record):
            out.write(canonical_json(record).decode("utf-8") + "\n")

        model, _ = pretrain(cfg, ds, emit)
    save_checkpoint(model, args.output, {"run": cfg})
    log.info("saved checkpoint to %s", args.output)
    return 0


def cmd_eval(args) -> int:
    model, blob = load_checkpoint(args.checkpoint)
    cfg = make_config(blob.get("run", {}))
    ds = load_fsds(args.data)
    rep = evaluate_config(model, ds, cfg, args.split, n_way=args.n_way, k_shot=args.k_shot,
                          m_query=args.m_query, episodes=args.episodes, seed=args.seed)
    log.info("%d-way %d-shot: %.4f +- %.4f over %d episodes", rep.n_way, rep.k_shot, rep.mean_acc,
             rep.ci95, rep.num_episodes)
    with _Output(args.output) as out:
        out.write(canonical_json(rep.to_dict()).decode("utf-8") + "\n")
    return 0


def cmd_ablate(args) -> int:
    base = load_config(args.config) if args.config else make_config()
    ds = load_fsds(args.data)
    cells = ablation.preset_cells(args.preset)
    if len(args.seeds) < 3:
        log.warning("ablations are meant to run with at least 3 seeds, got %d", len(args.seeds))
    rows = ablation.run_cells(ds, cells, args.seeds, base, args.episodes, args.n_way, jobs=args.jobs)
    with _Output(args.output) as out:
        out.write(ablation.to_csv(rows))
    return 0


def cmd_gradcheck(args) -> int:
    def run():
        results = checks.op_suite(args.instances, args.seed)
        if not args.ops_only:
            results.append(checks.end_to_end(args.instances, args.seed))
        return results

    if args.corrupt:
        with checks.corrupted(args.corrupt, args.factor):
            results = run()
    else:
        results = run()
    print(checks.format_report(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        log.error("gradient check failed for: %s", ", ".join(failed))
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="selfdenoise", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic few-shot dataset (FSDS file)")
    s.add_argument("--classes", type=int, default=8)
    s.add_argument("--per-class", type=int, default=100)
    s.add_argument("--novel", type=int, default=None, help="novel classes (default: half)")
    s.add_argument("--val", type=int, default=0, help="validation classes")
    s.add_argument("--image-size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_synth, parser=s)

    s = sub.add_parser("pretrain", help="train an SDNN on the base classes")
    s.add_argument("--config", help="run config JSON (defaults if omitted)")
    s.add_argument("--data", required=True)
    s.add_argument("-o", "--output", required=True, help="checkpoint path")
    s.add_argument("--log", help="JSON-lines training log (default stdout)")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("eval", help="episodic few-shot evaluation of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="novel", choices=("novel", "val", "base"))
    s.add_argument("--n-way", type=int)
    s.add_argument("--k-shot", type=int)
    s.add_argument("--m-query", type=int)
    s.add_argument("--episodes", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("-o", "--output", help="report path (default stdout)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="run an ablation grid and write a CSV table")
    s.add_argument("--data", required=True)
    s.add_argument("--preset", required=True, choices=sorted(ablation.PRESETS))
    s.add_argument("--config", help="base run config JSON")
    s.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    s.add_argument("--episodes", type=int, default=500)
    s.add_argument("--n-way", type=int, help=f"default {DEFAULTS['eval']['n_way']} or the config's")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("-o", "--output", help="CSV path (default stdout)")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op and the full loss")
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ops-only", action="store_true", help="skip the end-to-end loss check")
    s.add_argument("--corrupt", metavar="OP", help="scale OP's gradient (negative control)")
    s.add_argument("--factor", type=float, default=1.1)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FsdsError, CheckpointError, EpisodeError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
