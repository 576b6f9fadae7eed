"""Command-line entry point: ``umfa {train,stylize,eval,bench,gradcheck}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from umfa import imageio
from umfa.checkpoint import load_checkpoint
from umfa.losses import LossWeights
from umfa.net import Aggregation, init_params, stylize
from umfa.vgg import LossNetwork, load_weights

log = logging.getLogger("umfa")

AGG_CHOICES = [a.value for a in Aggregation]


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _size16(text: str) -> int:
    value = int(text)
    if value < 16 or value % 16:
        lo = max(16, value // 16 * 16)
        hi = lo + 16
        nearest = lo if value - lo <= hi - value else hi
        raise argparse.ArgumentTypeError(
            f"size {value} is not a positive multiple of 16; nearest valid size is {nearest}"
        )
    return value


def _sizes(text: str) -> list[int]:
    return [_size16(s) for s in text.split(",") if s.strip()]


def _echo(command: str, args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    print(f"umfa {command}: config {json.dumps(resolved, default=str, sort_keys=True)}", file=sys.stderr)


def _loss_network(args) -> LossNetwork:
    if args.loss_weights:
        return load_weights(args.loss_weights)
    return LossNetwork.random(args.loss_seed)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    from umfa.train import TrainConfig, train

    config = TrainConfig(
        data_dir=args.data,
        out=args.out,
        epochs=args.epochs,
        image_size=args.size,
        lr=args.lr,
        weights=LossWeights(args.alpha, args.beta, args.gamma),
        strategy=args.agg,
        seed=args.seed,
        batch_size=args.batch_size,
        checkpoint_every=args.checkpoint_every,
        log_path=args.log or f"{args.out}.log.jsonl",
        width=args.width,
        loss_weights=args.loss_weights,
        loss_seed=args.loss_seed,
        reshuffle=args.reshuffle,
        max_steps=args.max_steps,
    )
    log.info("train resolved config %s", json.dumps(config.to_dict(), sort_keys=True))
    ck = train(config, resume=args.resume)
    print(json.dumps({"checkpoint": str(ck.path), "step": ck.step, "log": config.log_path}))
    return 0


def _fit16(t, what: str):
    h, w = t.shape[2:]
    if h % 16 or w % 16:
        raise UsageError(
            f"{what} is {w}x{h}, not divisible by 16; pass --size (e.g. --size {max(16, min(h, w) // 16 * 16)})"
        )
    return t


def cmd_stylize(args) -> int:
    ck = load_checkpoint(args.model)
    strategy = Aggregation.parse(args.agg or ck.config.get("strategy", "mfa"))
    content = imageio.load_image(args.content)
    style = imageio.load_image(args.style)
    if args.size:
        content = imageio.resize_center(content, args.size)
        style = imageio.resize_center(style, args.size)
    else:
        content = _fit16(content, "content image")
        h, w = style.shape[2:]
        if h % 16 or w % 16:
            style = imageio.resize_center(style, max(16, min(h, w) // 16 * 16))
    out = stylize(content, style, ck.params, strategy)
    imageio.save_image(out, args.out)
    print(json.dumps({"output": str(args.out), "height": out.shape[2], "width": out.shape[3],
                      "strategy": strategy.value}))
    return 0


def cmd_eval(args) -> int:
    from umfa import metrics

    phi = _loss_network(args)
    if args.dir:
        report = metrics.evaluate_dir(args.dir, phi)
    else:
        if not (args.content and args.style and args.output):
            raise UsageError("eval needs --content, --style and --output (or --dir)")
        report = metrics.evaluate(
            imageio.load_image(args.content),
            imageio.load_image(args.style),
            imageio.load_image(args.output),
            phi,
        )
    print(json.dumps(report))
    return 0


def cmd_bench(args) -> int:
    from umfa import metrics

    if args.model:
        ck = load_checkpoint(args.model)
        params = ck.params
        strategy = Aggregation.parse(args.agg or ck.config.get("strategy", "mfa"))
    else:
        params = init_params(args.width, args.seed)
        strategy = Aggregation.parse(args.agg or "mfa")
    rows = metrics.bench(params, args.sizes, runs=args.runs, strategy=strategy, threads=args.threads)
    print(metrics.format_bench(rows))
    print(json.dumps(rows))
    if args.json:
        Path(args.json).write_text(json.dumps(rows, indent=2) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    from umfa.gradcheck import run_suite

    results = run_suite(model=not args.primitives_only)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_loss_net_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--loss-weights", metavar="MANIFEST", help="external loss-network weight manifest")
    p.add_argument("--loss-seed", type=int, default=0, help="seed of the random loss network (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="umfa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a directory of images")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="CKPT")
    p.add_argument("--epochs", type=_positive_int, default=2)
    p.add_argument("--size", type=_size16, default=256)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--alpha", type=float, default=0.8)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--agg", choices=AGG_CHOICES, default="mfa")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", metavar="PATH", help="JSON-lines log (default: CKPT.log.jsonl)")
    p.add_argument("--width", type=_positive_int, default=32, help="stem width (default 32)")
    p.add_argument("--batch-size", type=_positive_int, default=1)
    p.add_argument("--checkpoint-every", type=int, default=0, metavar="STEPS")
    p.add_argument("--max-steps", type=_positive_int)
    p.add_argument("--resume", metavar="CKPT")
    p.add_argument("--reshuffle", action="store_true", help="re-pair images every epoch")
    _add_loss_net_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("stylize", help="stylize one content image")
    p.add_argument("--model", required=True, metavar="CKPT")
    p.add_argument("--content", required=True, metavar="IMG")
    p.add_argument("--style", required=True, metavar="IMG")
    p.add_argument("--out", required=True, metavar="IMG")
    p.add_argument("--size", type=_size16)
    p.add_argument("--agg", choices=AGG_CHOICES, help="override the checkpoint's strategy")
    p.set_defaults(func=cmd_stylize)

    p = sub.add_parser("eval", help="SSIM to content and Gram loss to style")
    p.add_argument("--content", metavar="IMG")
    p.add_argument("--style", metavar="IMG")
    p.add_argument("--output", metavar="IMG")
    p.add_argument("--dir", metavar="DIR", help="directory of <name>_content/_style/_output triples")
    _add_loss_net_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time stylize at several image sizes")
    p.add_argument("--model", metavar="CKPT", help="checkpoint (default: freshly initialized model)")
    p.add_argument("--sizes", type=_sizes, default=[256, 512, 1024])
    p.add_argument("--runs", type=_positive_int, default=5)
    p.add_argument("--threads", type=_positive_int, default=1)
    p.add_argument("--agg", choices=AGG_CHOICES)
    p.add_argument("--width", type=_positive_int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", metavar="PATH", help="also write the rows to this file")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--primitives-only", action="store_true")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    _echo(args.command, args)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"umfa {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"umfa {args.command}: error: {exc}", file=sys.stderr)
        return 1


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
