"""Command-line entry point: ``direcformer <subcommand> [flags]``.

Machine-readable results go to stdout (CSV or key=value) or to files; logs and
the resolved configuration go to stderr.  Exit status is 0 on success, 1 on
domain errors (bad configuration, mismatched shapes, failed checks) and 2 on
I/O errors.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import tensor as tn
from .dft import DFTFormatError
from .losses import LossWeights
from .model import ConfigError, load_checkpoint
from .order import order_accuracy, recover_order
from .permutations import generate_permutation_set, permute_frames, save_catalogue
from .synth import DatasetSpec, generate_dataset, read_manifest
from .training import (TABLE1_ROWS, TrainConfig, TrainingError, ablation_grid, evaluate,
                       evaluation_permutations, format_table, grid_rows, load_split, thread_limit,
                       train)

log = logging.getLogger("direcformer")

EXIT_OK, EXIT_DOMAIN, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _echo(title: str, pairs: dict) -> None:
    """Resolved configuration, one key=value per line on stderr."""
    print(f"# {title}", file=sys.stderr)
    for k, v in pairs.items():
        print(f"# {k}={v}", file=sys.stderr)


def _pairs(text: str) -> dict:
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


def _ranks(order) -> str:
    return " ".join(str(int(v) + 1) for v in order)


# -- subcommands --------------------------------------------------------------
def cmd_synth(args) -> int:
    spec = DatasetSpec.from_text(Path(args.config).read_text()) if args.config else DatasetSpec()
    over = {k: v for k, v in (("seed", args.seed), ("n_train", args.n_train), ("n_val", args.n_val),
                              ("n_test", args.n_test), ("noise", args.noise),
                              ("background", args.background), ("T", args.frames)) if v is not None}
    if args.size is not None:
        over.update(H=args.size, W=args.size)
    spec = replace(spec, **over)
    _echo("synth", _pairs(spec.to_text()))
    m = generate_dataset(spec, args.out)
    print(f"clips={len(m.rows)}")
    print(f"manifest={Path(args.out) / 'manifest.txt'}")
    return EXIT_OK


def cmd_permgen(args) -> int:
    s = generate_permutation_set(args.t, args.count, args.objective, args.seed, args.pool)
    _echo("permgen", {"T": args.t, "count": args.count, "seed": args.seed,
                      "objective": args.objective, "pool": args.pool})
    if args.out:
        save_catalogue(args.out, s)
    else:
        print(s.header())
        for p in s.perms:
            print(_ranks(p))
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    over = {}
    for key in ("data", "seed", "epochs", "lr", "batch_size", "protocol", "eval_seed", "perm_catalogue",
                "perm_count"):
        value = getattr(args, key, None)
        if value is not None:
            over[key] = value
    model = cfg.model
    if getattr(args, "time_mode", None):
        model = replace(model, time_mode=args.time_mode)
    if getattr(args, "space_mode", None):
        model = replace(model, space_mode=args.space_mode)
    w = cfg.weights
    w = LossWeights(w.cls if args.lambda_cls is None else args.lambda_cls,
                    w.ord if args.lambda_ord is None else args.lambda_ord,
                    w.self_ if args.lambda_self is None else args.lambda_self)
    cfg = replace(cfg, model=model, weights=w, **over)
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    cfg = _train_config(args)
    _echo("train", _pairs(cfg.to_text()))
    res = train(cfg, args.out)
    print(f"best_epoch={res.best_epoch}")
    print(f"best_val_top1={res.best_top1:.4f}")
    print(f"checkpoint={res.best_checkpoint}")
    print(f"metrics={res.metrics_path}")
    print(f"wall_s={res.wall_s:.1f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    _echo("eval", {"checkpoint": args.checkpoint, "data": args.data, "split": args.split,
                   "protocol": args.protocol, "eval_seed": args.eval_seed or ck.meta.get("eval_seed"),
                   **{f"model.{k}": v for k, v in _pairs(ck.model.cfg.to_text()).items()}})
    rep = evaluate(ck, args.data, args.split, args.protocol, args.eval_seed)
    for k, v in rep.row().items():
        print(f"{k}={v:.4f}")
    print(f"n={rep.n}")
    print("confusion=" + ";".join(" ".join(str(int(v)) for v in row) for row in rep.confusion))
    return EXIT_OK


def cmd_order_recover(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    if "perm_set" not in ck.extras:
        raise ConfigError("checkpoint carries no permutation catalogue")
    from .permutations import PermutationSet
    perms = ck.extras["perm_set"].astype(np.int64)
    pset = PermutationSet(perms, perms.shape[1], 0)
    seed = args.eval_seed if args.eval_seed is not None else int(ck.meta.get("eval_seed", 1234))
    _echo("order-recover", {"checkpoint": args.checkpoint, "data": args.data, "split": args.split,
                            "eval_seed": seed, "time_mode": ck.model.cfg.time_mode})
    data = load_split(read_manifest(args.data), args.split)
    n = len(data.labels) if args.limit is None else min(args.limit, len(data.labels))
    _, orders = evaluation_permutations(seed, len(data.labels), pset)
    orders = orders[:n]
    cfg = ck.model.cfg
    H, W = data.pixels.shape[2:4]
    y, x = (H - cfg.height) // 2, (W - cfg.width) // 2
    view = data.pixels[:n, :, y:y + cfg.height, x:x + cfg.width]
    print("clip_id,true_o,recovered_o,path_weight,order_acc")
    scores = []
    with tn.no_grad():
        for s in range(0, n, 32):
            _, _, trace = ck.model(permute_frames(view[s:s + 32], orders[s:s + 32]))
            last = trace.temporal[-1].data
            for b in range(last.shape[0]):
                j = s + b
                r = recover_order(last[b], cfg.time_mode)
                acc = order_accuracy(r.order, orders[j])
                scores.append(acc)
                print(f"{data.clip_ids[j]},{_ranks(orders[j])},{_ranks(r.order)},{r.path_weight:.6f},{acc:.2f}")
    print(f"summary,,,,{np.mean(scores):.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import TOLERANCE, run_suite

    _echo("gradcheck", {"seed": args.seed, "points": args.points, "coords": args.coords,
                        "tolerance": TOLERANCE})
    results, wall = run_suite(args.points, args.seed, args.coords)
    print("op,worst_rel_error,ok")
    for r in results:
        print(f"{r.name},{r.worst:.3e},{int(r.ok)}")
    log.info("gradient suite finished in %.1f s", wall)
    return EXIT_OK if all(r.ok for r in results) else EXIT_DOMAIN


def cmd_ablate(args) -> int:
    cfg = _train_config(args)
    rows = list(TABLE1_ROWS) if args.table1 else grid_rows(loss_variants=args.losses)
    _echo("ablate", {**_pairs(cfg.to_text()), "rows": len(rows)})
    results = ablation_grid(cfg, rows, args.out, args.split)
    sys.stdout.write(format_table(results))
    same = len({tuple(r.batch_hashes) for r in results}) == 1
    print(f"shared_batch_order={int(same)}")
    return EXIT_OK


def _pgm(path: Path, W: np.ndarray) -> None:
    img = np.clip(np.rint((np.clip(W, -1, 1) + 1) * 127.5), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def cmd_visualize(args) -> int:
    from .order import temporal_adjacency

    ck = load_checkpoint(args.checkpoint)
    cfg = ck.model.cfg
    data = load_split(read_manifest(args.data), args.split)
    hit = np.flatnonzero(data.clip_ids == args.clip)
    if not len(hit):
        raise ConfigError(f"clip {args.clip} is not in split {args.split!r}")
    j = int(hit[0])
    H, W = data.pixels.shape[2:4]
    y, x = (H - cfg.height) // 2, (W - cfg.width) // 2
    clip = data.pixels[j:j + 1, :, y:y + cfg.height, x:x + cfg.width]
    _echo("visualize", {"checkpoint": args.checkpoint, "data": args.data, "split": args.split,
                        "clip": args.clip, "time_mode": cfg.time_mode})
    with tn.no_grad():
        _, _, trace = ck.model(clip)
    adj = temporal_adjacency(trace.temporal[-1].data[0], cfg.time_mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = out / f"temporal_adjacency_{args.clip}"
    np.savetxt(f"{stem}.csv", adj, delimiter=",", fmt="%.8f")
    _pgm(Path(f"{stem}.pgm"), adj)
    Path(f"{stem}.cfg").write_text(f"checkpoint={args.checkpoint}\nclip={args.clip}\nsplit={args.split}\n"
                                   + ck.model.cfg.to_text())
    print(f"csv={stem}.csv")
    print(f"pgm={stem}.pgm")
    return EXIT_OK


# -- parser -------------------------------------------------------------------
def _train_flags(p) -> None:
    p.add_argument("--config", help="training config file (key=value)")
    p.add_argument("--data", help="dataset directory or manifest")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--protocol", choices=["center", "three-crop"])
    p.add_argument("--eval-seed", dest="eval_seed", type=int)
    p.add_argument("--perm-catalogue", dest="perm_catalogue")
    p.add_argument("--perm-count", dest="perm_count", type=int)
    p.add_argument("--time-mode", dest="time_mode", choices=["softmax", "cosine"])
    p.add_argument("--space-mode", dest="space_mode", choices=["softmax", "cosine"])
    p.add_argument("--lambda-cls", dest="lambda_cls", type=float)
    p.add_argument("--lambda-ord", dest="lambda_ord", type=float)
    p.add_argument("--lambda-self", dest="lambda_self", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="direcformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a DirectedMotion dataset")
    p.add_argument("--config", help="dataset spec file (key=value)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-val", dest="n_val", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--background", choices=["blank", "texture"])
    p.add_argument("--frames", type=int)
    p.add_argument("--size", type=int, help="frame height and width")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("permgen", help="generate a permutation catalogue")
    p.add_argument("--t", type=int, default=8)
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--objective", choices=["min-hamming", "max-hamming"], default="min-hamming")
    p.add_argument("--pool", type=int, default=1000)
    p.add_argument("--out", help="catalogue file (default: stdout)")
    p.set_defaults(func=cmd_permgen)

    p = sub.add_parser("train", help="train a model")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--protocol", choices=["center", "three-crop"], default="center")
    p.add_argument("--eval-seed", dest="eval_seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("order-recover", help="Hamilton-path frame order recovery per clip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--eval-seed", dest="eval_seed", type=int)
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_order_recover)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=20)
    p.add_argument("--coords", type=int, default=6)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and compare attention-mode cells")
    _train_flags(p)
    p.add_argument("--split", default="test")
    p.add_argument("--losses", action="store_true", help="add L_ord / L_self variants per cell")
    p.add_argument("--table1", action="store_true", help="the eight-row comparison layout")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("visualize", help="export last-block temporal adjacency (CSV + PGM)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--clip", type=int, required=True, help="clip id")
    p.add_argument("--split", default="test")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_DOMAIN
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with thread_limit():
            return args.func(args)
    except (DFTFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, TrainingError, ValueError, KeyError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
