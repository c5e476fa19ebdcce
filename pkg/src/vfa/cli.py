"""Command-line entry point: ``vfa <subcommand> ...``.

Exit status is 0 on success, 1 on runtime or data errors and 2 on usage
errors. Diagnostics go to stderr; results go to stdout or to files.
The default seed comes from ``$VFA_SEED`` (0 when unset).
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attention import ConfigError
from .cost import CONVENTIONS, cost_rows, format_cost_table
from .data import procedural_anchors
from .io import (FormatError, dump_json, load_checkpoint, load_json, read_frames,
                 save_checkpoint, write_frames)
from .lmm import LEVELS, softmax_score
from .metrics import DataError, format_table, run_benchmark
from .model import ModelConfig, predict
from .synth import (SynthSpec, apply_schedule, emit_ranked_commands, plan_schedule)
from .train import (TrainConfig, TrainState, TrainingError, build_chains, chain_scores,
                    finetune, rank_accuracy, train_joint, train_rank, write_log)

log = logging.getLogger("vfa")

SEED_ENV = "VFA_SEED"


class UsageError(Exception):
    """Bad arguments detected after parsing; maps to exit status 2."""


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"${SEED_ENV} must be an integer, got {raw!r}") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _window(text: str) -> tuple[int, int, int]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"window must be D,S,S, got {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"window must be D,S,S, got {text!r}")
    return vals


def _positive(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return n


# ---------------------------------------------------------------- helpers


def _video_entries(path: Path) -> list[tuple[str, Path]]:
    """(id, path) for every frames directory or .npy file under ``path``, by name."""
    if not path.is_dir():
        raise FileNotFoundError(f"{path}: not a directory")
    out = []
    for p in sorted(path.iterdir()):
        if (p.is_dir() and (p / "manifest.json").is_file()) or p.suffix == ".npy":
            out.append((p.stem if p.suffix == ".npy" else p.name, p))
    if not out:
        raise DataError(f"{path}: no videos found")
    return out


def _load_videos(path: Path) -> tuple[list[str], list[np.ndarray]]:
    entries = _video_entries(path)
    return [i for i, _ in entries], [read_frames(p) for _, p in entries]


def _read_labels(path: Path) -> dict[str, float]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"video_id", "score"} <= set(reader.fieldnames):
            raise DataError(f"{path}: expected columns video_id,score")
        return {row["video_id"]: float(row["score"]) for row in reader}


def _run_config(path: Path | None) -> tuple[ModelConfig, dict]:
    if path is None:
        return ModelConfig(), {}
    doc = load_json(path)
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    unknown = set(doc) - {"model", "train"}
    if unknown:
        raise UsageError(f"{path}: unknown top-level keys {sorted(unknown)}")
    try:
        model = ModelConfig.from_dict(doc.get("model", {}))
    except (ConfigError, TypeError) as exc:
        raise UsageError(f"{path}: {exc}") from exc
    return model, dict(doc.get("train", {}))


# ---------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    try:
        spec = SynthSpec(frames=args.frames, drop_rates=tuple(args.rates), intervals=args.m, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    schedules = [plan_schedule(spec, k) for k in range(1, spec.levels + 1)]
    dump_json({"seed": args.seed, "frames": args.frames, "drop_rates": list(spec.drop_rates),
               "intervals": args.m, "schedules": [s.to_dict() for s in schedules]},
              out / "schedules.json")
    commands = emit_ranked_commands(schedules, "input.mp4", "level_{level}.mp4")
    (out / "commands.txt").write_text("".join(c + "\n" for c in commands))
    if args.video:
        anchor = read_frames(Path(args.video))
        if anchor.shape[0] != args.frames:
            raise DataError(f"{args.video}: has {anchor.shape[0]} frames, --frames says {args.frames}")
        write_frames(out / "level_0", anchor)
        for s in schedules:
            write_frames(out / f"level_{s.level}", apply_schedule(anchor, s))
    if args.procedural:
        anchors = procedural_anchors(args.procedural, seed=args.seed, frames=args.frames,
                                     height=args.height, width=args.width)
        for i, a in enumerate(anchors):
            write_frames(out / "anchors" / f"anchor_{i:03d}", a)
    print(out / "schedules.json")
    return 0


def cmd_train(args) -> int:
    model_cfg, train_over = _run_config(Path(args.config) if args.config else None)
    train_over.setdefault("seed", args.seed)
    train_over["stage"] = args.stage
    if args.epochs is not None:
        train_over["epochs"] = args.epochs
    try:
        cfg = TrainConfig.from_dict(train_over)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"train config: {exc}") from exc

    state = None
    if args.init:
        params, stored, meta = load_checkpoint(args.init)
        if args.config and stored != model_cfg:
            raise UsageError("--init checkpoint was saved for a different model config")
        model_cfg = stored
        state = TrainState(params, stored, epoch=int(meta.get("epochs_trained", 0)))

    ids, videos = _load_videos(Path(args.anchors))
    if args.stage == "rank":
        state = train_rank(videos, cfg, config=model_cfg, state=state)
    else:
        if not args.labels:
            raise UsageError(f"--labels is required for stage {args.stage}")
        labels = _read_labels(Path(args.labels))
        missing = [i for i in ids if i not in labels]
        if missing:
            raise DataError(f"no label for {missing[:5]}")
        labeled = [(v, labels[i]) for i, v in zip(ids, videos)]
        if args.stage == "finetune":
            if state is None:
                state = TrainState.fresh(model_cfg, cfg.seed)
            state = finetune(labeled, cfg, state)
        else:
            state = train_joint(labeled, cfg, config=model_cfg, state=state)

    final = state.history[-1]["loss"] if state.history else None
    meta = {"seed": cfg.seed, "stage": cfg.stage, "train": cfg.to_dict(), "steps": state.step,
            "epochs_trained": state.epoch, "final_loss": final, "videos": len(videos)}
    save_checkpoint(args.out, state.params, state.config, meta)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.jsonl")
    write_log(state.history, log_path)
    print(json.dumps({"checkpoint": str(args.out), "log": str(log_path), "seed": cfg.seed,
                      "final_loss": final}, sort_keys=True))
    return 0


def cmd_score(args) -> int:
    params, config, _ = load_checkpoint(args.ckpt)
    if args.config:
        wanted, _ = _run_config(Path(args.config))
        if wanted != config:
            raise UsageError("--config does not match the checkpoint's model config")
    scores = {}
    for v in args.video:
        path = Path(v)
        scores[path.stem if path.suffix == ".npy" else path.name] = float(predict(read_frames(path), params, config)[0])
    for vid, s in scores.items():
        print(f"{vid},{s!r}")
    if args.out:
        dump_json({"seed": args.seed, "checkpoint": str(args.ckpt), "scores": scores}, args.out)
    return 0


def cmd_eval(args) -> int:
    if args.ckpt:
        return _eval_rank(args)
    if not args.pred or not args.mos:
        raise UsageError("eval needs --pred and --mos (or --ckpt and --anchors)")
    report, warnings = run_benchmark(args.pred, args.mos, None, logistic=args.logistic)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    doc = {"seed": args.seed, "logistic": args.logistic, "methods": report, "warnings": warnings}
    if args.out:
        dump_json(doc, args.out)
        Path(args.out).with_suffix(".txt").write_text(format_table(report))
    sys.stdout.write(format_table(report))
    return 0


def _eval_rank(args) -> int:
    if not args.anchors:
        raise UsageError("--anchors is required with --ckpt")
    params, config, meta = load_checkpoint(args.ckpt)
    train_cfg = dict(meta.get("train", {}))
    if args.rates:
        train_cfg["drop_rates"] = args.rates
    train_cfg["seed"] = args.seed
    cfg = TrainConfig.from_dict(train_cfg)
    ids, videos = _load_videos(Path(args.anchors))
    chains = build_chains(videos, cfg, seed_offset=10_000_000)
    scores = chain_scores(params, config, chains)
    doc = {"seed": args.seed, "drop_rates": list(cfg.drop_rates), "anchors": len(ids),
           "rank_accuracy": rank_accuracy(scores),
           "scores": {vid: row.tolist() for vid, row in zip(ids, scores)}}
    if args.out:
        dump_json(doc, args.out)
    print(json.dumps({"rank_accuracy": doc["rank_accuracy"], "anchors": len(ids), "seed": args.seed}))
    return 0


def cmd_lmm_score(args) -> int:
    if bool(args.logits) == bool(args.csv):
        raise UsageError("give exactly one of --logits or --csv")
    if args.logits:
        if len(args.logits) != len(LEVELS):
            raise UsageError(f"--logits needs {len(LEVELS)} values, got {len(args.logits)}")
        print(repr(softmax_score(np.array(args.logits))))
        return 0
    with open(args.csv, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{args.csv}: empty file")
    header, body = rows[0], rows[1:]
    cols = [header.index(name) for name in LEVELS] if set(LEVELS) <= set(header) else None
    if cols is None:
        raise DataError(f"{args.csv}: header must contain columns {','.join(LEVELS)}")
    try:
        logits = np.array([[float(r[c]) for c in cols] for r in body], dtype=np.float64).reshape(-1, len(LEVELS))
    except (ValueError, IndexError) as exc:
        raise DataError(f"{args.csv}: bad logit row: {exc}") from exc
    scores = softmax_score(logits) if len(body) else np.empty(0)
    out = open(args.out, "w", newline="") if args.out else contextlib.nullcontext(sys.stdout)
    with out as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header + ["score"])
        for r, s in zip(body, np.atleast_1d(scores)):
            w.writerow(r + [repr(float(s))])
    return 0


def cmd_cost(args) -> int:
    configs = []
    try:
        for path in args.config or []:
            configs.append(_run_config(Path(path))[0])
        base = ModelConfig.paper() if args.preset == "paper" else ModelConfig()
        if args.frames:
            base = ModelConfig.from_dict({**base.to_dict(), "frames": args.frames})
        for w in args.window or []:
            configs.append(ModelConfig.from_dict({**base.to_dict(), "window": list(w)}))
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    if not configs:
        raise UsageError("cost needs at least one --config or --window")
    rows = cost_rows(configs, args.convention)
    sys.stdout.write(format_cost_table(rows))
    if args.out:
        dump_json({"seed": args.seed, "convention": args.convention, "rows": rows}, args.out)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help=f"random seed (default ${SEED_ENV} or 0)")
    common.add_argument("--threads", type=_positive, default=None, help="cap BLAS threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="vfa", description="Video fluency assessment toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("synth", parents=[common], help="plan stutter schedules and optional videos")
    s.add_argument("--frames", type=_positive, required=True)
    s.add_argument("--rates", type=_floats, required=True, help="comma-separated drop rates")
    s.add_argument("--m", type=_positive, default=5, help="spans per schedule")
    s.add_argument("--out", required=True)
    s.add_argument("--video", help="anchor frames directory or .npy to synthesize from")
    s.add_argument("--procedural", type=int, default=0, help="also write this many procedural anchors")
    s.add_argument("--height", type=_positive, default=56)
    s.add_argument("--width", type=_positive, default=56)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="rank learning, fine-tuning or joint training")
    t.add_argument("--stage", choices=("rank", "finetune", "joint"), required=True)
    t.add_argument("--config", help="JSON with optional 'model' and 'train' objects")
    t.add_argument("--anchors", required=True, help="directory of frames directories or .npy files")
    t.add_argument("--labels", help="CSV video_id,score for finetune/joint")
    t.add_argument("--init", help="checkpoint to continue from")
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="JSONL training log (default <out>.log.jsonl)")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("score", parents=[common], help="predict fluency scores")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--config")
    c.add_argument("--video", nargs="+", required=True)
    c.add_argument("--out", help="write scores as JSON")
    c.set_defaults(func=cmd_score)

    e = sub.add_parser("eval", parents=[common], help="correlation report or rank accuracy")
    e.add_argument("--pred", action="append", help="prediction CSV video_id,score (repeatable)")
    e.add_argument("--mos", help="MOS CSV")
    e.add_argument("--logistic", action="store_true", help="fit a 4-parameter logistic before PLCC")
    e.add_argument("--ckpt", help="evaluate adjacent-pair rank accuracy of this checkpoint")
    e.add_argument("--anchors", help="held-out anchors for --ckpt")
    e.add_argument("--rates", type=_floats)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("lmm-score", parents=[common], help="level-token softmax score")
    m.add_argument("--logits", type=_floats, help=",".join(LEVELS) + " logits")
    m.add_argument("--csv", help="CSV with one column per level; a score column is appended")
    m.add_argument("--out")
    m.set_defaults(func=cmd_lmm_score)

    k = sub.add_parser("cost", parents=[common], help="GFLOPs and parameter table")
    k.add_argument("--config", action="append", help="run config JSON (repeatable)")
    k.add_argument("--window", type=_window, action="append", help="D,S,S on the preset (repeatable)")
    k.add_argument("--preset", choices=("paper", "toy"), default="paper")
    k.add_argument("--frames", type=_positive)
    k.add_argument("--convention", choices=CONVENTIONS, default="fma2")
    k.add_argument("--out")
    k.set_defaults(func=cmd_cost)
    return p


def _limit_threads(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.seed is None:
            args.seed = _default_seed()
        with _limit_threads(args.threads):
            return args.func(args)
    except UsageError as exc:
        print(f"vfa {args.command}: {exc}", file=sys.stderr)
        return 2
    except (DataError, FormatError, TrainingError, ValueError, OSError, FloatingPointError) as exc:
        print(f"vfa {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
