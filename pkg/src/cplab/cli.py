"""Command-line entry point: synth, train, eval and exp subcommands."""
from __future__ import annotations

import argparse
import ast
import configparser
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import CplabError, InvalidConfigError
from .evaluate import evaluate
from .experiments import ExperimentSpec, run_experiment, to_jsonable, with_overrides
from .model import load_checkpoint, save_checkpoint
from .report import emit_report, write_rows_csv
from .store import load_dataset, store_dataset
from .synth import SynthConfig, generate_corpus
from .train import TrainConfig, select_model, train

log = logging.getLogger("cplab")


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; values are Python literals or bare strings.

    Dotted keys (``model.S = 4``) address nested settings; ``#`` starts a comment.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[config]\n" + text)
    except configparser.Error as exc:
        raise InvalidConfigError(f"malformed config: {exc}") from exc
    out = {}
    for key, raw in parser["config"].items():
        try:
            out[key] = ast.literal_eval(raw)
        except (ValueError, SyntaxError):
            out[key] = raw
    return out


def load_config(path: str | Path | None) -> dict:
    return {} if path is None else parse_config_text(Path(path).read_text())


def spec_from_config(values: dict, family: str, full: bool = False) -> ExperimentSpec:
    values = dict(values)
    if values.pop("family", family) != family:
        raise InvalidConfigError(f"spec file is for another family than {family!r}")
    spec = with_overrides(ExperimentSpec(family=family, full=full), values)
    spec.validate()
    return spec


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = with_overrides(SynthConfig(), load_config(args.config))
    if args.n_videos is not None:
        cfg = replace(cfg, n_videos=args.n_videos)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    cfg.validate()
    store_dataset(generate_corpus(cfg), args.out)
    log.info("wrote %d records to %s", cfg.n_videos, args.out)
    return 0


def cmd_train(args) -> int:
    cfg = with_overrides(TrainConfig(), load_config(args.config))
    records = load_dataset(args.data)
    result = train(cfg, records)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.log.to_csv(out / "train_log.csv")
    extra = {"input_size": cfg.input_size, "train_config": to_jsonable(cfg)}
    for i in range(len(result.checkpoints)):
        save_checkpoint(out / f"epoch_{i + 1:03d}.pt", result.model_at(i), {**extra, "epoch": i + 1})
    best, _ = select_model(result.checkpoints, result.log)
    save_checkpoint(out / "model.pt", result.model_at(best), {**extra, "epoch": best + 1})
    (out / "train.json").write_text(json.dumps(to_jsonable(
        {"selected_epoch": best + 1, **result.log.to_dict()}), indent=1))
    log.info("selected epoch %d of %d", best + 1, cfg.epochs)
    return 0


def cmd_eval(args) -> int:
    model, extra = load_checkpoint(args.ckpt)
    size = args.input_size or extra.get("input_size", 128)
    report = evaluate(model, load_dataset(args.data), input_size=size)
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_jsonable(report.to_dict()), indent=1))
    write_rows_csv(path.with_suffix(".csv"), report.windows)
    print(json.dumps(to_jsonable(report.summary())))
    return 0


def cmd_exp(args) -> int:
    spec = spec_from_config(load_config(args.spec), args.family, full=args.full)
    result = run_experiment(spec)
    emit_report(result, args.out)
    failed = [row["key"] for row in result.rows if "error" in row]
    if failed:
        log.error("%d cell(s) failed: %s", len(failed), ", ".join(failed))
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cplab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--n-videos", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a stored dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a stored dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--input-size", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("exp", help="run an experiment family")
    p.add_argument("family", choices=("label_ratio", "desync", "noise", "stats", "ablation",
                                      "saliency"))
    p.add_argument("--spec")
    p.add_argument("--out", required=True)
    p.add_argument("--full", action="store_true", help="use the full-size sweep grids")
    p.set_defaults(func=cmd_exp)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CplabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
