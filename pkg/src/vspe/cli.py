"""Command-line entry point.

Usage::

    vspe <command> [--config run.yaml] [--key.path value ...] [--seed N]

Commands: gen-data, train, infer, evaluate, gradcheck, oracle-suite.
Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import RunConfig, apply_overrides, build_run_config, load_config_dict, parse_value
from .errors import ConfigError, DataError, NumericError, VspeError
from .evaluation import kfold_split, results_record, write_results
from .patches import read_predictions, write_predictions
from .synth import dataset_digest, generate_dataset, read_dataset, write_dataset

COMMANDS = ("gen-data", "train", "infer", "evaluate", "gradcheck", "oracle-suite")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vspe", description="Volumetric set-prediction detectors.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="run seed (gen-data: synth.seed; otherwise train.seed and model.init_seed)")
    p.add_argument("--cases", type=int, help="number of cases (gen-data) ")
    p.add_argument("--out", help="output directory or file, depending on the command")
    p.add_argument("--data", help="dataset directory (overrides data.data_dir)")
    p.add_argument("--checkpoint", help="checkpoint file (infer; default <out_dir>/checkpoint.vspe)")
    p.add_argument("--predictions", help="prediction file (evaluate)")
    p.add_argument("--split", choices=("val", "train", "all"), default="val",
                   help="which cases infer/evaluate use (default: the held-out fold)")
    p.add_argument("--resume", action="store_true", help="continue training from <out_dir>/checkpoint.vspe")
    p.add_argument("--seeds", type=int, default=100, help="randomized seeds for gradcheck")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def parse_overrides(extra: list[str]) -> dict[str, object]:
    """``["--train.base_lr", "1e-3", ...]`` -> ``{"train.base_lr": 0.001}``."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognised argument {tok!r}; config overrides look like --section.key value")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override {tok} needs a value")
            value = extra[i + 1]
            i += 2
        out[key] = parse_value(value)
    return out


def resolve_config(args, extra: list[str]) -> RunConfig:
    d = load_config_dict(args.config) if args.config else {}
    overrides = parse_overrides(extra)
    if args.seed is not None:
        if args.command == "gen-data":
            overrides["synth.seed"] = args.seed
        else:
            overrides["train.seed"] = args.seed
            overrides["model.init_seed"] = args.seed
    if args.cases is not None:
        overrides["data.num_cases"] = args.cases
    if args.data is not None:
        overrides["data.data_dir"] = args.data
    return build_run_config(apply_overrides(d, overrides))


def load_cases(run: RunConfig):
    d = run.data.data_dir
    if d is not None and (Path(d) / "manifest.json").exists():
        cases = read_dataset(d)
    elif d is not None:
        raise DataError(f"no dataset at {d} (run gen-data first)")
    else:
        cases = generate_dataset(run.synth, run.data.num_cases)
    return cases


def split_cases(run: RunConfig, cases, split: str):
    if split == "all":
        return cases
    ids = [v.id for v, _ in cases]
    train_ids, val_ids = kfold_split(ids, run.data.folds, run.data.split_seed)[run.data.fold]
    chosen = set(val_ids if split == "val" else train_ids)
    return [c for c in cases if c[0].id in chosen]


def cmd_gen_data(args, run: RunConfig, echo) -> int:
    cases = generate_dataset(run.synth, run.data.num_cases)
    out = args.out or run.data.data_dir
    if out:
        digest = write_dataset(cases, out, run.synth)
        echo(f"wrote {len(cases)} cases to {out}")
    else:
        digest = dataset_digest(cases)
    echo(f"digest={digest}")
    return 0


def cmd_train(args, run: RunConfig, echo) -> int:
    from .training import Trainer, write_losses

    cases = load_cases(run)
    train_cases = split_cases(run, cases, "train")
    val_cases = split_cases(run, cases, "val")
    out = Path(args.out or run.out_dir)
    trainer = Trainer(run, train_cases, val_cases, echo=echo)
    if args.resume:
        trainer.resume(out / "checkpoint.vspe")
    elif (out / "train.log").exists():
        (out / "train.log").unlink()
    result = trainer.fit(out)
    write_losses(result, out / "losses.json")
    return 0


def _load_model(run: RunConfig, path):
    from . import checkpoint
    from .models.detectors import build_model

    model = build_model(run.model)
    checkpoint.load_model(path, model)
    return model


def cmd_infer(args, run: RunConfig, echo) -> int:
    from .training import predict_cases

    cases = split_cases(run, load_cases(run), args.split)
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(run.out_dir) / "checkpoint.vspe"
    model = _load_model(run, ckpt)
    preds = predict_cases(model, cases, run)
    out = Path(args.out) if args.out else Path(run.out_dir) / "predictions.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(preds, out)
    echo(f"wrote predictions for {len(preds)} volumes to {out}")
    return 0


def cmd_evaluate(args, run: RunConfig, echo) -> int:
    from .training import evaluate_predictions

    cases = split_cases(run, load_cases(run), args.split)
    path = Path(args.predictions) if args.predictions else Path(run.out_dir) / "predictions.json"
    preds = read_predictions(path)
    missing = [v.id for v, _ in cases if v.id not in preds]
    if missing:
        raise DataError(f"predictions missing for {len(missing)} volume(s), e.g. {missing[0]}")
    result = evaluate_predictions(preds, cases, run.eval.iou_threshold)
    for k, ap in sorted(result.per_class.items()):
        echo(f"class={k} ap={ap:.6f}")
    echo(f"mAP@{run.eval.iou_threshold:g}={result.map:.6f}")
    out = Path(args.out) if args.out else path.with_name("results.json")
    write_results(results_record([(run.data.fold, result, len(cases))]), out)
    return 0


def _report(results, echo) -> int:
    ok = True
    for r in results:
        echo(f"{'PASS' if r.passed else 'FAIL'} {r.name} seeds={r.seeds} max_error={r.max_error:.3e}")
        ok &= r.passed
    return ok


def cmd_gradcheck(args, run: RunConfig, echo) -> int:
    from .verify import run_gradcheck

    results, seconds = run_gradcheck(args.seeds)
    ok = _report(results, echo)
    echo(f"gradcheck {'passed' if ok else 'failed'} in {seconds:.1f}s")
    if not ok:
        raise NumericError("gradient check failed")
    return 0


def cmd_oracle_suite(args, run: RunConfig, echo) -> int:
    from .verify import run_oracle_suite

    ok = _report(run_oracle_suite(), echo)
    if not ok:
        raise NumericError("oracle comparison failed")
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "oracle-suite": cmd_oracle_suite,
}


def main(argv: list[str] | None = None) -> int:
    args, extra = _parser().parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    def echo(line: str) -> None:
        print(line, flush=True)

    try:
        run = resolve_config(args, extra)
        return HANDLERS[args.command](args, run, echo)
    except VspeError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"error (NumericError): {exc}", file=sys.stderr)
        return NumericError.exit_code


if __name__ == "__main__":
    sys.exit(main())
