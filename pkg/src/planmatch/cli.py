"""Command-line interface: generate / train / match / eval.

Exit codes: 0 success, 2 invalid input (bad paths, malformed payloads, bad
parameters), 3 runtime failure (training divergence, nothing finished within
the timeout). Each run that persists artifacts also writes a manifest with
the effective configuration and seeds needed to replay it.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .datagen import (
    DatagenError,
    GenParams,
    NoiseParams,
    gen_params_to_dict,
    generate_corpus,
    load_corpus,
    noise_params_to_dict,
    save_corpus,
)
from .evaluation import (
    DEFAULT_TIMEOUT_S,
    EvaluationError,
    evaluate_matcher,
    report_table,
)
from .graphs import EdgeType, GraphError, augment_edges, load_graph
from .matching import MatchingError, match, save_match_result
from .nn.params import ArchConfig, WeightsError, load_weights, save_weights
from .training import TrainConfig, TrainingError, train


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _info(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        config = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise DatagenError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise DatagenError("config file must hold a JSON object")
    return config


def _dataclass_from_dict(cls, overrides: dict, label: str):
    field_names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(overrides) - field_names)
    if unknown:
        raise DatagenError(f"unknown {label} config keys: {unknown}")
    return cls(**overrides)


def _write_manifest(path: Path, payload: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _manifest_base(subcommand: str, started_at: str, seed: int | None) -> dict:
    return {
        "tool": "planmatch",
        "tool_version": __version__,
        "subcommand": subcommand,
        "seed": seed,
        "started_at": started_at,
        "finished_at": _utc_now(),
    }


def _maybe_augment(graph):
    if all(e[2] is EdgeType.ROOM_WS for e in graph.edges):
        return augment_edges(graph)
    return graph


# ---------------------------------------------------------------------------
# Subcommands.


def cmd_generate(args) -> int:
    started_at = _utc_now()
    config = _load_config(args.config)
    count = args.count if args.count is not None else int(config.get("count", 100))
    if count < 0:
        raise DatagenError(f"count must be non-negative, got {count}")
    gen_params = _dataclass_from_dict(GenParams, config.get("gen", {}), "gen")
    noise_params = _dataclass_from_dict(NoiseParams, config.get("noise", {}), "noise")
    fractions = tuple(config.get("fractions", (0.7, 0.15, 0.15)))

    corpus = generate_corpus(
        count, gen_params=gen_params, noise_params=noise_params,
        seed=args.seed, fractions=fractions,
    )
    out = Path(args.out)
    meta = {
        "seed": args.seed,
        "gen_params": gen_params_to_dict(gen_params),
        "noise_params": noise_params_to_dict(noise_params),
        "fractions": list(fractions),
    }
    save_corpus(corpus, out, meta=meta)
    manifest = _manifest_base("generate", started_at, args.seed)
    manifest["config"] = {"count": count, **meta}
    manifest["outputs"] = {"corpus_dir": str(out)}
    _write_manifest(out / "run_manifest.json", manifest)
    if count == 0:
        print("warning: generated an empty corpus", file=sys.stderr)
    _info(args, f"wrote {count} samples to {out}")
    return 0


def cmd_train(args) -> int:
    started_at = _utc_now()
    config = _load_config(args.config)
    train_overrides = dict(config.get("train", {}))
    if args.seed is not None:
        train_overrides["seed"] = args.seed
    train_config = _dataclass_from_dict(TrainConfig, train_overrides, "train")
    arch = _dataclass_from_dict(ArchConfig, config.get("arch", {}), "arch")
    try:
        train_config.validate()
        arch.validate()
    except TrainingError as exc:
        raise DatagenError(str(exc)) from exc  # config problems are input errors

    corpus = load_corpus(args.corpus)
    initial_params = None
    if args.resume_from is not None:
        initial_params, _ = load_weights(args.resume_from)
        if initial_params.arch != arch:
            raise WeightsError(
                f"resume weights architecture {initial_params.arch} does not match "
                f"the configured architecture {arch}"
            )

    log = None if args.quiet else (lambda msg: print(msg))
    result = train(corpus, config=train_config, arch=arch,
                   initial_params=initial_params, log=log)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_weights(out, result.params, result.stats)
    history_path = out.parent / "history.json"
    history_path.write_text(json.dumps(result.history.to_json_dict()) + "\n")

    manifest = _manifest_base("train", started_at, train_config.seed)
    manifest["config"] = {
        "train": dataclasses.asdict(train_config),
        "arch": dataclasses.asdict(arch),
    }
    manifest["inputs"] = {"corpus_dir": str(args.corpus), "resume_from": args.resume_from}
    manifest["outputs"] = {"weights": str(out), "history": str(history_path)}
    manifest["epoch_times_s"] = result.epoch_times_s
    _write_manifest(out.parent / (out.name + ".manifest.json"), manifest)
    _info(
        args,
        f"trained {result.history.n_epochs} epochs, best epoch "
        f"{result.history.best_epoch} (val loss "
        f"{result.history.val_loss[result.history.best_epoch - 1]:.6f}); wrote {out}",
    )
    return 0


def cmd_match(args) -> int:
    started_at = _utc_now()
    params, stats = load_weights(args.weights)
    a_graph = _maybe_augment(load_graph(args.a_graph))
    s_graph = _maybe_augment(load_graph(args.s_graph))
    result = match(a_graph, s_graph, params, stats)

    if args.out is not None:
        out = Path(args.out)
        save_match_result(result, out)
        manifest = _manifest_base("match", started_at, None)
        manifest["inputs"] = {
            "a_graph": str(args.a_graph), "s_graph": str(args.s_graph),
            "weights": str(args.weights),
        }
        manifest["outputs"] = {"result": str(out)}
        _write_manifest(out.parent / (out.name + ".manifest.json"), manifest)
    if args.json or args.out is None:
        print(json.dumps(result.to_json_dict()))
    else:
        _info(args, f"matched {len(result.pairs)} nodes in {result.elapsed_s:.3f} s; wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    started_at = _utc_now()
    params, stats = load_weights(args.weights)
    corpus = load_corpus(args.corpus)
    samples = corpus.split_samples(args.split)
    if not samples:
        raise EvaluationError(f"corpus has no samples in split {args.split!r}")
    if args.jobs != 1:
        _info(args, "note: timing fairness requires a sequential run; --jobs is ignored")

    prepared = [(_maybe_augment(s.a_graph), _maybe_augment(s.s_graph)) for s in samples]
    index_of = {id(s): i for i, s in enumerate(samples)}

    def matcher(sample):
        a_aug, s_aug = prepared[index_of[id(sample)]]
        return match(a_aug, s_aug, params, stats)

    result = evaluate_matcher(matcher, samples, timeout_s=args.timeout_s)

    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(
            json.dumps(result.report_json_dict(split=args.split)) + "\n"
        )
        (out / "timing.json").write_text(json.dumps(result.timing_json_dict()) + "\n")
        manifest = _manifest_base("eval", started_at, None)
        manifest["config"] = {"split": args.split, "timeout_s": args.timeout_s}
        manifest["inputs"] = {"corpus_dir": str(args.corpus), "weights": str(args.weights)}
        manifest["outputs"] = {"report": str(out / "report.json"),
                               "timing": str(out / "timing.json")}
        _write_manifest(out / "run_manifest.json", manifest)

    if args.json:
        print(json.dumps(result.report_json_dict(split=args.split)))
    elif result.aggregate is not None:
        print(report_table([("ours", result.aggregate)]))
    if result.aggregate is None:
        print(
            f"error: no sample finished within {args.timeout_s} s; nothing to score",
            file=sys.stderr,
        )
        return 3
    return 0


# ---------------------------------------------------------------------------
# Parser.


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="planmatch",
        description="Match robot-built situational graphs against architectural plans.",
    )
    parser.add_argument("--version", action="version", version=f"planmatch {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a procedural floor-plan corpus")
    p.add_argument("--count", type=int, default=None, help="number of samples (default 100)")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="JSON config with gen/noise/fractions")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train matcher weights on a corpus")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="output weights file")
    p.add_argument("--seed", type=int, default=None, help="training seed (overrides config)")
    p.add_argument("--config", default=None, help="JSON config with train/arch sections")
    p.add_argument("--resume-from", default=None, help="weights file to continue from")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("match", help="match one observation graph against one plan graph")
    p.add_argument("--a-graph", required=True, help="plan graph JSON")
    p.add_argument("--s-graph", required=True, help="observation graph JSON")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", default=None, help="write the result JSON here instead of stdout")
    p.add_argument("--json", action="store_true", help="print the result JSON to stdout")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="evaluate weights on a corpus split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", default=None, help="directory for report.json and timing.json")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--timeout-s", type=float, default=DEFAULT_TIMEOUT_S)
    p.add_argument("--json", action="store_true", help="print the report JSON to stdout")
    p.add_argument("--jobs", type=int, default=1, help="reserved; evaluation runs sequentially")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return int(args.func(args))
    except (GraphError, DatagenError, WeightsError, MatchingError, EvaluationError,
            FileNotFoundError, IsADirectoryError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
