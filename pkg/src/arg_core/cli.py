"""``arg-core`` command line: synth, train, eval, gradcheck, dump-graph.

Exit codes: 0 success, 2 configuration or usage, 3 I/O, 4 numeric abort,
5 failed check.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .errors import ArgCoreError, CheckFailure, ConfigError, DataError, ParseError
from .model import forward, init_params
from .params_io import check_manifest, load_params, save_params
from .scene import load_dataset, write_dataset
from .synth import GeneratorConfig, synth_distractor, synth_relational
from .train import (
    evaluate,
    eval_frames,
    fit,
    gradcheck_scenes,
    param_group,
    restore,
    split_dataset,
    summary_line,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4, 5
DOT_MIN_WEIGHT = 0.01


def thread_count() -> int:
    raw = os.environ.get("ARG_CORE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ARG_CORE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"ARG_CORE_THREADS must be >= 1, got {n}")
    return n


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(run: RunConfig, flag) -> Path:
    out = Path(flag if flag is not None else run["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(run: RunConfig, params_path):
    values, vocab = load_params(params_path)
    if vocab is None:
        raise ConfigError(f"{params_path}: params file has no vocabulary")
    model_cfg = run.model_config(vocab)
    check_manifest(values, init_params(model_cfg, 0))
    return restore(values), vocab, model_cfg


# ----------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    run = load_config(args.config)
    if args.seed is not None:
        run = run.with_overrides(seed=args.seed)
    gen: GeneratorConfig = run.generator_config()
    make = synth_distractor if args.kind == "distractor" else synth_relational
    samples = make(gen, run["seed"])
    out = Path(args.out)
    write_dataset(out, samples, gen.vocab())
    actors = sum(len(fr.actors) for s in samples for fr in s.frames)
    print(f"wrote {len(samples)} sequences, {actors} actor instances to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = load_config(args.config)
    out = _out_dir(run, args.out)
    samples, vocab = load_dataset(args.data)
    model_cfg = run.model_config(vocab)
    train_cfg = run.train_config()
    run.write_resolved(out)
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    res = fit(samples, train_cfg, model_cfg, log=log)
    history = [r.as_dict() for r in res.history]
    save_params(out / "params.bin", res.params, vocab)
    _write_json(out / "metrics.json", history)
    _write_json(
        out / "final.json",
        {
            "best_epoch": res.best_epoch,
            "train": vars(res.train_metrics),
            "heldout": vars(res.history[res.best_epoch].metrics),
            "train_sequences": res.train_size,
            "heldout_sequences": res.holdout_size,
        },
    )
    _write_json(out / "timing.json", res.timings)
    print(f"Test at epoch #{res.best_epoch}")
    print(summary_line(res.history[res.best_epoch].metrics))
    return EXIT_OK


def cmd_eval(args) -> int:
    run = load_config(args.config)
    out = _out_dir(run, args.out)
    params, vocab, model_cfg = _load_model(run, args.params)
    samples, _ = load_dataset(args.data, vocab=vocab)
    train_cfg = run.train_config()
    if args.split != "all":
        tr, te = split_dataset(samples, train_cfg.train_fraction)
        samples = tr if args.split == "train" else te
        if not samples:
            raise DataError(f"split {args.split!r} is empty")
    res = evaluate(samples, params, model_cfg, train_cfg)
    _write_json(out / "metrics.json", [dict(vars(res.metrics), split=args.split, sequences=res.sequences)])
    _write_json(
        out / "timing.json",
        {"wall_seconds": res.wall_seconds, "seconds_per_sequence": res.seconds_per_sequence},
    )
    print(summary_line(res.metrics))
    return EXIT_OK


def gradcheck_data(run: RunConfig, seed: int) -> list:
    n = run["gradcheck.actors"]
    size = run["gradcheck.image_size"]
    # small frames keep the finite differences cheap; boxes scale with the frame
    gen = GeneratorConfig(
        num_sequences=run["gradcheck.scenes"],
        frames=run["gradcheck.frames"],
        image_size=size,
        actors_min=n,
        actors_max=n,
        num_clusters=run["synth.num_clusters"],
        box_w=size / 4,
        box_h=size / 5,
        mu=size / 2,
        min_gap=2.0,
        jitter=1,
        noise=run["synth.noise"],
    )
    return synth_relational(gen, seed)


def cmd_gradcheck(args) -> int:
    run = load_config(args.config)
    if args.grad_fault is not None:
        run = run.with_overrides(debug__grad_fault=args.grad_fault)
    seed = run["seed"] if args.seed is None else args.seed
    scenes = gradcheck_data(run, seed)
    model_cfg = run.model_config(GeneratorConfig(num_clusters=run["synth.num_clusters"]).vocab())
    report = gradcheck_scenes(
        scenes,
        model_cfg,
        seed,
        lam=run["train.lambda"],
        epsilon=run["gradcheck.epsilon"],
        tolerance=run["gradcheck.tolerance"],
        max_coords=run["gradcheck.max_coords"],
    )
    worst = report.by_group(param_group)
    width = max(len(k) for k in worst)
    for name, err in worst.items():
        flag = "ok" if err < report.tolerance else "FAIL"
        print(f"{name:<{width}}  {err:.3e}  {flag}")
    verdict = "passed" if report.passed else "failed"
    print(f"gradcheck {verdict}: {len(scenes)} scenes, max relative error {report.max_rel_error:.3e} (tolerance {report.tolerance:g})")
    if not report.passed:
        raise CheckFailure(f"gradient check failed for: {', '.join(k for k, e in worst.items() if not e < report.tolerance)}")
    return EXIT_OK


def graph_documents(sample, params, model_cfg, vocab, K: int) -> list:
    view = eval_frames(sample, K)
    pred = forward(view, params, model_cfg)
    feats = pred.feats
    actions = np.argmax(pred.output.individual_logits.data, axis=1)
    nodes = [
        {
            "index": i,
            "actor_id": feats.actor_ids[i],
            "frame": int(feats.frame_index[i]),
            "predicted_action": vocab.actions[int(actions[i])],
        }
        for i in range(feats.N)
    ]
    docs = []
    for h, g in enumerate(pred.graphs):
        docs.append({"seq_id": sample.seq_id, "head": h, "nodes": nodes, "G": g.numpy().tolist()})
    return docs


def _dot_escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"')


def to_dot(doc: dict) -> str:
    lines = [f'digraph "{_dot_escape(doc["seq_id"])}_head{doc["head"]}" {{']
    for n in doc["nodes"]:
        label = _dot_escape(f'{n["actor_id"]}/{n["frame"]}') + "\\n" + _dot_escape(n["predicted_action"])
        lines.append(f'  n{n["index"]} [label="{label}"];')
    for i, row in enumerate(doc["G"]):
        for j, w in enumerate(row):
            if w >= DOT_MIN_WEIGHT:
                lines.append(f'  n{i} -> n{j} [weight="{w:.6f}", label="{w:.2f}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def cmd_dump_graph(args) -> int:
    run = load_config(args.config)
    out = _out_dir(run, args.out)
    params, vocab, model_cfg = _load_model(run, args.params)
    samples, _ = load_dataset(args.data, vocab=vocab)
    match = [s for s in samples if s.seq_id == args.seq]
    if not match:
        raise ConfigError(f"unknown sequence {args.seq!r}")
    docs = graph_documents(match[0], params, model_cfg, vocab, run["train.K"])
    for doc in docs:
        stem = out / f"{args.seq}_head{doc['head']}"
        if args.format == "dot":
            path = stem.with_suffix(".dot")
            path.write_text(to_dot(doc), encoding="utf-8")
        else:
            path = stem.with_suffix(".json")
            _write_json(path, doc)
        print(path)
    return EXIT_OK


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="arg-core", description="Actor relation graphs for group activity recognition.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--kind", choices=("relational", "distractor"), default="relational")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate saved parameters")
    e.add_argument("--config")
    e.add_argument("--data", required=True)
    e.add_argument("--params", required=True)
    e.add_argument("--out")
    e.add_argument("--split", choices=("all", "train", "test"), default="all")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of the full pipeline")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--grad-fault", type=float, help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("dump-graph", help="export relation graphs of one sequence")
    d.add_argument("--config")
    d.add_argument("--data", required=True)
    d.add_argument("--params", required=True)
    d.add_argument("--seq", required=True)
    d.add_argument("--format", choices=("dot", "json"), default="dot")
    d.add_argument("--out")
    d.set_defaults(func=cmd_dump_graph)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=thread_count()):
            return args.func(args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ArgCoreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
