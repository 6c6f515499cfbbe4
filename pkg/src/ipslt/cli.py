"""Command-line entry point: ``ipslt {gen-data,train,evaluate,translate,gradcheck,sweep}``.

Exit codes: 0 success, 2 usage error, 1 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, first_mismatch
from .data import SPLITS, SyntheticTaskSpec, generate_dataset, load_dataset, save_dataset, split_path
from .decoding import translate_many
from .errors import IPSLTError, UsageError
from .experiments import depth_variants, distillation_variants, noisy_majority_task, sweep
from .gradcheck import DEFAULT_DIMS, TOLERANCE, run_gradcheck
from .metrics import corpus_score, token_accuracy
from .model import init_params
from .training import restore_state, state_to_dict, train_epochs

log = logging.getLogger("ipslt")

# keys that may legitimately change between an interrupted run and its resumption
RESUME_IGNORE = ("paths.data", "paths.out", "train.epochs")


def _emit(record, path=None):
    text = json.dumps(record, sort_keys=True)
    print(text)
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


def _parse_assignments(text):
    """``a=1,b=2`` -> {"a": 1, "b": 2}; values parsed as JSON when possible."""
    out = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        if "=" not in item:
            raise UsageError(f"expected key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def _load_spec(path):
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        values = json.load(fh)
    # accept a bare task spec or a whole run config
    return values.get("task", values) if isinstance(values, dict) else values


def cmd_gen_data(args):
    values = _load_spec(args.spec)
    for key in ("task", "seed", "noise", "n_train", "n_dev", "n_test", "n_symbols"):
        if getattr(args, key) is not None:
            values[key] = getattr(args, key)
    values.update(_parse_assignments(args.set or ""))
    spec = SyntheticTaskSpec.from_dict(values)
    paths = [split_path(args.out, s) for s in SPLITS]
    if not args.force and any(os.path.exists(p) for p in paths):
        raise UsageError(f"{args.out} already holds a dataset; pass --force to overwrite")
    os.makedirs(args.out, exist_ok=True)
    splits = generate_dataset(spec)
    for split, path in zip(SPLITS, paths):
        save_dataset(splits[split], path)
    with open(os.path.join(args.out, "spec.json"), "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _emit({"counts": {s: len(splits[s]) for s in SPLITS}, "spec": spec.to_dict(), "out": args.out})
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _effective_config(args, base=None):
    cfg = RunConfig.load(args.config) if args.config else (base or RunConfig())
    overrides = list(args.set or [])
    for flag, key in (("seed", "seed"), ("epochs", "train.epochs"), ("K", "model.n_iter"),
                      ("lam", "train.lam")):
        if getattr(args, flag, None) is not None:
            overrides.append(f"{key}={json.dumps(getattr(args, flag))}")
    return cfg.with_overrides(overrides)


def _check_data(samples, model_config, split):
    if not samples:
        return
    dims = {s.frames.shape[1] for s in samples}
    if dims != {model_config.frame_dim}:
        raise UsageError(f"{split} frames have width {sorted(dims)}, config expects "
                         f"{model_config.frame_dim} (set task.frame_dim)")
    top = max((max(s.target) for s in samples if s.target), default=0)
    if top >= model_config.vocab_size:
        raise UsageError(f"{split} uses token id {top} but vocab_size is {model_config.vocab_size}")


def _checkpoint(cfg, params, state):
    return Checkpoint(cfg.to_dict(), params.state_dict(), state.optimizer.state_dict(),
                      state.rng.bit_generator.state, state_to_dict(state))


def _write_log(path, cfg, records):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"config": cfg.to_dict()}, sort_keys=True) + "\n")
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def cmd_train(args):
    resume = load_checkpoint(args.resume) if args.resume else None
    base = RunConfig.from_dict(resume.config) if resume else None
    cfg = _effective_config(args, base)
    data_dir = args.data or cfg.paths.get("data")
    out_dir = args.out or cfg.paths.get("out")
    if not data_dir or not out_dir:
        raise UsageError("train needs --data and --out (or paths.data / paths.out in the config)")
    cfg.paths = {"data": data_dir, "out": out_dir}
    spec_path = os.path.join(data_dir, "spec.json")
    if os.path.exists(spec_path):
        # the generated data is authoritative for the task section (and so for vocab/frame size)
        with open(spec_path, encoding="utf-8") as fh:
            cfg.task = SyntheticTaskSpec.from_dict(json.load(fh))
        cfg.sync()
    if resume:
        key = first_mismatch(resume.config, cfg.to_dict(), ignore=RESUME_IGNORE)
        if key:
            raise UsageError(f"checkpoint config differs from the requested config at {key}")

    train = load_dataset(split_path(data_dir, "train"))
    dev_path = split_path(data_dir, "dev")
    dev = load_dataset(dev_path) if os.path.exists(dev_path) else None
    _check_data(train, cfg.model, "train")
    _check_data(dev, cfg.model, "dev")

    params = init_params(cfg.model, np.random.default_rng(cfg.seed))
    state = None
    if resume:
        params.load_state_dict(resume.params)
        state = restore_state(resume.train_state, resume.optimizer, resume.rng_state, params,
                              cfg.train)
    os.makedirs(out_dir, exist_ok=True)
    cfg.save(os.path.join(out_dir, "config.json"))
    log_path = os.path.join(out_dir, "train_log.jsonl")

    def on_epoch_end(st, record, improved):
        ckpt = _checkpoint(cfg, params, st)
        save_checkpoint(os.path.join(out_dir, f"epoch-{st.epoch:03d}.ckpt"), ckpt)
        if improved or not os.path.exists(os.path.join(out_dir, "best.ckpt")):
            save_checkpoint(os.path.join(out_dir, "best.ckpt"), ckpt)
        _write_log(log_path, cfg, st.log)
        log.info("epoch %d %s dev_token_acc=%.4f", st.epoch, record["phase"], record["dev_token_acc"])

    state = train_epochs(train, dev, params, cfg.model, cfg.train, rng=cfg.seed, state=state,
                         on_epoch_end=on_epoch_end, stop_after=args.stop_after_epoch)
    final = state.log[-1] if state.log else {}
    _emit({"epochs": state.epoch, "best_epoch": state.best_epoch,
           "best_dev_token_acc": state.best_dev_acc, "final": final, "out": out_dir,
           "config": cfg.to_dict()})
    return 0


# ---------------------------------------------------------------------------
# evaluate / translate
# ---------------------------------------------------------------------------

def _load_model(path):
    ckpt = load_checkpoint(path)
    cfg = RunConfig.from_dict(ckpt.config)
    params = init_params(cfg.model, np.random.default_rng(0))
    params.load_state_dict(ckpt.params)
    return cfg, params


def _dataset_path(data, split):
    path = data if os.path.isfile(data) else split_path(data, split)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no dataset file at {path}")
    return path


def _beam(cfg, args):
    beam = cfg.beam
    if args.beam_width is not None:
        beam = replace(beam, width=args.beam_width)
    if args.length_penalty is not None:
        beam = replace(beam, length_penalty=args.length_penalty)
    return beam


def cmd_evaluate(args):
    cfg, params = _load_model(args.ckpt)
    path = _dataset_path(args.data, args.split)
    samples = load_dataset(path)
    _check_data(samples, cfg.model, path)
    beam = _beam(cfg, args)
    hyps, _ = translate_many(samples, params, cfg.model, beam, args.K_override)
    refs = [list(s.target) for s in samples]
    score = corpus_score(hyps, refs)
    record = score.record(token_acc=token_accuracy(hyps, refs), data=path, ckpt=args.ckpt,
                          beam={"width": beam.width, "length_penalty": beam.length_penalty},
                          config=cfg.to_dict())
    _emit(record, args.out)
    return 0


def cmd_translate(args):
    cfg, params = _load_model(args.ckpt)
    samples = load_dataset(args.input)
    _check_data(samples, cfg.model, args.input)
    outputs, calls = translate_many(samples, params, cfg.model, _beam(cfg, args), args.K_override)
    for s, tokens, n in zip(samples, outputs, calls):
        print(f"{s.id}\t{' '.join(map(str, tokens))}\tdecoder_calls={n}")
    return 0


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def cmd_gradcheck(args):
    dims = _parse_assignments(args.dims or "")
    unknown = sorted(set(dims) - set(DEFAULT_DIMS))
    if unknown:
        raise UsageError(f"unknown gradcheck dimension {unknown[0]}")
    start = time.perf_counter()
    report = run_gradcheck(dims, seed=args.seed, max_entries=args.max_entries)
    ok = all(err < TOLERANCE for err in report.values())
    for group, err in report.items():
        print(f"{group:<10} {err:.3e} {'ok' if err < TOLERANCE else 'FAIL'}")
    print(f"gradcheck {'passed' if ok else 'failed'} in {time.perf_counter() - start:.1f}s "
          f"(tolerance {TOLERANCE:g})")
    return 0 if ok else 1


def cmd_sweep(args):
    seeds = [int(s) for s in args.seeds.split(",")]
    if args.kind == "depth":
        variants = depth_variants([int(k) for k in args.values.split(",")] if args.values else (0, 1, 2, 3))
    else:
        variants = distillation_variants([float(v) for v in args.values.split(",")] if args.values else (0.0, 15.0))
    task = noisy_majority_task(**_parse_assignments(args.task or ""))
    cfg = _effective_config(args)
    result = sweep(variants, task, cfg.model, cfg.train, seeds,
                   log_fn=lambda t: print(json.dumps(vars(t)), flush=True))
    _emit({"mean_dev_bleu4": result.mean_bleu4(), "trials": result.records(),
           "task": task.to_dict()}, args.out)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="ipslt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write train/dev/test split files")
    p.add_argument("--spec", help="JSON task spec (or run config with a task section)")
    p.add_argument("--out", required=True)
    p.add_argument("--task")
    p.add_argument("--seed", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-dev", dest="n_dev", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--n-symbols", dest="n_symbols", type=int)
    p.add_argument("--set", help="extra spec fields, e.g. max_len=12,min_len=3")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="warm start, then end-to-end training")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-after-epoch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--lam", type=float)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_train)

    for name, func, text in (("evaluate", cmd_evaluate, "score a split"),
                             ("translate", cmd_translate, "print one translation per sample")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--ckpt", required=True)
        if name == "evaluate":
            p.add_argument("--data", required=True, help="data directory or split file")
            p.add_argument("--split", default="test", choices=SPLITS)
            p.add_argument("--out", help="also write the score record here")
        else:
            p.add_argument("--input", required=True)
        p.add_argument("--beam-width", type=int)
        p.add_argument("--length-penalty", type=float)
        p.add_argument("--K-override", dest="K_override", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    p.add_argument("--dims", help="e.g. d_model=8,n_iter=2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-entries", type=int, help="sample at most this many entries per tensor")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="multi-seed K or lambda comparison on the noisy task")
    p.add_argument("--kind", choices=("depth", "distill"), default="depth")
    p.add_argument("--values", help="comma-separated K (depth) or lambda (distill) values")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--task", help="task spec overrides, e.g. n_train=500")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ipslt {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (IPSLTError, OSError, ValueError) as exc:
        print(f"ipslt {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
