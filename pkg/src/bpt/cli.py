"""Command-line entry point: ``bpt {train,analyze,fold,count,gradcheck,whiten}``.

Exit codes: 0 success, 1 validation error, 2 numerical failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
import warnings

import numpy as np

from . import cost
from .checkpoint import Checkpoint, checkpoint_tensors, load_checkpoint, save_checkpoint
from .config import load_config
from .data import generate, load_token_file, write_tensors
from .errors import (BPTError, ConfigError, DivergenceError, EquivalenceError, FormatError, SizeError)
from .gradcheck import grad_check
from .model import forward, init_backbone
from .prompts import fold, init_method, rank_of_effective_prompt
from .stats import instrumented_probe
from .train import CSV_HEADER, evaluate, train
from .whitening import estimate_blocks


EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3
FOLD_TOL = 1e-10
FOLD_SAMPLES = 8


def _emit(record: dict):
    print(json.dumps(record, sort_keys=True))


def run_dir(base: str, tag: str, digest: str) -> str:
    """Fresh directory ``{base}/{tag}-{hash12}-{timestamp}``; never reuses an existing one."""
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = os.path.join(base, f"{tag}-{digest[:12]}-{stamp}")
    candidate, i = path, 1
    while os.path.exists(candidate):
        candidate = f"{path}.{i}"
        i += 1
    os.makedirs(candidate)
    return candidate


def _dataset(cfg):
    if cfg.data.tokens_path:
        return load_token_file(cfg.data.tokens_path)
    m = cfg.model
    return generate(cfg.data.recipe, m.num_classes, cfg.data.samples_per_class, cfg.seed,
                    n=m.n, patch_dim=m.patch_dim, snr=cfg.data.snr)


def _whitening(cfg, backbone, dataset, blocks):
    w = cfg.whitening
    probe = dataset.subset(min(w.images, len(dataset)), cfg.seed)
    return estimate_blocks(backbone, blocks, probe, eps=w.eps, center=w.center, embedded=dataset.embedded)


# -- subcommands ---------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    backbone = init_backbone(cfg.model, cfg.seed)
    dataset = _dataset(cfg)
    blocks = cfg.prompt.blocks(cfg.model.L)
    whitening = _whitening(cfg, backbone, dataset, blocks) if cfg.whitening is not None else None
    method = init_method(cfg.prompt, cfg.model, whitening, cfg.seed)
    out = run_dir(args.out or cfg.output.dir, f"train-{cfg.prompt.kind}", cfg.digest())
    with open(os.path.join(out, "config.json"), "w") as f:
        json.dump(cfg.source, f, indent=2, sort_keys=True)

    loss0, acc0 = evaluate(backbone, method, backbone.head, dataset)
    every = cfg.output.checkpoint_every
    csv = open(os.path.join(out, "steps.csv"), "w")
    csv.write(CSV_HEADER)

    def on_step(entry, m, head):
        csv.write(entry.csv_line())
        if every and (entry.step + 1) % every == 0:
            save_checkpoint(os.path.join(out, f"checkpoint-{entry.step + 1:06d}.bptt"),
                            Checkpoint(backbone, m, head, whitening))

    try:
        result = train(backbone, method, dataset, cfg.train, on_step=on_step)
    finally:
        csv.close()
    loss1, acc1 = evaluate(backbone, result.method, result.head, dataset)
    save_checkpoint(os.path.join(out, "checkpoint.bptt"), Checkpoint(backbone, result.method, result.head, whitening))
    summary = {
        "run_dir": out, "kind": cfg.prompt.kind, "initial_loss": loss0, "final_loss": loss1,
        "initial_accuracy": acc0, "train_accuracy": acc1,
        "param_count": cost.param_count(cfg.prompt, cfg.model), "steps": cfg.train.total_steps,
        "backbone_sha256": backbone.digest(),
    }
    with open(os.path.join(out, "summary.json"), "w") as f:
        json.dump({k: v for k, v in summary.items() if k != "run_dir"}, f, indent=2, sort_keys=True)
    _emit(summary)
    return EXIT_OK


def _analysis_data(args, ck):
    if args.data:
        return load_token_file(args.data)
    if args.config:
        return _dataset(load_config(args.config, args.seed))
    c = ck.backbone.config
    return generate("gaussian-blobs", c.num_classes, max(1, -(-args.samples // c.num_classes)),
                    args.seed or 0, n=c.n, patch_dim=c.patch_dim)


def cmd_analyze(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    dataset = _analysis_data(args, ck)
    samples = dataset.samples[: args.samples]
    blocks = range(1, ck.backbone.config.L + 1) if args.all_blocks else [args.block]
    key = json.dumps([os.path.abspath(args.checkpoint), args.data, args.config, list(blocks), args.bins, args.samples])
    out = run_dir(args.out or "runs", "analyze", hashlib.sha256(key.encode()).hexdigest())
    records = []
    for b in blocks:
        reports = instrumented_probe(ck.backbone, ck.method, samples, b, bins=args.bins, embedded=dataset.embedded)
        for name, rep in reports.items():
            with open(os.path.join(out, f"block{b}_{name}.csv"), "w") as f:
                f.write("bin_left,count\n")
                f.write(rep.histogram_csv())
            rec = {"block": b, **rep.record()}
            records.append(rec)
            _emit(rec)
    with open(os.path.join(out, "reports.json"), "w") as f:
        json.dump(records, f, indent=2)
    return EXIT_OK


def fold_deviation(ck: Checkpoint, folded, seed: int = 0, samples: int = FOLD_SAMPLES) -> float:
    """Max relative logit deviation between the unfolded and folded states."""
    c = ck.backbone.config
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        x = rng.standard_normal((c.n, c.patch_dim))
        a = forward(x, ck.backbone, ck.method, ck.head)
        b = forward(x, ck.backbone, folded, ck.head)
        worst = max(worst, float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-300)))
    return worst


def cmd_fold(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    if ck.method is None:
        raise FormatError(f"{args.checkpoint} holds no prompt state")
    folded = fold(ck.method)
    dev = fold_deviation(ck, folded, args.seed or 0)
    if dev > FOLD_TOL:
        raise EquivalenceError(dev, FOLD_TOL)
    save_checkpoint(args.output, Checkpoint(ck.backbone, folded, ck.head))
    _emit({"input_kind": ck.method.kind, "max_rel_deviation": dev, "output": args.output,
           "ranks": {str(b): rank_of_effective_prompt(folded, b) for b in folded.placement}})
    return EXIT_OK


def cmd_count(args) -> int:
    cfg = load_config(args.config, args.seed)
    unfolded = cost.mult_count(cfg.prompt, cfg.model)
    folded = cost.mult_count(cfg.prompt, cfg.model, folded=True)
    base = cost.vpt_baseline(cfg.prompt, cfg.model)
    ratio = base.mults_prompt_path / unfolded.mults_prompt_path if unfolded.mults_prompt_path else None
    _emit({**unfolded.record(), "mults_folded": folded.mults_prompt_path,
           "mults_vpt_baseline": base.mults_prompt_path, "vpt_ratio": ratio})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config, args.seed)
    g = cfg.gradcheck
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = grad_check(cfg.model, cfg.prompt, cfg.seed, g.h, g.batch, g.include_head)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    ok = report.passed(g.tol)
    _emit({"kind": cfg.prompt.kind, "checked": report.checked, "max_rel_err": report.max_rel_err,
           "mean_rel_err": report.mean_rel_err, "h": report.h, "tol": g.tol, "passed": ok,
           "per_tensor": {k: {"max": v[0], "mean": v[1], "entries": v[2]} for k, v in report.per_tensor.items()}})
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_whiten(args) -> int:
    cfg = load_config(args.config, args.seed)
    backbone = init_backbone(cfg.model, cfg.seed)
    dataset = _dataset(cfg)
    if args.all_blocks:
        blocks = tuple(range(1, cfg.model.L + 1))
    elif args.block is not None:
        blocks = (args.block,)
    else:
        blocks = cfg.prompt.blocks(cfg.model.L)
    if cfg.whitening is None:
        raise ConfigError("whiten needs a prompt.kind of fwhiten or twhiten (or a whitening section)")
    est = _whitening(cfg, backbone, dataset, blocks)
    tensors = checkpoint_tensors(Checkpoint(backbone, None, None, est))
    tensors = {k: v for k, v in tensors.items() if k.startswith(("whiten.", "meta.whiten."))}
    path = args.output or os.path.join(run_dir(args.out or cfg.output.dir, "whiten", cfg.digest()), "whitening.bptt")
    write_tensors(path, tensors)
    _emit({"output": path, "blocks": list(blocks),
           "eps": {str(b): e.eps for b, e in est.items()}, "samples": {str(b): e.sample_count for b, e in est.items()}})
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bpt", description="Bilinear prompt tuning toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="JSON run config")
        sp.add_argument("--out", help="base directory for run outputs")
        sp.add_argument("--seed", type=int, help="override the config seed")

    sp = sub.add_parser("train", help="tune prompts on a frozen backbone")
    common(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("analyze", help="distribution and burstiness reports")
    common(sp, config_required=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", help="token container with tokens.{i} entries")
    sp.add_argument("--block", type=int, default=1)
    sp.add_argument("--all-blocks", action="store_true")
    sp.add_argument("--bins", type=int, default=50)
    sp.add_argument("--samples", type=int, default=100)
    sp.set_defaults(fn=cmd_analyze)

    sp = sub.add_parser("fold", help="collapse a two-factor prompt for inference")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(fn=cmd_fold)

    sp = sub.add_parser("count", help="parameter and multiplication counts")
    common(sp)
    sp.set_defaults(fn=cmd_count)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient check")
    common(sp)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("whiten", help="estimate whitening matrices to a tensor file")
    common(sp)
    sp.add_argument("--output", help="output file (default: inside a fresh run directory)")
    sp.add_argument("--block", type=int)
    sp.add_argument("--all-blocks", action="store_true")
    sp.set_defaults(fn=cmd_whiten)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (DivergenceError, EquivalenceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, SizeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except BPTError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
