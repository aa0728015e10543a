"""Command-line pipeline driver.

Every subcommand takes --seed and --config and is deterministic for fixed
values of both: metric CSVs and output bundles are byte-identical across
reruns. Checkpoints are tensor-container bundles; datasets use the LSTD
record format.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import ar as ar_mod
from . import decoder as dec
from . import diffusion
from . import harness
from . import plotting
from . import relational as rel
from . import synth
from . import tokenizer as tk
from .config import load_config
from .engine import container, grad_check, no_grad

log = logging.getLogger("semtok")


def _write_text(path, text: str):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


def _load_extractor(path, cfg) -> rel.Extractor:
    model = rel.Extractor(cfg.extractor, np.random.default_rng(0))
    model.load_state_dict(container.load_bundle(path))
    return model


def cmd_gen_data(args, cfg):
    synth.build_dataset(args.n, args.classes, args.seed, args.out,
                        c=cfg.channels, h=cfg.height, w=cfg.width)
    log.info("wrote %d records to %s", args.n, args.out)


def cmd_train_extractor(args, cfg):
    ds = synth.load_dataset(args.data)
    model, logbook = rel.train_extractor(ds, cfg.extractor, cfg.weights,
                                         args.epochs, args.seed, cfg.mining,
                                         cfg.batch_size, cfg.lr)
    container.save_bundle(args.out, model.state_dict())
    _write_text(Path(args.out).with_suffix(".csv"), logbook.to_csv())
    log.info("extractor saved to %s", args.out)


def cmd_train_tokenizer(args, cfg):
    ds = synth.load_dataset(args.data)
    extractor = _load_extractor(args.extractor, cfg)
    res = dec.train_tokenizer(ds, cfg.encoder, cfg.decoder, extractor,
                              cfg.weights, args.epochs, args.seed,
                              cfg.batch_size, cfg.lr)
    state = {f"encoder.{k}": v for k, v in res.encoder.state_dict().items()}
    state.update({f"denoiser.{k}": v for k, v in res.denoiser.state_dict().items()})
    container.save_bundle(args.out, state)
    _write_text(Path(args.out).with_suffix(".csv"), res.logbook.to_csv())
    log.info("tokenizer saved to %s", args.out)


def _load_tokenizer(path, cfg):
    bundle = container.load_bundle(path)
    enc = tk.Encoder(cfg.encoder, np.random.default_rng(0))
    den = dec.Denoiser(cfg.decoder, np.random.default_rng(0))
    enc.load_state_dict({k[len("encoder."):]: v for k, v in bundle.items()
                         if k.startswith("encoder.")})
    den.load_state_dict({k[len("denoiser."):]: v for k, v in bundle.items()
                         if k.startswith("denoiser.")})
    return enc, den


def cmd_train_ar(args, cfg):
    ds = synth.load_dataset(args.data)
    enc, _ = _load_tokenizer(args.tokenizer, cfg)
    with no_grad():
        tokens = enc(ds.grids).tokens.data
    model, logbook, _ = ar_mod.train_ar(tokens, ds.globals_, cfg.ar,
                                        args.epochs, args.seed,
                                        cfg.batch_size, cfg.lr)
    container.save_bundle(args.out, model.state_dict())
    _write_text(Path(args.out).with_suffix(".csv"), logbook.to_csv())
    log.info("generator saved to %s", args.out)


def cmd_eval_retrieval(args, cfg):
    ds = synth.load_dataset(args.data)
    methods = {}
    for name in args.methods.split(","):
        name = name.strip()
        if name == "raw":
            methods["raw"] = ds.grids.reshape(len(ds), -1)
        elif name == "regression":
            if not args.regression:
                raise SystemExit("method 'regression' needs --regression CHECKPOINT")
            model = _load_extractor(args.regression, cfg)
            with no_grad():
                methods["regression"] = model(ds.grids)[1].data
        elif name == "rida":
            if not args.extractor:
                raise SystemExit("method 'rida' needs --extractor CHECKPOINT")
            model = _load_extractor(args.extractor, cfg)
            with no_grad():
                methods["rida"] = model(ds.grids)[1].data
        else:
            raise SystemExit(f"unknown method: {name}")
    ks = [int(x) for x in args.k.split(",")]
    results = harness.retrieval_eval(methods, ds.globals_, ks)
    _write_text(args.out, harness.retrieval_csv(results))
    for r in results:
        log.info("%s K=%d recall=%.4f map=%.4f jaccard=%.4f",
                 r.method, r.k, r.recall, r.map_, r.jaccard)


def cmd_eval_prefix_curve(args, cfg):
    ds = synth.load_dataset(args.data)
    enc, den = _load_tokenizer(args.tokenizer, cfg)
    extractor = _load_extractor(args.extractor, cfg)
    sched = diffusion.linear_schedule(cfg.decoder.T)
    levels = [int(x) for x in args.levels.split(",")]
    seeds = [args.seed + i for i in range(args.n_seeds)]
    logbook = harness.prefix_curve(enc, den, sched, extractor, ds.grids,
                                   levels, seeds, steps=args.steps)
    _write_text(args.out, logbook.to_csv())
    log.info("prefix curve written to %s", args.out)


def cmd_generate(args, cfg):
    ds = synth.load_dataset(args.data)
    model = ar_mod.ARModel(cfg.ar, np.random.default_rng(0))
    model.load_state_dict(container.load_bundle(args.checkpoint))
    cond = ar_mod.ConditionEmbedding(ds.globals_[args.cond_index])
    seq = ar_mod.generate(model, cond, args.length, args.guidance, args.seed)
    container.save_bundle(args.out, {"tokens": seq.tokens[0],
                                     "valid_prefix": np.array([float(seq.valid_prefix)])})
    log.info("generated %d tokens to %s", seq.valid_prefix, args.out)


def cmd_decode(args, cfg):
    _, den = _load_tokenizer(args.checkpoint, cfg)
    bundle = container.load_bundle(args.tokens)
    tokens = bundle["tokens"]
    prefix = tk.apply_nested_dropout(
        tk.RegisterSequence(tokens=tokens, valid_prefix=tokens.shape[0]),
        args.prefix_len)
    sched = diffusion.linear_schedule(cfg.decoder.T)
    grid = dec.sample(den, prefix, args.guidance, sched,
                      np.random.default_rng(args.seed), steps=args.steps)
    container.save_bundle(args.out, {"grid": grid.values})
    log.info("decoded grid to %s", args.out)


def cmd_grad_check(args, cfg):
    rng = np.random.default_rng(args.seed)
    reports = {}
    if args.loss in ("global", "all"):
        sets = rel.MiningSets(positives=((1,), (0,), ()), negatives=((2,), (), (0,)))
        reports["global"] = grad_check(
            lambda ts: rel.loss_global(ts[0], sets), [rng.normal(size=(3, 3))])
    if args.loss in ("rank", "all"):
        t = rng.normal(size=(4, 4))
        reports["rank"] = grad_check(
            lambda ts: rel.loss_rank(ts[0], t), [rng.normal(size=(4, 4))])
    if args.loss in ("spatial", "all"):
        t = rng.normal(size=(4, 6))
        reports["spatial"] = grad_check(
            lambda ts: rel.loss_spatial(ts[0], t), [rng.normal(size=(4, 6))])
    if args.loss in ("semantic", "all"):
        ex_cfg = rel.ExtractorConfig(channels=2, height=8, width=8, patch_size=4,
                                     dim=16, depth=1, heads=2, spatial_dim=4,
                                     global_dim=8)
        extractor = rel.Extractor(ex_cfg, np.random.default_rng(0))
        tgt = rng.normal(size=(1, 2, 8, 8))
        reports["semantic"] = grad_check(
            lambda ts: rel.loss_semantic(ts[0], tgt, extractor),
            [tgt + 0.1 * rng.normal(size=tgt.shape)])
    failed = [k for k, r in reports.items() if not r["ok"]]
    for k, r in reports.items():
        print(f"{k}: max_rel_err={r['max_error']:.3e} tol={r['tol']} "
              f"{'ok' if r['ok'] else 'FAIL'}")
    if failed:
        raise SystemExit(f"gradient check failed: {failed}")


def cmd_plot(args, cfg):
    cols = tuple(args.y.split(","))
    plotting.plot_emit(args.csv, args.out, x_col=args.x, y_cols=cols)
    log.info("plot written to %s", args.out)


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = argparse.ArgumentParser(prog="semtok",
                                     description="semantic shape-token pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", type=str, default=None)

    p = sub.add_parser("gen-data", help="generate a synthetic shape dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-extractor", help="train the semantic extractor")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_train_extractor)

    p = sub.add_parser("train-tokenizer", help="joint encoder+decoder training")
    p.add_argument("--data", required=True)
    p.add_argument("--extractor", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_train_tokenizer)

    p = sub.add_parser("train-ar", help="train the token generator")
    p.add_argument("--data", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_train_ar)

    p = sub.add_parser("eval-retrieval", help="retrieval metrics vs teacher")
    p.add_argument("--data", required=True)
    p.add_argument("--methods", default="raw,regression,rida")
    p.add_argument("--k", default="3,5")
    p.add_argument("--extractor", default=None)
    p.add_argument("--regression", default=None)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_eval_retrieval)

    p = sub.add_parser("eval-prefix-curve", help="reconstruction vs prefix level")
    p.add_argument("--data", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--extractor", required=True)
    p.add_argument("--levels", default="1,2,4,8,16")
    p.add_argument("--n-seeds", type=int, default=3)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_eval_prefix_curve)

    p = sub.add_parser("generate", help="sample new token sequences")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--cond-index", type=int, default=0)
    p.add_argument("--length", type=int, default=16)
    p.add_argument("--guidance", type=float, default=1.0)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("decode", help="decode a token prefix to a grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokens", required=True)
    p.add_argument("--prefix-len", type=int, default=16)
    p.add_argument("--guidance", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("grad-check", help="finite-difference loss verification")
    p.add_argument("--loss", choices=["global", "rank", "spatial", "semantic", "all"],
                   default="all")
    common(p)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("plot", help="render a metrics CSV to SVG")
    p.add_argument("--csv", required=True)
    p.add_argument("--x", default="level")
    p.add_argument("--y", default="mse,cosine")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_plot)

    args = parser.parse_args(argv)
    cfg = load_config(args.config)
    args.fn(args, cfg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
