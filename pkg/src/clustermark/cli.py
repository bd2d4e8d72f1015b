"""Command-line front end for the full pipeline.

Subcommands: synth-embeddings, cluster, keygen, generate, attack, detect,
experiment.  Every file-producing command writes a `<out>.manifest.json`
sidecar with the fully resolved parameters, sufficient to re-run it exactly
(no timestamps, so outputs are byte-reproducible).  Detection decisions are
reported in the output document, never in the exit code.

Exit codes: 0 success, 2 I/O error, 3 invalid configuration or input,
4 missing secret key.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from ._meta import __version__
from .codebook import (
    export_clustering_json,
    kmeans_cluster,
    load_clustering,
    load_table,
    save_bundle,
    save_table,
)
from .codes import KEY_ENV_VAR, SecretKey
from .detect import detect
from .experiments import (
    ChannelSpec,
    ExperimentConfig,
    MethodSpec,
    null_calibration,
    run_distortion_free_check,
    run_detectability_experiment,
    run_robustness_experiment,
)
from .generate import GenerationConfig, generate_plain, generate_watermarked, load_sequence, save_sequence
from .simulate import (
    MockModel,
    RetokenizationChannel,
    apply_retokenization,
    apply_substitution_attack,
    load_sim_config,
    synthesize_codebook,
)

EXIT_OK = 0
EXIT_IO = 2
EXIT_CONFIG = 3
EXIT_NO_KEY = 4


class _CliError(Exception):
    def __init__(self, code: int, kind: str, message: str) -> None:
        super().__init__(message)
        self.code = code
        self.kind = kind


def _fail(code: int, kind: str, message: str) -> _CliError:
    return _CliError(code, kind, message)


def _write_manifest(out_path: str, command: str, params: dict) -> None:
    doc = {
        "tool": "clustermark",
        "version": __version__,
        "command": command,
        "params": params,
    }
    with open(f"{out_path}.manifest.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_key(args) -> SecretKey:
    path = getattr(args, "key_file", None)
    if path:
        try:
            return SecretKey.from_file(path)
        except OSError as exc:
            raise _fail(EXIT_NO_KEY, "missing-key", f"cannot read key file {path}: {exc}")
    if os.environ.get(KEY_ENV_VAR):
        return SecretKey.from_env()
    raise _fail(
        EXIT_NO_KEY,
        "missing-key",
        f"no secret key: pass --key-file or set {KEY_ENV_VAR}",
    )


def _sim_config(args) -> dict:
    path = getattr(args, "config", None)
    if not path:
        return {"channel": None, "model": None, "codebook": None}
    return load_sim_config(path)


def _resolve(flag_value, config_section: dict | None, key: str, default):
    """Flags beat the config file, the config file beats defaults."""
    if flag_value is not None:
        return flag_value
    if config_section and key in config_section:
        return config_section[key]
    return default


def _build_model(args, cfg_model: dict | None, vocab_size: int) -> MockModel:
    return MockModel(
        seed=int(_resolve(args.model_seed, cfg_model, "seed", 0)),
        vocab_size=vocab_size,
        order=int(_resolve(args.model_order, cfg_model, "order", 1)),
        dirichlet_alpha=float(_resolve(args.model_alpha, cfg_model, "dirichlet_alpha", 1.0)),
        temperature=float(_resolve(args.model_temperature, cfg_model, "temperature", 1.0)),
    )


def cmd_synth_embeddings(args) -> int:
    cfg = _sim_config(args).get("codebook")
    table = synthesize_codebook(
        seed=int(_resolve(args.seed, cfg, "seed", 0)),
        vocab_size=int(_resolve(args.vocab_size, cfg, "vocab_size", 1024)),
        dim=int(_resolve(args.dim, cfg, "dim", 16)),
        n_blobs=int(_resolve(args.blobs, cfg, "n_blobs", 16)),
        separation=float(_resolve(args.separation, cfg, "separation", 0.5)),
        blob_std=float(_resolve(args.blob_std, cfg, "blob_std", 0.05)),
    )
    save_table(args.out, table)
    _write_manifest(
        args.out,
        "synth-embeddings",
        {
            "seed": int(_resolve(args.seed, cfg, "seed", 0)),
            "vocab_size": table.vocab_size,
            "dim": table.dim,
            "blobs": int(_resolve(args.blobs, cfg, "n_blobs", 16)),
            "separation": float(_resolve(args.separation, cfg, "separation", 0.5)),
            "blob_std": float(_resolve(args.blob_std, cfg, "blob_std", 0.05)),
        },
    )
    print(f"wrote embeddings for {table.vocab_size} tokens (dim {table.dim}) to {args.out}")
    return EXIT_OK


def cmd_cluster(args) -> int:
    table = load_table(args.embeddings)
    clustering = kmeans_cluster(
        table, args.h, seed=args.seed, max_iters=args.max_iters, tol=args.tol
    )
    save_bundle(args.out, table, clustering)
    if args.json_out:
        export_clustering_json(args.json_out, clustering)
    _write_manifest(
        args.out,
        "cluster",
        {
            "embeddings": str(args.embeddings),
            "h": int(args.h),
            "seed": int(args.seed),
            "max_iters": int(args.max_iters),
            "tol": float(args.tol),
        },
    )
    sizes = clustering.cluster_sizes()
    print(
        f"clustered {table.vocab_size} tokens into {clustering.h} clusters "
        f"(sizes min={int(sizes.min())} median={int(np.median(sizes))} max={int(sizes.max())}) "
        f"-> {args.out}"
    )
    return EXIT_OK


def cmd_keygen(args) -> int:
    key = SecretKey.generate(args.bytes)
    flags = os.O_WRONLY | os.O_CREAT | os.O_TRUNC
    if not args.force:
        flags |= os.O_EXCL
    try:
        fd = os.open(args.out, flags, 0o600)
    except FileExistsError:
        raise _fail(EXIT_IO, "io", f"{args.out} exists; pass --force to overwrite")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(key.to_hex() + "\n")
    print(f"wrote {args.bytes}-byte key to {args.out} (mode 0600)")
    return EXIT_OK


def cmd_generate(args) -> int:
    clustering = load_clustering(args.clustering)
    if args.h is not None and int(args.h) != clustering.h:
        raise _fail(
            EXIT_CONFIG,
            "config",
            f"--h={args.h} does not match clustering h={clustering.h}",
        )
    sim = _sim_config(args)
    model = _build_model(args, sim.get("model"), clustering.n_tokens)
    rng = np.random.default_rng(args.seed)
    cfg = GenerationConfig(
        length=args.length,
        h=clustering.h,
        ngram=args.ngram,
        history_enabled=not args.no_history,
    )
    if args.plain:
        seq = generate_plain(model, cfg, rng=rng)
    else:
        key = _load_key(args)
        seq = generate_watermarked(model, cfg, clustering, key, rng=rng)
    save_sequence(args.out, seq, format=args.seq_format)
    _write_manifest(
        args.out,
        "generate",
        {
            "clustering": str(args.clustering),
            "length": int(args.length),
            "ngram": int(args.ngram),
            "seed": int(args.seed),
            "plain": bool(args.plain),
            "history": not args.no_history,
            "seq_format": args.seq_format,
            "model": {
                "seed": int(model.seed),
                "order": int(model.order),
                "dirichlet_alpha": float(model.dirichlet_alpha),
                "temperature": float(model.temperature),
                "vocab_size": int(model.vocab_size),
            },
        },
    )
    print(f"wrote {len(seq)} tokens to {args.out}")
    return EXIT_OK


def cmd_attack(args) -> int:
    seq = load_sequence(args.infile)
    rng = np.random.default_rng(args.seed)
    sim = _sim_config(args)
    if args.mode == "retokenize":
        if not args.embeddings:
            raise _fail(EXIT_CONFIG, "config", "retokenize mode needs --embeddings")
        table = load_table(args.embeddings)
        chan = sim.get("channel")
        channel = RetokenizationChannel(
            p_flip=float(_resolve(args.p_flip, None, "p_flip", chan.p_flip if chan else 0.1)),
            beta=float(_resolve(args.beta, None, "beta", chan.beta if chan else 0.0)),
        )
        out = apply_retokenization(seq, table, channel, rng)
        params = {"mode": "retokenize", "p_flip": channel.p_flip, "beta": channel.beta}
    else:
        if args.rate is None:
            raise _fail(EXIT_CONFIG, "config", "substitute mode needs --rate")
        if args.vocab_size is not None:
            vocab = int(args.vocab_size)
        elif args.embeddings:
            vocab = load_table(args.embeddings).vocab_size
        else:
            raise _fail(EXIT_CONFIG, "config", "substitute mode needs --vocab-size or --embeddings")
        out = apply_substitution_attack(seq, vocab, args.rate, rng)
        params = {"mode": "substitute", "rate": float(args.rate), "vocab_size": vocab}
    save_sequence(args.out, out, format=args.seq_format)
    changed = int((out.tokens != seq.tokens).sum())
    _write_manifest(args.out, "attack", {**params, "infile": str(args.infile), "seed": int(args.seed)})
    print(f"perturbed {changed}/{len(seq)} positions -> {args.out}")
    return EXIT_OK


def cmd_detect(args) -> int:
    clustering = load_clustering(args.clustering)
    key = _load_key(args)
    seq = load_sequence(args.infile)
    report = detect(
        seq, key, clustering, ngram=args.ngram, fpr=args.fpr, dedup=args.dedup
    )
    text = report.to_json(include_flags=args.flags)
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        _write_manifest(
            args.out,
            "detect",
            {
                "clustering": str(args.clustering),
                "infile": str(args.infile),
                "ngram": int(args.ngram),
                "fpr": float(args.fpr),
                "dedup": bool(args.dedup),
            },
        )
    return EXIT_OK


def _parse_kv(kind: str, text: str, caster) -> dict:
    params: dict = {}
    if not text:
        return params
    for part in text.split(","):
        if "=" not in part:
            raise _fail(EXIT_CONFIG, "config", f"bad {kind} parameter {part!r} (expected k=v)")
        k, v = part.split("=", 1)
        params[k.strip()] = caster(k.strip(), v.strip())
    return params


def _parse_method(text: str) -> MethodSpec:
    name, _, rest = text.partition(":")

    def cast(k, v):
        return int(v) if k == "h" else float(v)

    params = _parse_kv("method", rest, cast)
    try:
        return MethodSpec(kind=name.strip(), **params)
    except (TypeError, ValueError) as exc:
        raise _fail(EXIT_CONFIG, "config", f"bad method spec {text!r}: {exc}")


def _parse_channel(text: str) -> ChannelSpec:
    name, _, rest = text.partition(":")
    params = _parse_kv("channel", rest, lambda k, v: float(v))
    try:
        return ChannelSpec(kind=name.strip(), **params)
    except (TypeError, ValueError) as exc:
        raise _fail(EXIT_CONFIG, "config", f"bad channel spec {text!r}: {exc}")


def cmd_experiment(args) -> int:
    overrides = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            overrides = json.load(fh)
        if not isinstance(overrides, dict):
            raise _fail(EXIT_CONFIG, "config", f"{args.config}: expected a JSON object")

    def opt(flag, key, default):
        return _resolve(flag, overrides, key, default)

    methods = tuple(_parse_method(m) for m in (args.method or opt(None, "methods", ["creweight:h=16"])))
    channels = tuple(_parse_channel(c) for c in (args.channel or opt(None, "channels", ["identity"])))
    try:
        cfg = ExperimentConfig(
            methods=methods,
            channels=channels,
            trials=int(opt(args.trials, "trials", 200)),
            null_trials=args.null_trials,
            seq_len=int(opt(args.length, "seq_len", 256)),
            ngram=int(opt(args.ngram, "ngram", 1)),
            vocab_size=int(opt(args.vocab_size, "vocab_size", 1024)),
            embed_dim=int(opt(args.dim, "embed_dim", 16)),
            n_blobs=int(opt(args.blobs, "n_blobs", 16)),
            separation=float(opt(args.separation, "separation", 0.5)),
            blob_std=float(opt(args.blob_std, "blob_std", 0.05)),
            model_order=int(opt(args.model_order, "model_order", 1)),
            dirichlet_alpha=float(opt(args.model_alpha, "dirichlet_alpha", 1.0)),
            temperature=float(opt(args.model_temperature, "temperature", 1.0)),
            fprs=tuple(args.fpr) if args.fpr else tuple(opt(None, "fprs", (0.01, 0.001))),
            master_seed=int(opt(args.seed, "master_seed", 0)),
            jobs=int(opt(args.jobs, "jobs", 1)),
        )
    except ValueError as exc:
        raise _fail(EXIT_CONFIG, "config", str(exc))

    if args.kind in ("detectability", "robustness"):
        runner = run_detectability_experiment if args.kind == "detectability" else run_robustness_experiment
        table = runner(cfg)
        if args.format == "csv":
            table.to_csv(args.out)
        else:
            table.to_json(args.out)
        table.write_manifest(f"{args.out}.manifest.json")
        for row in table.rows:
            print(
                f"{row['method']:>28s} {row['channel']:>34s} {row['role']:>11s} "
                f"fpr={row['fpr']:<6g} rate={row['positive_rate']:.4f} "
                f"[{row['wilson_low']:.4f}, {row['wilson_high']:.4f}]"
            )
        print(f"wrote {args.kind} table to {args.out}")
        return EXIT_OK

    if args.kind == "null-calibration":
        report = null_calibration(cfg)
    else:  # distortion-free
        report = run_distortion_free_check()
    doc = {
        "tool": "clustermark",
        "version": __version__,
        "kind": args.kind,
        "config": cfg.__dict__ if args.kind == "null-calibration" else None,
        "report": report,
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    print(json.dumps(report, indent=2, sort_keys=True, default=str))
    print(f"wrote {args.kind} report to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="clustermark",
        description="Cluster-based distortion-free watermarking for token sequences.",
    )
    p.add_argument("--version", action="version", version=f"clustermark {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth-embeddings", help="write a synthetic blob-structured embedding table")
    sp.add_argument("--out", required=True)
    sp.add_argument("--vocab-size", type=int, default=None)
    sp.add_argument("--dim", type=int, default=None)
    sp.add_argument("--blobs", type=int, default=None)
    sp.add_argument("--separation", type=float, default=None)
    sp.add_argument("--blob-std", type=float, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--config", default=None, help="simulation config JSON")
    sp.set_defaults(func=cmd_synth_embeddings)

    sp = sub.add_parser("cluster", help="k-means cluster an embedding table (run once per codebook)")
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--h", type=int, required=True, help="number of clusters")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--max-iters", type=int, default=100)
    sp.add_argument("--tol", type=float, default=1e-6)
    sp.add_argument("--out", required=True)
    sp.add_argument("--json-out", default=None, help="also export the clustering as JSON")
    sp.set_defaults(func=cmd_cluster)

    sp = sub.add_parser("keygen", help="generate a secret key file (hex, mode 0600)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--bytes", type=int, default=32)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_keygen)

    sp = sub.add_parser("generate", help="sample a (watermarked) token sequence from the mock model")
    sp.add_argument("--clustering", required=True)
    sp.add_argument("--key-file", default=None)
    sp.add_argument("--h", type=int, default=None, help="expected cluster count (checked against the clustering)")
    sp.add_argument("--length", type=int, default=1024)
    sp.add_argument("--ngram", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--plain", action="store_true", help="sample without the watermark")
    sp.add_argument("--no-history", action="store_true")
    sp.add_argument("--model-seed", type=int, default=None)
    sp.add_argument("--model-order", type=int, default=None)
    sp.add_argument("--model-alpha", type=float, default=None)
    sp.add_argument("--model-temperature", type=float, default=None)
    sp.add_argument("--config", default=None, help="simulation config JSON")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seq-format", choices=("text", "binary"), default="text")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("attack", help="perturb a sequence through an edit channel")
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=("retokenize", "substitute"), required=True)
    sp.add_argument("--p-flip", type=float, default=None)
    sp.add_argument("--beta", type=float, default=None)
    sp.add_argument("--rate", type=float, default=None)
    sp.add_argument("--embeddings", default=None)
    sp.add_argument("--vocab-size", type=int, default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--config", default=None)
    sp.add_argument("--seq-format", choices=("text", "binary"), default="text")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("detect", help="score a sequence for the watermark")
    sp.add_argument("--clustering", required=True)
    sp.add_argument("--key-file", default=None)
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--ngram", type=int, default=1)
    sp.add_argument("--fpr", type=float, default=0.01)
    sp.add_argument("--dedup", action="store_true", help="score each distinct code once")
    sp.add_argument("--flags", action="store_true", help="include per-position flags in the report")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("experiment", help="run a Monte-Carlo evaluation")
    sp.add_argument("--kind", choices=("detectability", "robustness", "null-calibration", "distortion-free"), required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--format", choices=("csv", "json"), default="csv")
    sp.add_argument("--method", action="append", help="e.g. creweight:h=16 | dip:alpha=0.4 | kgw:delta=0.5")
    sp.add_argument("--channel", action="append", help="e.g. identity | retokenize:p_flip=0.3,beta=40000 | substitute:rate=0.3")
    sp.add_argument("--trials", type=int, default=None)
    sp.add_argument("--null-trials", type=int, default=None)
    sp.add_argument("--length", type=int, default=None)
    sp.add_argument("--ngram", type=int, default=None)
    sp.add_argument("--vocab-size", type=int, default=None)
    sp.add_argument("--dim", type=int, default=None)
    sp.add_argument("--blobs", type=int, default=None)
    sp.add_argument("--separation", type=float, default=None)
    sp.add_argument("--blob-std", type=float, default=None)
    sp.add_argument("--model-order", type=int, default=None)
    sp.add_argument("--model-alpha", type=float, default=None)
    sp.add_argument("--model-temperature", type=float, default=None)
    sp.add_argument("--fpr", type=float, action="append", help="repeatable FPR grid entry")
    sp.add_argument("--seed", type=int, default=None, help="master seed")
    sp.add_argument("--jobs", type=int, default=None)
    sp.add_argument("--config", default=None, help="JSON overrides for any of the above")
    sp.set_defaults(func=cmd_experiment)
    return p


def _emit_error(code: int, kind: str, message: str) -> None:
    print(json.dumps({"error": {"code": code, "kind": kind, "message": message}}), file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _CliError as exc:
        _emit_error(exc.code, exc.kind, str(exc))
        return exc.code
    except OSError as exc:
        _emit_error(EXIT_IO, "io", str(exc))
        return EXIT_IO
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        _emit_error(EXIT_CONFIG, "config", str(exc))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
