"""Command-line entry point for reproducible experiment runs.

Each subcommand reads settings (flag > config file > default), performs one
stage (corpus generation, training, decoding, evaluation, verification),
writes line-delimited JSON results plus a ``run.json`` manifest into the
output directory, and prints a one-line JSON summary to stdout.

Exit codes: 0 success, 2 missing file, 3 invalid configuration or input,
4 numerical failure.  Failures print a machine-readable record to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import runconfig, synthbench
from . import tensorcore as tc
from .decoding import decode
from .errors import (
    CheckpointError,
    EnumerationTooLargeError,
    InvalidConfigError,
    InvalidInputError,
    MidecError,
    NumericalError,
)
from .model import (
    ModelConfig,
    init_lvlm,
    load_model,
    n_params,
    save_model,
    train_lvlm,
)
from .oracle import lf_decode, verify_factorization
from .purifier import (
    PurifierConfig,
    PurifierTrainConfig,
    init_purifier,
    load_purifier,
    save_purifier,
    train_purifier,
    training_loss,
)
from .synthbench import Catalog, caption_record, chair_scores, scene_patches

EXIT_MISSING_FILE = 2
EXIT_INVALID_CONFIG = 3
EXIT_NUMERICAL = 4


# ---------------------------------------------------------------------------
# plumbing


def _collect(args, mapping: dict[str, str]) -> dict[str, object]:
    """Flags the user actually passed, as dotted-key overrides."""
    out = {}
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = value
    return out


def _settings(args, mapping: dict[str, str]) -> dict[str, object]:
    file_overrides = runconfig.load_config_file(args.config) if args.config else None
    return runconfig.resolve(file_overrides, _collect(args, mapping))


def _out_dir(args, settings) -> Path:
    out = Path(args.out_dir if args.out_dir else settings["paths.out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _write_jsonl(path: Path, lines) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")


def _load_corpus(settings, scenes_path, captions_path):
    catalog = Catalog(int(settings["corpus.catalog_size"]))
    scenes = synthbench.read_scenes(_require(scenes_path, "scenes file"))
    captions = synthbench.read_captions(_require(captions_path, "captions file"),
                                        catalog)
    return catalog, scenes, captions


def _load_purifier_if_needed(variant: str, purifier_path):
    if variant not in ("full", "vision_only"):
        return None
    pp, pcfg = load_purifier(_require(purifier_path, "purifier checkpoint"))
    return pp, pcfg


def _decode_scene(params, config, purifier, scene, catalog, dcfg):
    patches = scene_patches(scene, catalog, config.n_visual, config.patch_dim)
    prompt = list(synthbench.DESCRIBE_PROMPT)
    # offset the sampling stream per scene so stochastic samplers do not
    # replay the same draws on every image
    scfg = replace(dcfg, seed=(dcfg.seed + scene.scene_id) % 2 ** 31)
    if scfg.variant == "learning_free":
        return lf_decode(params, config, patches, prompt, scfg)
    return decode(params, config, purifier, patches, prompt, scfg)


def _print(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload) + "\n")


# ---------------------------------------------------------------------------
# commands


_CORPUS_FLAGS = {
    "catalog_size": "corpus.catalog_size",
    "n_scenes": "corpus.n_scenes",
    "objects_per_scene": "corpus.objects_per_scene",
    "bias": "corpus.bias",
    "seed": "seed",
}


def cmd_synth_gen(args) -> int:
    started = time.time()
    settings = _settings(args, _CORPUS_FLAGS)
    out = _out_dir(args, settings)
    scenes, captions = synthbench.generate_corpus(
        int(settings["corpus.catalog_size"]),
        int(settings["corpus.n_scenes"]),
        int(settings["corpus.objects_per_scene"]),
        float(settings["corpus.bias"]),
        seed=runconfig.derived_seed(settings, "corpus"),
    )
    scenes_path = out / settings["paths.scenes"]
    captions_path = out / settings["paths.captions"]
    synthbench.write_scenes(scenes_path, scenes)
    synthbench.write_captions(captions_path, captions)
    scores = chair_scores(scenes, captions)
    runconfig.write_manifest(out, "synth-gen", settings, started,
                             {"scenes": str(scenes_path), "captions": str(captions_path)})
    _print({"scenes": len(scenes), "captions": len(captions),
            "corpus_c_s": scores.c_s, "corpus_c_i": scores.c_i})
    return 0


_TRAIN_FLAGS = {
    "epochs": "model_train.epochs",
    "learning_rate": "model_train.learning_rate",
    "batch_size": "model_train.batch_size",
    "seed": "seed",
}


def cmd_train_model(args) -> int:
    started = time.time()
    settings = _settings(args, _TRAIN_FLAGS)
    out = _out_dir(args, settings)
    catalog, scenes, captions = _load_corpus(settings, args.scenes, args.captions)
    config = runconfig.model_config(settings)
    corpus = synthbench.training_triples(scenes, captions, catalog,
                                         config.n_visual, config.patch_dim)
    losses: list[str] = []
    params = train_lvlm(corpus, config, runconfig.lvlm_train_config(settings),
                        runconfig.rng_for(settings, "train-model"),
                        on_epoch=lambda e, l: losses.append(
                            json.dumps({"epoch": e, "loss": l})))
    model_path = out / settings["paths.model"]
    save_model(model_path, params, config)
    _write_jsonl(out / "train_log.jsonl", losses)
    runconfig.write_manifest(out, "train-model", settings, started,
                             {"model": str(model_path)})
    _print({"model": str(model_path), "parameters": n_params(params),
            "final_loss": json.loads(losses[-1])["loss"]})
    return 0


_PTRAIN_FLAGS = {
    "alpha": "purifier_train.alpha",
    "beta": "purifier_train.beta",
    "gamma": "purifier_train.gamma",
    "tau": "purifier_train.tau",
    "epochs": "purifier_train.epochs",
    "learning_rate": "purifier_train.learning_rate",
    "seed": "seed",
}


def cmd_train_purifier(args) -> int:
    started = time.time()
    settings = _settings(args, _PTRAIN_FLAGS)
    out = _out_dir(args, settings)
    params, config = load_model(_require(args.model, "model checkpoint"))
    catalog, scenes, captions = _load_corpus(settings, args.scenes, args.captions)
    corpus = synthbench.training_triples(scenes, captions, catalog,
                                         config.n_visual, config.patch_dim)
    pcfg = runconfig.purifier_config(settings)
    rng = runconfig.rng_for(settings, "train-purifier")
    pp = init_purifier(pcfg, n_params(params), rng.split("init"))
    losses: list[str] = []
    trained = train_purifier(params, config, pp, pcfg,
                             runconfig.purifier_train_config(settings), corpus,
                             rng.split("train"),
                             on_epoch=lambda e, l: losses.append(
                                 json.dumps({"epoch": e, "loss": l})))
    purifier_path = out / settings["paths.purifier"]
    save_purifier(purifier_path, trained, pcfg)
    _write_jsonl(out / "train_log.jsonl", losses)
    runconfig.write_manifest(out, "train-purifier", settings, started,
                             {"purifier": str(purifier_path)})
    _print({"purifier": str(purifier_path), "parameters": n_params(trained),
            "final_loss": json.loads(losses[-1])["loss"]})
    return 0


_DECODE_FLAGS = {
    "variant": "decode.variant",
    "lam": "decode.lam",
    "gamma": "decode.gamma",
    "tau": "decode.tau",
    "delta": "decode.delta",
    "alpha": "decode.alpha",
    "sampler": "decode.sampler",
    "top_p": "decode.top_p",
    "max_new_tokens": "decode.max_new_tokens",
    "order": "decode.order",
    "seed": "seed",
}


def cmd_decode(args) -> int:
    started = time.time()
    settings = _settings(args, _DECODE_FLAGS)
    out = _out_dir(args, settings)
    params, config = load_model(_require(args.model, "model checkpoint"))
    catalog = Catalog(int(settings["corpus.catalog_size"]))
    scenes = synthbench.read_scenes(_require(args.scenes, "scenes file"))
    if args.limit is not None:
        scenes = scenes[: args.limit]
    dcfg = runconfig.decode_config(settings)
    purifier = _load_purifier_if_needed(dcfg.variant, args.purifier)

    generated, steps, rates = [], [], []
    for scene in scenes:
        result = _decode_scene(params, config, purifier, scene, catalog, dcfg)
        generated.append(json.dumps({"scene_id": scene.scene_id,
                                     "tokens": result.tokens}))
        steps.append(json.dumps({
            "scene_id": scene.scene_id,
            "per_step": [{"token": s.token, "entropy": s.entropy,
                          "retained": s.retained, "log_ratio": s.log_ratio}
                         for s in result.per_step],
        }))
        rates.append(result)
    _write_jsonl(out / "generated.jsonl", generated)
    _write_jsonl(out / "steps.jsonl", steps)
    summary = synthbench.throughput(rates)
    runconfig.write_manifest(out, "decode", settings, started,
                             {"generated": str(out / "generated.jsonl"),
                              "steps": str(out / "steps.jsonl"),
                              "mean_tps": summary.mean_tps})
    _print({"scenes": len(scenes), "variant": dcfg.variant,
            "mean_tps": summary.mean_tps})
    return 0


def cmd_eval_chair(args) -> int:
    started = time.time()
    settings = _settings(args, {"seed": "seed"})
    out = _out_dir(args, settings)
    catalog, scenes, captions = _load_corpus(settings, args.scenes, args.captions)
    scores = chair_scores(scenes, captions)
    _write_jsonl(out / "chair.jsonl", [scores.to_json()])
    runconfig.write_manifest(out, "eval-chair", settings, started,
                             {"chair": str(out / "chair.jsonl")})
    _print(json.loads(scores.to_json()))
    return 0


def cmd_eval_pope(args) -> int:
    started = time.time()
    settings = _settings(args, dict(_DECODE_FLAGS))
    out = _out_dir(args, settings)
    params, config = load_model(_require(args.model, "model checkpoint"))
    catalog = Catalog(int(settings["corpus.catalog_size"]))
    scenes = synthbench.read_scenes(_require(args.scenes, "scenes file"))
    dcfg = runconfig.decode_config(settings)
    purifier = _load_purifier_if_needed(dcfg.variant, args.purifier)
    report = synthbench.pope_probe(params, config, purifier, scenes, dcfg,
                                   args.n_questions,
                                   seed=runconfig.derived_seed(settings, "pope"),
                                   catalog=catalog)
    _write_jsonl(out / "pope.jsonl", [report.to_json()])
    runconfig.write_manifest(out, "eval-pope", settings, started,
                             {"pope": str(out / "pope.jsonl")})
    _print(json.loads(report.to_json()))
    return 0


def cmd_oracle_check(args) -> int:
    started = time.time()
    settings = _settings(args, {"seed": "seed"})
    out = _out_dir(args, settings)
    rng = runconfig.rng_for(settings, "oracle-check")
    if args.model:
        params, config = load_model(_require(args.model, "model checkpoint"))
        worst = verify_factorization(params, config, args.trials, rng.split("trials"))
    else:
        config = runconfig.model_config(settings)
        worst = 0.0
        for i in range(args.trials):
            params = init_lvlm(config, rng.split(f"model-{i}"))
            worst = max(worst, verify_factorization(params, config, 1,
                                                    rng.split(f"trial-{i}")))
    record = {"trials": args.trials, "max_deviation": worst, "pass": worst < 1e-4}
    _write_jsonl(out / "oracle_check.jsonl", [json.dumps(record)])
    runconfig.write_manifest(out, "oracle-check", settings, started,
                             {"oracle_check": str(out / "oracle_check.jsonl")})
    _print(record)
    if not record["pass"]:
        raise NumericalError(f"factorization deviation {worst} exceeds 1e-4")
    return 0


def cmd_gradcheck(args) -> int:
    started = time.time()
    settings = _settings(args, {"seed": "seed"})
    out = _out_dir(args, settings)
    rng = runconfig.rng_for(settings, "gradcheck")
    records, worst = [], 0.0
    for i in range(args.checks):
        r = rng.split(f"check-{i}")
        config = ModelConfig(vocab_size=32, n_visual=4 + 2 * int(r.integers(0, 3)),
                             d_model=16, n_heads=2, d_head=8, n_layers=2,
                             max_seq=48, purify_layer=int(r.integers(0, 2)),
                             patch_dim=8)
        pcfg = PurifierConfig(n_blocks=1 + int(r.integers(0, 2)), d_model=16,
                              d_inner=4, n_heads=2, mlp_hidden=8, text_pos_max=32)
        params = init_lvlm(config, r.split("model"))
        pp = init_purifier(pcfg, 10 ** 6, r.split("purifier"))
        patches = r.split("scene").normal(shape=(config.n_visual, config.patch_dim))
        y = [int(t) for t in r.split("y").integers(4, config.vocab_size, size=4)]
        noise = r.split("noise").gumbel((config.n_visual, 2), dtype=np.float64)
        tcfg = PurifierTrainConfig(alpha=2.0, beta=5.0)
        keys = sorted(pp)

        def f(values, params=params, config=config, pcfg=pcfg, tcfg=tcfg,
              patches=patches, y=y, noise=noise, keys=keys):
            return training_loss(params, config, dict(zip(keys, values)), pcfg,
                                 tcfg, patches, [1, 16], y, 2, noise=noise)

        err = tc.gradcheck(f, [pp[k].astype(np.float64) for k in keys], h=1e-4)
        worst = max(worst, err)
        records.append(json.dumps({"check": i, "max_rel_error": err}))
    _write_jsonl(out / "gradcheck.jsonl", records)
    runconfig.write_manifest(out, "gradcheck", settings, started,
                             {"gradcheck": str(out / "gradcheck.jsonl")})
    _print({"checks": args.checks, "max_rel_error": worst, "pass": worst < 1e-3})
    if worst >= 1e-3:
        raise NumericalError(f"gradient error {worst} exceeds 1e-3")
    return 0


_SWEEP_PARAMS = {"lambda": "decode.lam", "alpha": "decode.alpha",
                 "gamma": "decode.gamma"}


def cmd_sweep(args) -> int:
    started = time.time()
    settings = _settings(args, dict(_DECODE_FLAGS))
    out = _out_dir(args, settings)
    if args.param not in _SWEEP_PARAMS:
        raise InvalidConfigError(
            f"sweep parameter must be one of {sorted(_SWEEP_PARAMS)}")
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise InvalidConfigError(f"bad sweep values {args.values!r}") from exc
    if not values:
        raise InvalidConfigError("sweep needs at least one value")

    params, config = load_model(_require(args.model, "model checkpoint"))
    catalog = Catalog(int(settings["corpus.catalog_size"]))
    scenes = synthbench.read_scenes(_require(args.scenes, "scenes file"))
    if args.limit is not None:
        scenes = scenes[: args.limit]

    key = _SWEEP_PARAMS[args.param]
    purifier = _load_purifier_if_needed(settings["decode.variant"], args.purifier)
    points = []
    for value in values:
        point_settings = dict(settings)
        point_settings[key] = value
        dcfg = runconfig.decode_config(point_settings)
        captions = [
            caption_record(scene.scene_id,
                           _decode_scene(params, config, purifier, scene,
                                         catalog, dcfg).tokens,
                           catalog)
            for scene in scenes
        ]
        scores = chair_scores(scenes, captions)
        points.append({"param": args.param, "value": value,
                       "c_s": scores.c_s, "c_i": scores.c_i})
    best = min(points, key=lambda p: (p["c_s"], p["value"]))
    _write_jsonl(out / "sweep.jsonl", [json.dumps(p) for p in points])
    runconfig.write_manifest(out, "sweep", settings, started,
                             {"sweep": str(out / "sweep.jsonl"),
                              "minimum": best})
    _print({"param": args.param, "points": len(points),
            "best_value": best["value"], "best_c_s": best["c_s"]})
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _add_common(sub):
    sub.add_argument("--config", help="key=value settings file or a run.json")
    sub.add_argument("--out-dir", help="output directory (default from settings)")
    sub.add_argument("--seed", type=int, help="root seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="midec",
        description="calibrated contrastive decoding with visual token "
                    "purification, at desk scale")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("synth-gen", help="generate a synthetic corpus")
    _add_common(p)
    p.add_argument("--catalog-size", type=int)
    p.add_argument("--n-scenes", type=int)
    p.add_argument("--objects-per-scene", type=int)
    p.add_argument("--bias", type=float)
    p.set_defaults(func=cmd_synth_gen)

    p = commands.add_parser("train-model", help="train the toy captioner")
    _add_common(p)
    p.add_argument("--scenes", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_train_model)

    p = commands.add_parser("train-purifier", help="train the visual purifier")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.set_defaults(func=cmd_train_purifier)

    def add_decode_flags(p):
        p.add_argument("--variant")
        p.add_argument("--lambda", dest="lam", type=float)
        p.add_argument("--gamma", type=float)
        p.add_argument("--tau", type=float)
        p.add_argument("--delta", type=float)
        p.add_argument("--alpha", type=float)
        p.add_argument("--sampler")
        p.add_argument("--top-p", type=float)
        p.add_argument("--max-new-tokens", type=int)
        p.add_argument("--order")

    p = commands.add_parser("decode", help="caption scenes with a trained model")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--purifier")
    p.add_argument("--scenes", required=True)
    p.add_argument("--limit", type=int)
    add_decode_flags(p)
    p.set_defaults(func=cmd_decode)

    p = commands.add_parser("eval-chair", help="score captions for hallucination")
    _add_common(p)
    p.add_argument("--scenes", required=True)
    p.add_argument("--captions", required=True)
    p.set_defaults(func=cmd_eval_chair)

    p = commands.add_parser("eval-pope", help="balanced presence probe")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--purifier")
    p.add_argument("--scenes", required=True)
    p.add_argument("--n-questions", type=int, default=50)
    add_decode_flags(p)
    p.set_defaults(func=cmd_eval_pope)

    p = commands.add_parser("oracle-check",
                            help="verify the stepwise decomposition identity")
    _add_common(p)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--model", help="check a trained checkpoint instead of "
                                   "fresh random models")
    p.set_defaults(func=cmd_oracle_check)

    p = commands.add_parser("gradcheck",
                            help="finite-difference check of the training loss")
    _add_common(p)
    p.add_argument("--checks", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)

    p = commands.add_parser("sweep", help="hyperparameter sweep over CHAIR")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--purifier")
    p.add_argument("--scenes", required=True)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True)
    p.add_argument("--limit", type=int)
    add_decode_flags(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        if isinstance(exc, FileNotFoundError):
            code = EXIT_MISSING_FILE
        elif isinstance(exc, NumericalError):
            code = EXIT_NUMERICAL
        elif isinstance(exc, (InvalidConfigError, InvalidInputError,
                              CheckpointError, EnumerationTooLargeError)):
            code = EXIT_INVALID_CONFIG
        elif isinstance(exc, MidecError):
            code = 1
        else:
            raise
        sys.stderr.write(json.dumps({"error": type(exc).__name__,
                                     "message": str(exc),
                                     "exit_code": code}) + "\n")
        return code


if __name__ == "__main__":
    sys.exit(main())
