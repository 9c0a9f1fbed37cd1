"""Flat key=value run configuration with documented defaults.

Settings live in a plain text file, one ``key = value`` per line with
``#`` comments; every key below has a default, unknown keys are rejected,
and command-line flags override file values which override defaults.  A
finished run writes ``run.json`` capturing the resolved settings, so any
run can be replayed by pointing ``--config`` at its own manifest.

One root ``seed`` drives all randomness; subsystems derive their streams
from it through labeled substreams, so a single value in the manifest
reproduces corpus, training, and decoding alike.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

from . import __version__
from .decoding import DecodeConfig
from .errors import InvalidConfigError
from .model import LvlmTrainConfig, ModelConfig
from .purifier import PurifierConfig, PurifierTrainConfig
from .tensorcore import Rng

# every known key with its default; the value's type is the key's type
DEFAULTS: dict[str, object] = {
    "seed": 0,                      # root seed; all streams derive from it

    "model.vocab_size": 256,
    "model.n_visual": 16,
    "model.d_model": 64,
    "model.n_heads": 4,
    "model.d_head": 16,
    "model.n_layers": 4,
    "model.max_seq": 96,
    "model.purify_layer": 0,
    "model.patch_dim": 32,

    "decode.lam": 0.5,
    "decode.gamma": 0.8,
    "decode.tau": 1.0,
    "decode.delta": 0.1,
    "decode.alpha": 300.0,
    "decode.variant": "full",
    "decode.sampler": "greedy",
    "decode.top_p": 0.9,
    "decode.max_new_tokens": 24,
    "decode.eos_token": 2,
    "decode.order": "mask_first",

    "model_train.learning_rate": 3e-3,
    "model_train.epochs": 8,
    "model_train.batch_size": 8,
    "model_train.image_dropout": 0.5,

    "purifier.n_blocks": 1,
    "purifier.d_model": 64,
    "purifier.d_inner": 8,
    "purifier.n_heads": 2,
    "purifier.mlp_hidden": 16,
    "purifier.tau": 1.0,
    "purifier.text_pos_max": 48,

    "purifier_train.alpha": 300.0,
    "purifier_train.beta": 500.0,
    "purifier_train.gamma": 0.8,
    "purifier_train.tau": 0.6,
    "purifier_train.learning_rate": 2e-3,
    "purifier_train.epochs": 5,
    "purifier_train.batch_size": 8,
    "purifier_train.attn_from_masked": True,
    "purifier_train.lr_decay_after": 3,
    "purifier_train.lr_decay_factor": 0.25,

    "corpus.catalog_size": 12,
    "corpus.n_scenes": 600,
    "corpus.objects_per_scene": 2,
    "corpus.bias": 0.3,

    "paths.out_dir": "runs",
    "paths.model": "model.bin",
    "paths.purifier": "purifier.bin",
    "paths.scenes": "scenes.jsonl",
    "paths.captions": "captions.jsonl",
}


def parse_value(key: str, text: str):
    """Coerce ``text`` to the type of the key's default."""
    if key not in DEFAULTS:
        raise InvalidConfigError(f"unknown setting {key!r}")
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise InvalidConfigError(
            f"setting {key!r} expects a {type(default).__name__}, got {text!r}"
        ) from exc


def load_config_file(path) -> dict[str, object]:
    """Read overrides from a key=value file or a previous run's manifest."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    if path.suffix == ".json":
        blob = json.loads(path.read_text(encoding="utf-8"))
        raw = blob.get("settings", blob)
        out = {}
        for key, value in raw.items():
            if key not in DEFAULTS:
                raise InvalidConfigError(f"unknown setting {key!r} in {path}")
            out[key] = parse_value(key, str(value))
        return out

    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise InvalidConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        out[key.strip()] = parse_value(key.strip(), value)
    return out


def resolve(file_overrides: dict | None = None,
            flag_overrides: dict | None = None) -> dict[str, object]:
    """Merge with flag > file > default precedence; values type-checked."""
    settings = dict(DEFAULTS)
    for source in (file_overrides or {}), (flag_overrides or {}):
        for key, value in source.items():
            if key not in DEFAULTS:
                raise InvalidConfigError(f"unknown setting {key!r}")
            settings[key] = parse_value(key, str(value))
    return settings


def _section(settings: dict, prefix: str) -> dict:
    plen = len(prefix) + 1
    return {k[plen:]: v for k, v in settings.items() if k.startswith(prefix + ".")}


def model_config(settings: dict) -> ModelConfig:
    return ModelConfig(**_section(settings, "model"))


def decode_config(settings: dict) -> DecodeConfig:
    return DecodeConfig(seed=derived_seed(settings, "decode"),
                        **_section(settings, "decode"))


def lvlm_train_config(settings: dict) -> LvlmTrainConfig:
    return LvlmTrainConfig(**_section(settings, "model_train"))


def purifier_config(settings: dict) -> PurifierConfig:
    return PurifierConfig(**_section(settings, "purifier"))


def purifier_train_config(settings: dict) -> PurifierTrainConfig:
    return PurifierTrainConfig(**_section(settings, "purifier_train"))


def derived_seed(settings: dict, label: str) -> int:
    """Deterministic per-subsystem seed fanned out from the root seed."""
    return int(Rng(int(settings["seed"])).split(f"seed-{label}").integers(0, 2 ** 31))


def rng_for(settings: dict, label: str) -> Rng:
    return Rng(int(settings["seed"])).split(label)


def write_manifest(out_dir, command: str, settings: dict, started: float,
                   outputs: dict | None = None) -> Path:
    """Drop run.json: resolved settings, root seed, version, wall time."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": f"midec-{__version__}",
        "seed": int(settings["seed"]),
        "settings": {k: settings[k] for k in sorted(settings)},
        "wall_time": time.time() - started,
        "outputs": outputs or {},
    }
    path = out_dir / "run.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path
