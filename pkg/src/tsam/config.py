"""Flat "key = value" run configuration with layered overrides.

Keys are dotted (sacl.tau = 0.02) and typed by a fixed schema; unknown or
duplicate keys are rejected so typos fail loudly. Values resolve in order
defaults < config file < TSAM_SEED environment variable < command-line
overrides, and the resolved state renders back to the same text format for
logging and checkpoint embedding.
"""

from __future__ import annotations

from .errors import ConfigError
from .sacl import SaclConfig
from .trainer import TrainConfig

# key -> (type tag, default); declaration order is the render order
SCHEMA = {
    "seed": ("int", 0),
    "data.dir": ("str", ""),
    "data.visual_bank": ("str", ""),
    "data.textual_bank": ("str", ""),
    "data.max_tokens": ("int", 16),
    "model.dim": ("int", 64),
    "model.score_fn": ("str", "tucker"),
    "model.score_mode": ("str", "decoder"),
    "model.enable_fgmaf": ("bool", True),
    "model.fusion_mode": ("str", "weighted"),
    "model.pooling": ("str", "ent"),
    "encoder.layers": ("int", 2),
    "encoder.heads": ("int", 4),
    "encoder.ffn_dim": ("int", 128),
    "encoder.pos_visual": ("bool", False),
    "encoder.pos_textual": ("bool", True),
    "decoder.layers": ("int", 2),
    "decoder.heads": ("int", 4),
    "decoder.ffn_dim": ("int", 128),
    "sacl.tau": ("float", 0.02),
    "sacl.k": ("int", 16),
    "sacl.enable_sv": ("bool", True),
    "sacl.enable_st": ("bool", True),
    "train.lr": ("float", 1e-3),
    "train.epochs": ("int", 10),
    "train.batch_size": ("int", 128),
    "train.label_smoothing": ("float", 0.0),
    "train.checkpoint": ("str", ""),
    "train.log": ("str", ""),
}


def _parse_value(key, raw):
    kind = SCHEMA[key][0]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw not in ("true", "false"):
                raise ValueError
            return raw == "true"
        return raw
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {raw!r}") from None


def _render_value(key, value):
    if SCHEMA[key][0] == "bool":
        return "true" if value else "false"
    return str(value)


def parse_text(text, source="<config>"):
    """Text -> {key: typed value}; rejects unknown/duplicate/malformed keys."""
    out = {}
    for lineno, line in enumerate(text.split("\n"), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


class RunConfig:
    """Resolved configuration: a complete typed value for every schema key."""

    def __init__(self, values=None):
        self.values = {k: default for k, (_, default) in SCHEMA.items()}
        if values:
            self.values.update(values)

    def __getitem__(self, key):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    def render(self):
        # rstrip keeps empty-string values from leaving trailing spaces
        return "\n".join(f"{k} = {_render_value(k, self.values[k])}".rstrip()
                         for k in SCHEMA) + "\n"

    def train_config(self):
        v = self.values
        return TrainConfig(
            dim=v["model.dim"],
            score_fn=v["model.score_fn"],
            score_mode=v["model.score_mode"],
            enable_fgmaf=v["model.enable_fgmaf"],
            fusion_mode=v["model.fusion_mode"],
            pooling=v["model.pooling"],
            max_tokens=v["data.max_tokens"],
            enc_layers=v["encoder.layers"],
            enc_heads=v["encoder.heads"],
            enc_ffn=v["encoder.ffn_dim"],
            pos_visual=v["encoder.pos_visual"],
            pos_textual=v["encoder.pos_textual"],
            dec_layers=v["decoder.layers"],
            dec_heads=v["decoder.heads"],
            dec_ffn=v["decoder.ffn_dim"],
            sacl=SaclConfig(tau=v["sacl.tau"], k=v["sacl.k"],
                            enable_sv=v["sacl.enable_sv"],
                            enable_st=v["sacl.enable_st"],
                            seed=v["seed"]),
            lr=v["train.lr"],
            epochs=v["train.epochs"],
            batch_size=v["train.batch_size"],
            label_smoothing=v["train.label_smoothing"],
            checkpoint_path=v["train.checkpoint"],
            log_path=v["train.log"],
            seed=v["seed"],
        )


def resolve(file_text=None, source="<config>", env=None, overrides=None):
    """Layer defaults < file < TSAM_SEED < explicit overrides."""
    values = {}
    if file_text is not None:
        values.update(parse_text(file_text, source))
    if env and env.get("TSAM_SEED") is not None:
        try:
            values["seed"] = int(env["TSAM_SEED"])
        except ValueError:
            raise ConfigError(
                f"TSAM_SEED must be an integer, got {env['TSAM_SEED']!r}") from None
    for key, raw in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _parse_value(key, raw) if isinstance(raw, str) else raw
    return RunConfig(values)
