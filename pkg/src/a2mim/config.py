"""Run configuration: a strict, flat-namespaced key space stored as INI text.

Grammar::

    [section]            one of data, mask, model, train, probe
    key = value          value parsed by the key's declared type

Lists are comma separated; optional values accept ``none``; booleans accept
``true/false/yes/no/1/0``.  Every key is declared in ``SCHEMA``; anything
else is rejected before work starts.  ``load_config`` layers the file and
``section.key=value`` overrides on top of the defaults.
"""

import configparser
import io
from pathlib import Path

from .errors import ConfigError

__all__ = ["SCHEMA", "RunConfig", "load_config", "parse_override", "dump_config"]

_BOOL = {"true": True, "yes": True, "1": True, "on": True, "false": False, "no": False, "0": False, "off": False}


def _bool(text):
    try:
        return _BOOL[text.strip().lower()]
    except KeyError:
        raise ValueError(f"not a boolean: {text!r}") from None


def _optional(conv):
    def parse(text):
        return None if text.strip().lower() in ("", "none", "auto") else conv(text)
    parse.optional = True
    return parse


def _list(conv):
    def parse(text):
        return tuple(conv(v) for v in text.split(",") if v.strip())
    return parse


def _choice(*options):
    def parse(text):
        text = text.strip()
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


def _str(text):
    return text.strip()


# key -> (parser, default text)
SCHEMA = {
    "data": {
        "root": (_str, "data/shapes"),
        "train_split": (_str, "train"),
        "eval_split": (_str, "val"),
        "image_size": (int, "32"),
        "num_classes": (_optional(int), "none"),
        "mean": (_optional(_list(float)), "auto"),
        "std": (_optional(_list(float)), "auto"),
        "crop_scale": (_list(float), "0.8, 1.0"),
        "hflip": (_bool, "true"),
        "synthetic_per_class": (int, "0"),
        "synthetic_eval_per_class": (int, "100"),
    },
    "mask": {
        "ratio": (float, "0.6"),
        "patch_size": (int, "4"),
        "fill": (_choice("image", "visible", "dataset"), "image"),
    },
    "model": {
        "family": (_choice("transformer", "cnn"), "transformer"),
        "depth": (int, "6"),
        "width": (int, "192"),
        "heads": (int, "3"),
        "patch_size": (int, "4"),
        "mlp_ratio": (float, "4"),
        "stage_blocks": (_list(int), "2, 2, 2, 2"),
        "stage_widths": (_list(int), "32, 64, 128, 256"),
        "injection_point": (_optional(int), "auto"),
        "checkpoint": (_optional(_str), "none"),
    },
    "train": {
        "epochs": (int, "30"),
        "batch_size": (int, "128"),
        "lr": (float, "1e-3"),
        "weight_decay": (float, "0.05"),
        "warmup_epochs": (float, "3"),
        "schedule": (_choice("cosine", "step"), "cosine"),
        "milestone_epoch": (_optional(int), "none"),
        "lambda_freq": (float, "0.1"),
        "normalize_omega": (_bool, "false"),
        "clip_grad": (_optional(float), "auto"),
        "augment": (_bool, "true"),
        "checkpoint_every": (int, "0"),
        "num_workers": (int, "0"),
        "resume": (_optional(_str), "none"),
        "seed": (int, "0"),
    },
    "probe": {
        "ratios": (_list(float), "0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9"),
        "mode": (_choice("random", "salient"), "random"),
        "patch_size": (int, "4"),
        "grid": (int, "8"),
        "fractions": (_list(float), ", ".join(f"{0.05 * k:.2f}" for k in range(20))),
        "images": (int, "8"),
        "pairs": (int, "4"),
        "contexts": (int, "16"),
        "batch_size": (int, "256"),
        "seed": (int, "0"),
    },
}


class RunConfig(dict):
    """Nested ``{section: {key: value}}`` plus the text each value came from."""

    def __init__(self, values, texts):
        super().__init__(values)
        self.texts = texts

    def get_key(self, dotted):
        section, key = dotted.split(".", 1)
        return self[section][key]


def _split_key(dotted):
    if "." not in dotted:
        raise ConfigError(f"config key {dotted!r} must look like section.key", key=dotted)
    section, key = dotted.split(".", 1)
    if section not in SCHEMA or key not in SCHEMA[section]:
        raise ConfigError(f"unknown config key {dotted!r}", key=dotted)
    return section, key


def parse_override(text):
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value", key=text)
    dotted, value = text.split("=", 1)
    section, key = _split_key(dotted.strip())
    return section, key, value.strip()


def load_config(path=None, overrides=()):
    """Defaults, then the config file, then ``section.key=value`` overrides."""
    texts = {s: {k: default for k, (_, default) in keys.items()} for s, keys in SCHEMA.items()}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
        parser.optionxform = str
        try:
            read = parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if not read:
            raise ConfigError(f"config file {path} not found", key="--config")
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}]", key=section)
            for key, value in parser.items(section):
                _split_key(f"{section}.{key}")
                texts[section][key] = value
    for text in overrides:
        section, key, value = parse_override(text)
        texts[section][key] = value
    values = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (conv, _) in keys.items():
            try:
                values[section][key] = conv(texts[section][key])
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {exc}", key=f"{section}.{key}") from None
    return RunConfig(values, texts)


def dump_config(cfg, path=None):
    """Render the effective config as INI text; write it when ``path`` is given."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in SCHEMA:
        parser[section] = dict(cfg.texts[section])
    buf = io.StringIO()
    parser.write(buf)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
