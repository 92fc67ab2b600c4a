"""Sectioned key-value experiment configuration (INI syntax).

Sections: ``[corpus]``, ``[features]``, ``[model]``, ``[train]``,
``[method.<name>]`` (per-method overrides of ``[train]``), ``[eval]`` and
``[paths]``. Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .dsp import FeatureConfig
from .model import EncoderConfig
from .synthcorpus import PROFILES, ConfigError, CorpusConfig
from .uda import METHODS, TrainRunConfig

_CORPUS_KEYS = ("patients_per_domain", "clips_per_patient", "clip_duration", "injury_prior", "sample_rate",
                "source_profile", "target_profile", "within_patient_sd", "n_harmonics", "n_noise_recordings",
                "noise_recording_duration", "noise_recording_level_db")
_TRAIN_KEYS = tuple(f.name for f in fields(TrainRunConfig) if f.name not in ("method", "seed", "encoder"))
_FEATURE_KEYS = tuple(f.name for f in fields(FeatureConfig))
_MODEL_KEYS = ("n_blocks", "channels", "kernel_size", "pool")


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusConfig = CorpusConfig()
    corpus_seed: int = 0
    features: FeatureConfig = FeatureConfig()
    encoder: EncoderConfig = EncoderConfig()
    train: dict = field(default_factory=dict)
    methods: dict = field(default_factory=dict)
    n_seeds: int = 5
    window_s: float = 3.0
    work_dir: str = "work"
    corpus_dir: str = ""

    def run_config(self, method: str, seed: int = 0) -> TrainRunConfig:
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")
        opts = {**self.train, **self.methods.get(method, {})}
        cfg = replace(TrainRunConfig(), method=method, seed=seed, encoder=self.encoder, **opts)
        try:
            cfg.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    def resolved_corpus_dir(self) -> Path:
        return Path(self.corpus_dir) if self.corpus_dir else Path(self.work_dir) / "corpus"

    def to_dict(self) -> dict:
        return _sections(self)


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _sections(cfg: ExperimentConfig) -> dict:
    c = cfg.corpus
    out = {
        "corpus": {"seed": cfg.corpus_seed, **{k: getattr(c, k) for k in _CORPUS_KEYS}},
        "features": {k: getattr(cfg.features, k) for k in _FEATURE_KEYS},
        "model": {"n_blocks": cfg.encoder.n_blocks, "channels": list(cfg.encoder.channels),
                  "kernel_size": cfg.encoder.kernel_size, "pool": cfg.encoder.pool},
        "train": {k: cfg.train.get(k, getattr(TrainRunConfig(), k)) for k in _TRAIN_KEYS},
        "eval": {"n_seeds": cfg.n_seeds, "split_fractions": list(c.split_fractions), "window_s": cfg.window_s},
        "paths": {"work_dir": cfg.work_dir, "corpus_dir": cfg.corpus_dir},
    }
    for m in sorted(cfg.methods):
        out[f"method.{m}"] = dict(cfg.methods[m])
    return out


def to_ini(cfg: ExperimentConfig) -> str:
    """Render the fully resolved configuration, every default included."""
    parser = configparser.ConfigParser(interpolation=None)
    for name, values in _sections(cfg).items():
        parser[name] = {k: _fmt(v) for k, v in values.items()}
    buf = io.StringIO()
    buf.write("# cryda experiment configuration (all values shown are in effect)\n")
    parser.write(buf)
    return buf.getvalue()


def _convert(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, (tuple, list)):
            kind = type(default[0]) if default else float
            return tuple(kind(x) for x in raw.split(",") if x.strip())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None


def _check_keys(section: str, got, allowed) -> None:
    unknown = sorted(set(got) - set(allowed))
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s): {', '.join(unknown)}; allowed: {', '.join(sorted(allowed))}")


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    base = ExperimentConfig()
    corpus_over, feat_over, model_over, train_over, methods = {}, {}, {}, {}, {}
    n_seeds, window_s, work_dir, corpus_dir, seed = base.n_seeds, base.window_s, base.work_dir, "", 0
    split_fractions = base.corpus.split_fractions
    train_defaults = TrainRunConfig()
    for section in parser.sections():
        items = dict(parser.items(section))
        if section == "corpus":
            _check_keys(section, items, ("seed",) + _CORPUS_KEYS)
            for k, raw in items.items():
                if k == "seed":
                    seed = _convert(section, k, raw, 0)
                else:
                    corpus_over[k] = _convert(section, k, raw, getattr(base.corpus, k))
        elif section == "features":
            _check_keys(section, items, _FEATURE_KEYS)
            feat_over = {k: _convert(section, k, raw, getattr(base.features, k)) for k, raw in items.items()}
        elif section == "model":
            _check_keys(section, items, _MODEL_KEYS)
            model_over = {k: _convert(section, k, raw, getattr(base.encoder, k)) for k, raw in items.items()}
        elif section == "train":
            _check_keys(section, items, _TRAIN_KEYS)
            train_over = {k: _convert(section, k, raw, getattr(train_defaults, k)) for k, raw in items.items()}
        elif section.startswith("method."):
            name = section.split(".", 1)[1]
            if name not in METHODS:
                raise ConfigError(f"[{section}] unknown method {name!r}; valid methods: {', '.join(METHODS)}")
            _check_keys(section, items, _TRAIN_KEYS)
            methods[name] = {k: _convert(section, k, raw, getattr(train_defaults, k)) for k, raw in items.items()}
        elif section == "eval":
            _check_keys(section, items, ("n_seeds", "split_fractions", "window_s"))
            n_seeds = _convert(section, "n_seeds", items.get("n_seeds", str(n_seeds)), 0)
            window_s = _convert(section, "window_s", items.get("window_s", repr(window_s)), 0.0)
            if "split_fractions" in items:
                split_fractions = _convert(section, "split_fractions", items["split_fractions"], (0.0,))
        elif section == "paths":
            _check_keys(section, items, ("work_dir", "corpus_dir"))
            work_dir = items.get("work_dir", work_dir)
            corpus_dir = items.get("corpus_dir", corpus_dir)
        else:
            raise ConfigError(f"unknown section [{section}]")
    try:
        corpus = replace(base.corpus, split_fractions=tuple(split_fractions), **corpus_over)
        corpus.validate()
        features = replace(base.features, **feat_over)
        encoder = replace(base.encoder, **model_over)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if n_seeds < 1:
        raise ConfigError("[eval] n_seeds must be >= 1")
    if corpus.source_profile not in PROFILES or corpus.target_profile not in PROFILES:
        raise ConfigError(f"unknown domain profile; known: {sorted(PROFILES)}")
    cfg = ExperimentConfig(corpus, seed, features, encoder, train_over, methods, n_seeds, window_s, work_dir,
                           corpus_dir)
    for m in METHODS:
        cfg.run_config(m)  # validate every method's merged options early
    return cfg


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"))
