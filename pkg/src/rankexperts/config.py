"""Run configuration: one JSON file, strict keys, paths relative to the file.

Schema (every section and key optional; defaults shown by ``default_config``)::

    seed            global seed (int)
    out             output directory
    lm              n_blocks, d_model, n_heads, n_kv_heads, d_ff, max_seq
    lm_train        steps, batch_size, seq_len, lr, weight_decay
    corpus          domains, size, holdout
    compress        ratio, whitening, store_multiplier, jitter, density,
                    calib_domain, calib_sequences, calib_seq_len
    router          RouterTrainConfig fields (minus seed) plus
                    sequences_per_domain, seq_len
    cache           prompts_per_domain, prompt_len, min_similarity, psi
    eval            sequences_per_domain, seq_len, window, stream_windows,
                    stream_calib_domain
    bench           batch_sizes, seq_len, repeats
    observe         decode_steps, decode_prompt_len, sensitivity_matrices,
                    sensitivity_domains, sensitivity_sequences, pair_prompts_per_domain
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class LMSection:
    n_blocks: int = 3
    d_model: int = 96
    n_heads: int = 4
    n_kv_heads: int = 4
    d_ff: int = 256
    max_seq: int = 256


@dataclass
class LMTrainSection:
    steps: int = 600
    batch_size: int = 16
    seq_len: int = 128
    lr: float = 3e-3
    weight_decay: float = 0.01


@dataclass
class CorpusSection:
    domains: list = field(default_factory=lambda: ["markov_text", "arithmetic", "keyvalue", "uniform"])
    size: int = 65536
    holdout: float = 0.2


@dataclass
class CompressSection:
    ratio: float = 0.4
    whitening: bool = True
    store_multiplier: float = 2.0
    jitter: float | None = None
    density: str = "energy"
    calib_domain: str = "markov_text"
    calib_sequences: int = 64
    calib_seq_len: int = 128


@dataclass
class RouterSection:
    learning_rate: float = 2e-4
    weight_decay: float = 1e-3
    warmup_fraction: float = 0.1
    epochs: int = 5
    batch_size: int = 64
    tau: float = 1.0
    eps: float = 1e-8
    init: str = "regression"
    init_ridge: float = 0.1
    standardize: bool = True
    sequences_per_domain: int = 128
    seq_len: int = 128


@dataclass
class CacheSection:
    prompts_per_domain: int = 16
    prompt_len: int = 64
    min_similarity: float = 0.0
    psi: float = 0.9


@dataclass
class EvalSection:
    sequences_per_domain: int = 8
    seq_len: int = 128
    window: int = 128
    stream_windows: dict = field(default_factory=lambda: {"arithmetic": 20, "markov_text": 2,
                                                          "keyvalue": 2})
    stream_calib_domain: str = "arithmetic"


@dataclass
class BenchSection:
    batch_sizes: list = field(default_factory=lambda: [1, 8])
    seq_len: int = 64
    repeats: int = 5


@dataclass
class ObserveSection:
    decode_steps: int = 60
    decode_prompt_len: int = 64
    sensitivity_matrices: list = field(default_factory=lambda: ["blocks.1.up"])
    sensitivity_domains: list = field(default_factory=lambda: ["markov_text", "arithmetic"])
    sensitivity_sequences: int = 4
    pair_prompts_per_domain: int = 10


_SECTIONS = {"lm": LMSection, "lm_train": LMTrainSection, "corpus": CorpusSection,
             "compress": CompressSection, "router": RouterSection, "cache": CacheSection,
             "eval": EvalSection, "bench": BenchSection, "observe": ObserveSection}


@dataclass
class RunConfig:
    seed: int = 0
    out: Path = Path("run")
    lm: LMSection = field(default_factory=LMSection)
    lm_train: LMTrainSection = field(default_factory=LMTrainSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    compress: CompressSection = field(default_factory=CompressSection)
    router: RouterSection = field(default_factory=RouterSection)
    cache: CacheSection = field(default_factory=CacheSection)
    eval: EvalSection = field(default_factory=EvalSection)
    bench: BenchSection = field(default_factory=BenchSection)
    observe: ObserveSection = field(default_factory=ObserveSection)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["out"] = str(self.out)
        return d


def _section(cls, raw, name):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    try:
        return cls(**raw)
    except TypeError as e:
        raise ConfigError(f"bad section {name!r}: {e}") from None


def from_dict(raw: dict, base_dir: Path | None = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - {"seed", "out", *_SECTIONS})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    base_dir = Path(base_dir or ".")
    out = Path(raw.get("out", "run"))
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    cfg = RunConfig(seed=seed, out=out if out.is_absolute() else (base_dir / out).resolve(),
                    **{k: _section(cls, raw.get(k, {}), k) for k, cls in _SECTIONS.items()})
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    return from_dict(raw, path.parent.resolve())


def default_config(out=None) -> RunConfig:
    cfg = RunConfig()
    if out is not None:
        cfg.out = Path(out).resolve()
    return cfg


def validate(cfg: RunConfig):
    from .corpus import KINDS

    for d in cfg.corpus.domains:
        if d not in KINDS:
            raise ConfigError(f"unknown corpus domain {d!r}")
    if cfg.compress.calib_domain not in KINDS:
        raise ConfigError(f"unknown calibration domain {cfg.compress.calib_domain!r}")
    for d in list(cfg.eval.stream_windows) + [cfg.eval.stream_calib_domain] + list(cfg.observe.sensitivity_domains):
        if d not in KINDS:
            raise ConfigError(f"unknown domain {d!r}")
    try:
        lm_config(cfg)
        compression_config(cfg)
        router_config(cfg)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if cfg.eval.window > cfg.lm.max_seq or cfg.eval.seq_len > cfg.lm.max_seq:
        raise ConfigError("eval window and seq_len must not exceed lm.max_seq")
    if cfg.bench.repeats < 3:
        raise ConfigError("bench.repeats must be at least 3")
    if not 0 < cfg.cache.psi <= 1:
        raise ConfigError("cache.psi must lie in (0, 1]")


def lm_config(cfg: RunConfig):
    from .lm import ToyLMConfig

    return ToyLMConfig(**asdict(cfg.lm), seed=cfg.seed)


def compression_config(cfg: RunConfig, ratio: float | None = None):
    from .factorizer import CompressionConfig

    c = cfg.compress
    return CompressionConfig(ratio=c.ratio if ratio is None else ratio, whitening=c.whitening,
                             store_multiplier=c.store_multiplier, jitter=c.jitter, density=c.density)


def router_config(cfg: RunConfig):
    from .router import RouterTrainConfig

    r = asdict(cfg.router)
    r.pop("sequences_per_domain")
    r.pop("seq_len")
    return RouterTrainConfig(**r, seed=cfg.seed)
