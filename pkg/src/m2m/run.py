"""Run configuration and the experiment drivers behind the command line."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from . import checkpoint as ckpt
from . import data
from .baselines import build_model
from .config import ModelConfig, TrainConfig, config_hash
from .data import ConfigError, GenConfig, SplitSpec
from .features import Features, FeatureSpec, featurize, vocab_from_config
from .metrics import MetricsReport, evaluate
from .training import train

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
SWEEP_AXES = {"T": "seq_len", "d": "d_scenario", "K": "meta_depth"}
ABLATIONS = {
    "full": {},
    "w/o MT": {"disable_meta_tower": True},
    "w/o MA": {"disable_meta_attention": True},
    "w/o TL": {"disable_transformer": True},
}

# Laptop-scale widths and schedule; the defaults follow the full-size model.
DESK_MODEL = {"d_input": 8, "d_view": 64, "d_scenario": 16, "scenario_hidden": [32], "meta_dim": 16}
DESK_TRAIN = {"epochs": 6, "ema_decay": 0.99}


@dataclass
class RunConfig:
    """Everything a command needs; every field has a default."""

    seed: int = 0
    variant: str = "m2m"
    dataset: str = "data"
    out: str = "runs"
    data: GenConfig = field(default_factory=GenConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    features: FeatureSpec = field(default_factory=FeatureSpec)
    model: dict = field(default_factory=dict)  # ModelConfig overrides; vocabularies come from the data
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: dict = field(default_factory=lambda: {"axis": "K", "values": [1, 2, 3, 4]})

    def __post_init__(self):
        names = {f.name for f in dataclasses.fields(ModelConfig)}
        unknown = set(self.model) - names
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"]["clip"] = list(d["train"]["clip"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        try:
            sections = {
                "data": GenConfig.from_dict(d.pop("data", {})),
                "split": SplitSpec(**d.pop("split", {})),
                "features": FeatureSpec(**d.pop("features", {})),
                "train": TrainConfig.from_dict(d.pop("train", {})),
            }
            cfg = cls(**d, **sections)
        except TypeError as err:
            raise ConfigError(str(err)) from err
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})") from err
        return cls.from_dict(raw)

    @classmethod
    def desk(cls, seed: int = 0, **overrides) -> "RunConfig":
        """Default data with the narrower model and short schedule that fit a single CPU core."""
        cfg = cls.from_dict({"model": dict(DESK_MODEL), "train": dict(DESK_TRAIN), **overrides})
        return cfg.with_seed(seed)

    def with_seed(self, seed: int) -> "RunConfig":
        """The run seed drives data generation, initialization and shuffling alike."""
        return dataclasses.replace(
            self,
            seed=seed,
            data=dataclasses.replace(self.data, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
        )

    def validate(self) -> None:
        self.data.validate()
        self.split.validate()
        if self.sweep.get("axis") not in SWEEP_AXES:
            raise ConfigError(f"sweep axis must be one of {sorted(SWEEP_AXES)}")
        self.model_config(vocab_from_config(self.data, self.features.n_buckets)).validate()

    def model_config(self, vocab: dict, **overrides) -> ModelConfig:
        kw = {"seq_len": self.features.seq_len or self.data.seq_len, "n_scenarios": self.data.n_scenarios}
        kw.update(self.model)
        kw.update(variant=self.variant, seed=self.seed)
        kw.update(overrides)
        try:
            return ModelConfig.from_vocab(vocab, **kw)
        except TypeError as err:
            raise ConfigError(str(err)) from err

    def hash(self) -> str:
        return config_hash(self.to_dict())


def revision() -> str:
    """Content hash of the package sources, in the style of a short commit id."""
    h = hashlib.sha1()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


# ---------------------------------------------------------------------------
# datasets on disk: <dir>/{train,valid,test}.jsonl + metadata.json


@dataclass
class Bundle:
    train: Features
    valid: Features
    test: Features
    gen: GenConfig
    digest: str  # hash of the dataset files (or of the in-memory features)


def generate_dataset(cfg: RunConfig, directory) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    samples, panel, _ = data.generate_with_panel(cfg.data)
    parts = data.split(samples, cfg.split)
    hashes = {name: data.save(part, directory / f"{name}.jsonl") for name, part in zip(SPLITS, parts)}
    correlations = data.empirical_correlations(panel, cfg.data)
    extra = {
        "split": dataclasses.asdict(cfg.split),
        "counts": {name: len(part) for name, part in zip(SPLITS, parts)},
        "files": hashes,
        "dataset_hash": dataset_hash(directory),
        "config_hash": cfg.hash(),
    }
    data.save_metadata(directory / "metadata.json", cfg.data, correlations, extra)
    return {"correlations": correlations, **extra}


def dataset_hash(directory) -> str:
    h = hashlib.sha256()
    for name in SPLITS:
        h.update(data.file_sha256(Path(directory) / f"{name}.jsonl").encode())
    return h.hexdigest()


def load_bundle(directory, spec: FeatureSpec | None = None) -> Bundle:
    directory = Path(directory)
    meta = json.loads((directory / "metadata.json").read_text(encoding="utf-8"))
    feats = [featurize(data.load(directory / f"{name}.jsonl"), spec) for name in SPLITS]
    return Bundle(*feats, gen=GenConfig.from_dict(meta["gen_config"]), digest=dataset_hash(directory))


def memory_bundle(gen: GenConfig, split: SplitSpec | None = None, spec: FeatureSpec | None = None) -> Bundle:
    """Generate, split and featurize without touching the disk."""
    parts = data.split(data.generate(gen), split)
    feats = [featurize(p, spec) for p in parts]
    h = hashlib.sha256("".join(f.digest() for f in feats).encode()).hexdigest()
    return Bundle(*feats, gen=gen, digest=h)


def with_seq_len(bundle: Bundle, steps: int) -> Bundle:
    """Keep only the most recent ``steps`` days of every sequence."""

    def cut(f: Features) -> Features:
        if steps > f.behavior_ids.shape[1]:
            raise ConfigError(f"T={steps} exceeds the stored {f.behavior_ids.shape[1]} steps")
        out = f.take(slice(None))
        out.behavior_ids = f.behavior_ids[:, -steps:]
        out.performance_ids = f.performance_ids[:, -steps:]
        return out

    return dataclasses.replace(bundle, train=cut(bundle.train), valid=cut(bundle.valid), test=cut(bundle.test))


# ---------------------------------------------------------------------------
# drivers


@dataclass
class Outcome:
    model: object
    history: list[dict]
    best_epoch: int
    report: MetricsReport
    resume: ckpt.ResumeState | None = None


def fit(bundle: Bundle, model_cfg: ModelConfig, train_cfg: TrainConfig, meta: dict | None = None,
        history_path=None, resume: ckpt.ResumeState | None = None, model=None) -> Outcome:
    model = build_model(model_cfg) if model is None else model
    res = train(model, bundle.train, bundle.valid, train_cfg, resume=resume, history_path=history_path)
    meta = dict(meta or {})
    meta.update(dataset_hash=bundle.digest, variant=model.cfg.variant, best_epoch=res.best_epoch)
    report = evaluate(model, bundle.test, meta=meta)
    return Outcome(model, res.history, res.best_epoch, report, res.resume)


def ablate(bundle: Bundle, cfg: RunConfig, meta: dict | None = None) -> dict[str, Outcome]:
    """Full model and its three ablations on the same data and seed."""
    vocab = vocab_from_config(bundle.gen, cfg.features.n_buckets)
    out = {}
    for name, flags in ABLATIONS.items():
        before = bundle.digest
        out[name] = fit(bundle, cfg.model_config(vocab, variant="m2m", **flags), cfg.train, meta)
        if bundle.digest != before:
            raise RuntimeError("dataset changed during the ablation")
    return out


def sweep(bundle: Bundle, cfg: RunConfig, axis: str, values, meta: dict | None = None) -> list[dict]:
    """Retrain from scratch at each value of one hyperparameter; rows sorted by value."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    vocab = vocab_from_config(bundle.gen, cfg.features.n_buckets)
    rows = []
    for value in sorted(values):
        b = with_seq_len(bundle, int(value)) if axis == "T" else bundle
        mcfg = cfg.model_config(vocab, **{SWEEP_AXES[axis]: int(value)})
        o = fit(b, mcfg, cfg.train, meta)
        rows.append({"value": value, "overall_nmae": o.report.overall_nmae, "overall_smape": o.report.overall_smape})
    return rows
