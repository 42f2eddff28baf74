"""Experiment configuration: an INI file mapped onto typed sections.

Every key must belong to a known section and field; values are converted to
the type of the field's default.  Lists are comma separated.
"""

from __future__ import annotations

import configparser
import dataclasses
import importlib.resources
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

VARIANTS = ("x-vector", "MT-NSA", "MT-SEN-style", "MT-shared", "MT-Ori-CS")
VARIANT_MODE = {"MT-NSA": "improved", "MT-SEN-style": "improved", "MT-shared": "shared",
                "MT-Ori-CS": "original"}


@dataclass
class ExperimentSection:
    variant: str = "MT-NSA"
    seed: int = 0
    single_threaded: bool = True


@dataclass
class CorpusSection:
    manifest: str = ""  # empty -> synthetic corpus
    n_speakers: int = 50
    utts_per_speaker: int = 6
    eval_speakers: int = 20
    eval_utts_per_speaker: int = 6
    frames_per_utt: int = 400
    feat_dim: int = 30
    between_within_ratio: float = 10.0
    within_std: float = 1.0
    trial_policy: str = "exhaustive"
    nontarget_ratio: float = 4.0


@dataclass
class NsaCorpusSection:
    attribute_map: str = ""  # empty -> shipped English table
    alignments: str = ""  # empty -> synthetic tri-SAU corpus
    alignment_units: str = "sau"  # sau ids or phoneme symbols
    features: str = ""  # feature archive for imported alignments
    n_utts: int = 40
    saus_per_utt: int = 60
    frames_per_state: int = 3
    center_scale: float = 3.0
    context_scale: float = 1.0
    noise_std: float = 1.0
    heldout_fraction: float = 0.1


@dataclass
class FeaturesSection:
    cmn: bool = False
    cmn_window_s: float = 3.0
    vad: bool = True
    sample_rate: int = 8000


@dataclass
class TyingSection:
    label_source: str = "tree"  # tree | external
    external_labels: str = ""
    target_leaves: int = 400
    min_gain: float = 0.0


@dataclass
class NetworkSection:
    frame_dims: tuple = (512, 512, 512, 512, 1536)
    segment_dims: tuple = (512, 512)
    nsa_fc_dim: int = 128
    cross_stitch_layers: tuple = (1, 2)
    alpha_init: float = 0.1
    alpha_granularity: str = "scalar"
    dtype: str = "float32"


@dataclass
class TrainingSection:
    epochs: int = 3
    batch_size: int = 64
    lr_initial: float = 1e-3
    lr_final: float = 1e-4
    lr_shape: str = "exponential"
    weight_decay: float = 1e-4
    chunk_min_s: float = 2.0
    chunk_max_s: float = 4.0
    schedule: tuple = ("speaker", "nsa")


@dataclass
class BackendSection:
    lda_dim: int = 70
    em_iters: int = 10
    length_norm: bool = False


@dataclass
class EvalSection:
    p_target: float = 0.001
    c_miss: float = 1.0
    c_fa: float = 1.0
    figures: bool = True


SECTIONS = {
    "experiment": ExperimentSection,
    "corpus": CorpusSection,
    "nsa_corpus": NsaCorpusSection,
    "features": FeaturesSection,
    "tying": TyingSection,
    "network": NetworkSection,
    "training": TrainingSection,
    "backend": BackendSection,
    "eval": EvalSection,
}


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    nsa_corpus: NsaCorpusSection = field(default_factory=NsaCorpusSection)
    features: FeaturesSection = field(default_factory=FeaturesSection)
    tying: TyingSection = field(default_factory=TyingSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    backend: BackendSection = field(default_factory=BackendSection)
    eval: EvalSection = field(default_factory=EvalSection)
    base_dir: str = "."  # relative paths in the file resolve against this

    def resolve(self, path):
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def variant(self):
        return self.experiment.variant

    @property
    def uses_nsa(self):
        return self.variant != "x-vector"

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.tying.label_source not in ("tree", "external"):
            raise ConfigError("tying.label_source must be 'tree' or 'external'")
        if self.variant == "MT-SEN-style" and self.tying.label_source != "external":
            raise ConfigError("MT-SEN-style needs tying.label_source = external")
        if self.tying.label_source == "external" and self.uses_nsa and not self.tying.external_labels:
            raise ConfigError("tying.external_labels is required for external labels")
        if self.corpus.trial_policy not in ("exhaustive", "sampled"):
            raise ConfigError("corpus.trial_policy must be 'exhaustive' or 'sampled'")
        if self.nsa_corpus.alignment_units not in ("sau", "phoneme"):
            raise ConfigError("nsa_corpus.alignment_units must be 'sau' or 'phoneme'")
        if bool(self.nsa_corpus.alignments) != bool(self.nsa_corpus.features):
            raise ConfigError("nsa_corpus.alignments and nsa_corpus.features go together")
        if not 0 <= self.nsa_corpus.heldout_fraction < 1:
            raise ConfigError("nsa_corpus.heldout_fraction must lie in [0, 1)")
        if self.network.dtype not in ("float32", "float64"):
            raise ConfigError("network.dtype must be float32 or float64")
        if len(self.network.frame_dims) != 5:
            raise ConfigError("network.frame_dims needs five entries")
        if not 0 < self.eval.p_target < 1:
            raise ConfigError("eval.p_target must lie in (0, 1)")
        if self.corpus.manifest == "" and self.corpus.eval_speakers < 2:
            raise ConfigError("the synthetic corpus needs at least two evaluation speakers")
        return self


def _convert(raw: str, default, key):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(raw)
            return configparser.ConfigParser.BOOLEAN_STATES[low]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(s) for s in items)
            return tuple(items)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None


def parse_config(text: str, source="<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        obj = getattr(cfg, section)
        names = {f.name: f for f in dataclasses.fields(obj)}
        for key, raw in parser.items(section):
            if key not in names:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            setattr(obj, key, _convert(raw, getattr(obj, key), f"{section}.{key}"))
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    cfg = parse_config(text, str(path))
    cfg.base_dir = str(Path(path).resolve().parent)
    return cfg


def _render(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def format_config(cfg: ExperimentConfig) -> str:
    out = []
    for section in SECTIONS:
        out.append(f"[{section}]")
        for f in dataclasses.fields(getattr(cfg, section)):
            out.append(f"{f.name} = {_render(getattr(getattr(cfg, section), f.name))}")
        out.append("")
    return "\n".join(out)


def format_config_section(cfg, section):
    """One-line rendering of a section, used to key cached stages."""
    obj = getattr(cfg, section)
    return ";".join(f"{f.name}={_render(getattr(obj, f.name))}" for f in dataclasses.fields(obj))


def preset_text(name: str) -> str:
    try:
        return importlib.resources.files("attrxvec").joinpath(f"data/{name}.ini").read_text(
            encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"no shipped config named {name!r}") from None


def preset_config(name: str) -> ExperimentConfig:
    return parse_config(preset_text(name), f"<preset {name}>")
