"""Experiment configuration: sectioned ``key = value`` files read with
:mod:`configparser`, validated into plain dataclasses.

Sections: ``[experiment]``, ``[dataset]``, ``[network]`` (optionally
``[network.<modality>]`` overrides), ``[fusion]``, ``[train]`` with
``[train.<phase>]`` and ``[train.pretrain_modality.<modality>]`` overrides,
and ``[eval]``.
"""
import configparser
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

from .fusion import FEATURE_KINDS, taps_for
from .modality import NetworkSpec, SpecError, TapSpec
from .synthdata import AugmentConfig, NoiseProfile
from .tensor import ConfigurationError
from .train import PHASES, TrainConfig

MODEL_KINDS = ("unimodal", "score_sum", "score_major") + FEATURE_KINDS

KNOWN = {
    "experiment": {"name", "seeds", "dtype", "snapshot"},
    "dataset": {"subjects", "modalities", "samples_per_subject", "tuples_per_subject", "image_shape",
                "separation", "noise", "occlusions", "occlusion_size", "jitter", "augment", "normalize",
                "dual_template"},
    "network": {"input_shape", "blocks", "pool_windows", "width_scale", "embedding_dim", "taps"},
    "fusion": {"kinds", "fusion_dim", "groups"},
    "train": {f.name for f in fields(TrainConfig)},
    "eval": {"ks", "metrics_csv", "cmc_svg", "summary"},
}


class ConfigError(ValueError):
    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class DatasetSection:
    subjects: int
    modalities: List[str]
    samples_per_subject: int
    tuples_per_subject: int
    image_shape: Tuple[int, int, int]
    separation: float
    profiles: Dict[str, NoiseProfile]
    augment: List[str] = field(default_factory=list)
    normalize: bool = True
    dual_template: List[str] = field(default_factory=list)


@dataclass
class ExperimentConfig:
    name: str
    seeds: List[int]
    dtype: str
    snapshot: bool
    dataset: DatasetSection
    networks: Dict[str, NetworkSpec]
    kinds: List[str]
    fusion_dim: int
    groups: Optional[List[List[str]]]
    train: Dict[str, TrainConfig]                  # phase -> config
    pretrain: Dict[str, TrainConfig]               # modality -> config
    ks: List[int]
    metrics_csv: str = "metrics.csv"
    cmc_svg: str = "cmc.svg"
    summary: str = "summary.txt"
    augment: AugmentConfig = AugmentConfig()
    source: str = ""

    @property
    def fusion_kinds(self) -> List[str]:
        return [k for k in self.kinds if k in FEATURE_KINDS]


def _list(text: str) -> List[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _ints(text: str) -> List[int]:
    return [int(t) for t in _list(text)]


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off", ""):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _blocks(text: str) -> List[Tuple[int, int]]:
    out = []
    for item in _list(text):
        count, _, base = item.partition("x")
        out.append((int(count), int(base)))
    return out


def _train_config(section, base: TrainConfig) -> TrainConfig:
    kw = {}
    for f in fields(TrainConfig):
        if f.name in section:
            raw = section[f.name]
            kw[f.name] = int(raw) if f.type in (int, "int") else float(raw)
    return replace(base, **kw)


def _network_spec(parser, modality: str, image_shape, errors: List[str]) -> Optional[NetworkSpec]:
    merged = dict(parser["network"]) if parser.has_section("network") else {}
    over = f"network.{modality}"
    if parser.has_section(over):
        merged.update(parser[over])
    path = over if parser.has_section(over) else "network"
    try:
        shape = tuple(_ints(merged["input_shape"])) if "input_shape" in merged else tuple(image_shape)
        blocks = _blocks(merged.get("blocks", "1x64, 1x128, 1x512"))
        pools = _ints(merged["pool_windows"]) if "pool_windows" in merged else None
        scale = Fraction(merged.get("width_scale", "1/8"))
        dim = int(merged.get("embedding_dim", "128"))
        taps = [TapSpec.parse(t, dim) for t in _list(merged.get("taps", f"FC6:pool{len(blocks)}:maxpool1"))]
        spec = NetworkSpec(modality, shape, blocks, pools, scale, dim, taps)
    except (ValueError, KeyError, SpecError) as exc:
        errors.append(f"{path}: {exc}")
        return None
    names = set(spec.layer_names())
    for tap in spec.taps:
        if tap.source not in names:
            errors.append(f"{path}.taps: tap {tap.tap_id} references unknown layer {tap.source!r}")
            return None
    try:
        spec.trace()
        spec.validate()
    except SpecError as exc:
        errors.append(f"{path}: {exc}")
        return None
    return spec


def parse_config(path: str, seed_override: Optional[List[int]] = None) -> Tuple[Optional[ExperimentConfig], List[str]]:
    """Parse and cross-check; returns ``(config or None, errors)``."""
    errors: List[str] = []
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path) as fh:
            source = fh.read()
        parser.read_string(source, source=path)
    except (OSError, configparser.Error) as exc:
        return None, [f"{path}: {exc}"]

    for sec in parser.sections():
        root = sec.split(".", 1)[0]
        if root not in KNOWN:
            errors.append(f"{sec}: unknown section")
            continue
        allowed = KNOWN[root]
        for key in parser[sec]:
            if key not in allowed:
                errors.append(f"{sec}.{key}: unknown key")
    for required in ("experiment", "dataset", "fusion"):
        if not parser.has_section(required):
            errors.append(f"{required}: missing section")
    if errors:
        return None, errors

    exp = parser["experiment"]
    try:
        seeds = seed_override if seed_override is not None else _ints(exp.get("seeds", ""))
        if not seeds:
            errors.append("experiment.seeds: at least one explicit seed required")
    except ValueError as exc:
        errors.append(f"experiment.seeds: {exc}")
        seeds = []
    dtype = exp.get("dtype", "float64")
    if dtype not in ("float32", "float64"):
        errors.append(f"experiment.dtype: must be float32 or float64, got {dtype!r}")

    ds = parser["dataset"]
    dataset = None
    try:
        mods = _list(ds.get("modalities", ""))
        if not mods:
            raise ValueError("no modalities")
        if len(set(mods)) != len(mods):
            raise ValueError(f"duplicate modalities {mods}")
        noise = {}
        for item in _list(ds.get("noise", "")):
            m, _, v = item.partition(":")
            noise[m.strip()] = float(v)
        missing = [m for m in mods if m not in noise]
        if missing:
            errors.append(f"dataset.noise: no level for modalities {missing}")
        unknown = [m for m in noise if m not in mods]
        if unknown:
            errors.append(f"dataset.noise: unknown modalities {unknown}")
        occ, size, jit = int(ds.get("occlusions", "1")), int(ds.get("occlusion_size", "6")), int(ds.get("jitter", "1"))
        profiles = {m: NoiseProfile(noise.get(m, 0.0), occ, size, jit) for m in mods}
        augment = _list(ds.get("augment", ""))
        dual = _list(ds.get("dual_template", ""))
        for key, lst in (("augment", augment), ("dual_template", dual)):
            bad = [m for m in lst if m not in mods]
            if bad:
                errors.append(f"dataset.{key}: unknown modalities {bad}")
        dataset = DatasetSection(int(ds.get("subjects", "20")), mods, int(ds.get("samples_per_subject", "10")),
                                 int(ds.get("tuples_per_subject", "50")),
                                 tuple(_ints(ds.get("image_shape", "1, 32, 32"))),
                                 float(ds.get("separation", "0.5")), profiles, augment,
                                 _bool(ds.get("normalize", "true")), dual)
        if dataset.subjects < 2:
            errors.append("dataset.subjects: must be >= 2")
        if dataset.samples_per_subject < 1 or dataset.tuples_per_subject < 1:
            errors.append("dataset: samples_per_subject and tuples_per_subject must be >= 1")
        if len(dataset.image_shape) != 3:
            errors.append("dataset.image_shape: expected C, H, W")
    except (ValueError, ConfigurationError) as exc:
        errors.append(f"dataset: {exc}")
    if dataset is None:
        return None, errors

    networks = {}
    for m in dataset.modalities:
        spec = _network_spec(parser, m, dataset.image_shape, errors)
        if spec is not None:
            if spec.input_shape != dataset.image_shape:
                errors.append(f"network.{m}.input_shape: {spec.input_shape} != dataset.image_shape "
                              f"{dataset.image_shape}")
            networks[m] = spec

    fu = parser["fusion"]
    kinds = _list(fu.get("kinds", ""))
    for k in kinds:
        if k not in MODEL_KINDS:
            errors.append(f"fusion.kinds: unknown kind {k!r}; expected one of {MODEL_KINDS}")
    groups = None
    if fu.get("groups", "").strip():
        groups = [[m.strip() for m in g.split(",") if m.strip()] for g in fu["groups"].split("|")]
        flat = [m for g in groups for m in g]
        if sorted(flat) != sorted(dataset.modalities) or len(groups) < 2:
            errors.append(f"fusion.groups: {groups} must partition {dataset.modalities} into >= 2 groups")
    if any(k.startswith("bilevel") for k in kinds) and groups is None:
        errors.append("fusion.groups: required by bi-level kinds")
    for k in kinds:
        if k in FEATURE_KINDS:
            for m, spec in networks.items():
                have = {t.tap_id for t in spec.taps}
                for t in taps_for(k):
                    if t not in have:
                        errors.append(f"network.{m}.taps: fusion kind {k} needs tap {t}")
    try:
        fusion_dim = int(fu.get("fusion_dim", "128"))
    except ValueError as exc:
        errors.append(f"fusion.fusion_dim: {exc}")
        fusion_dim = 0

    train: Dict[str, TrainConfig] = {}
    pretrain: Dict[str, TrainConfig] = {}
    try:
        base = _train_config(parser["train"], TrainConfig()) if parser.has_section("train") else TrainConfig()
        for ph in PHASES:
            sec = f"train.{ph}"
            train[ph] = _train_config(parser[sec], base) if parser.has_section(sec) else base
        for m in dataset.modalities:
            sec = f"train.pretrain_modality.{m}"
            pretrain[m] = _train_config(parser[sec], train["pretrain_modality"]) if parser.has_section(sec) \
                else train["pretrain_modality"]
    except (ValueError, ConfigurationError) as exc:
        errors.append(f"train: {exc}")
    for sec in parser.sections():
        parts = sec.split(".")
        if parts[0] == "train" and len(parts) > 1 and parts[1] not in PHASES:
            errors.append(f"{sec}: unknown phase {parts[1]!r}")
        if parts[0] == "train" and len(parts) > 2 and (parts[1] != "pretrain_modality"
                                                         or parts[2] not in dataset.modalities):
            errors.append(f"{sec}: per-modality overrides only exist for pretrain_modality of declared modalities")
        if parts[0] == "network" and len(parts) > 1 and parts[1] not in dataset.modalities:
            errors.append(f"{sec}: unknown modality {parts[1]!r}")

    ev = parser["eval"] if parser.has_section("eval") else {}
    try:
        ks = _ints(ev.get("ks", "1")) if ev else [1]
        bad = [k for k in ks if not 1 <= k <= dataset.subjects]
        if bad:
            errors.append(f"eval.ks: {bad} outside [1, {dataset.subjects}]")
    except ValueError as exc:
        errors.append(f"eval.ks: {exc}")
        ks = []

    if errors:
        return None, errors
    cfg = ExperimentConfig(exp.get("name", "experiment"), seeds, dtype, _bool(exp.get("snapshot", "false")), dataset,
                           networks, kinds, fusion_dim, groups, train, pretrain, ks,
                           ev.get("metrics_csv", "metrics.csv") if ev else "metrics.csv",
                           ev.get("cmc_svg", "cmc.svg") if ev else "cmc.svg",
                           ev.get("summary", "summary.txt") if ev else "summary.txt", source=source)
    return cfg, []


def validate_config(path: str) -> List[str]:
    """Empty list when the file is valid, otherwise one message per problem."""
    return parse_config(path)[1]


def load_config(path: str, seed_override=None) -> ExperimentConfig:
    cfg, errors = parse_config(path, seed_override)
    if errors:
        raise ConfigError(errors)
    return cfg
