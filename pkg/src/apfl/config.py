"""Experiment configuration and its ``key = value`` text format.

Values are JSON literals (numbers, strings in double quotes, lists, objects,
``true``/``false``); bare words are taken as strings. ``#`` starts a comment.
Every key must be known, may appear once, and ``seed`` is required.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .broadcast import MODES
from .data import DriftSpec, PopulationSpec, uniform
from .errors import ConfigError, RejectedInput

PROTOCOLS = ("apfl", "sync-fedavg", "async-decay", "sync-clustered", "standalone")
DEVICE_CLASSES = ("D1", "D2", "D3", "D4", "D5")
DEFAULT_MULTIPLIERS = {"D1": 8.0, "D2": 4.0, "D3": 2.0, "D4": 1.0, "D5": 10.0}
# Step size for the named multi-client presets; small enough that synchronous
# rounds, not the optimizer, bound convergence time.
CALIBRATED_LR = 0.005
PRESETS = ("A", "B", "C", "D", "fleet20", "g4", "g4-40")


def default_population() -> PopulationSpec:
    """Four clusters of five clients; each cluster owns two classes drawn on shared feature anchors."""
    return PopulationSpec(
        G=4, clients_per_cluster=[5, 5, 5, 5], feature_dim=8, J=8, samples_per_client=100,
        class_skew=[uniform(8, [2 * g, 2 * g + 1]) for g in range(4)],
        noise_std=1.0, concept_shift=2,
    )


def fleet_devices(n: int) -> list[str]:
    """20% D1, 20% D2, 20% D3, 40% D5, repeating every five clients."""
    pattern = ["D1", "D2", "D3", "D5", "D5"]
    return [pattern[i % 5] for i in range(n)]


@dataclass
class ExperimentConfig:
    population: PopulationSpec = field(default_factory=default_population)
    devices: list[str] | None = None
    protocol: str = "apfl"
    seed: int = 0
    name: str = "experiment"
    test_samples: int = 50
    probe_size: int = 256
    # compute
    base_seconds: float = 1.0
    jitter: float = 0.1
    multipliers: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_MULTIPLIERS))
    # links (bytes per second); downstream = upstream * ratio
    up_bps: float = 8000.0
    link_ratio: float = 10.0
    # model and local training
    hidden: int = 16
    epochs: int = 1
    lr: float = 0.05
    batch_size: int = 10
    # protocol hyperparameters
    C: int = 2
    hm: int = 2
    K: int = 10
    eta: float = 0.5
    refine_period: int = 10
    expand_quantile: float = 0.8
    expand_min_score: float = 2.0
    merge_lr: float = 0.05
    expand_lr: float = 0.03
    expand_epochs: int = 3
    broadcast_mode: str = "predictor"
    flipped: bool = False
    predictor_hidden: tuple[int, int] = (128, 128)
    predictor_lr: float = 0.01
    pretrain_pairs: int = 1200
    pretrain_epochs: int = 60
    finetune: bool = True
    # baselines
    alpha0: float = 0.6
    decay_exponent: float = 0.5
    cluster_kl_jump: float = 5.0  # stop merging at this jump in merge distance
    # stop condition
    time_budget: float = 300.0
    target_accuracy: float | None = None
    drifts: list[DriftSpec] = field(default_factory=list)

    @property
    def down_bps(self) -> float:
        return self.up_bps * self.link_ratio

    def fleet(self) -> list[str]:
        return list(self.devices) if self.devices is not None else fleet_devices(self.population.n_clients)

    def validate(self) -> None:
        try:
            self.population.validate()
        except RejectedInput as exc:
            raise ConfigError(str(exc), key="population") from exc
        checks = [
            ("protocol", self.protocol in PROTOCOLS, f"must be one of {', '.join(PROTOCOLS)}"),
            ("broadcast.mode", self.broadcast_mode in MODES, f"must be one of {', '.join(MODES)}"),
            ("link.ratio", self.link_ratio > 0, "asymmetry ratio must be > 0"),
            ("link.up_bps", self.up_bps > 0, "must be > 0"),
            ("device.base_seconds", self.base_seconds > 0, "must be > 0"),
            ("device.jitter", 0 <= self.jitter < 1, "must be in [0, 1)"),
            ("apfl.C", self.C >= 1, "must be >= 1"),
            ("apfl.hm", self.hm >= 1, "must be >= 1"),
            ("broadcast.k", self.K >= 1, "must be >= 1"),
            ("apfl.eta", 0 <= self.eta <= 1, "must be in [0, 1]"),
            ("apfl.refine_period", self.refine_period >= 1, "must be >= 1"),
            ("apfl.expand_quantile", 0 <= self.expand_quantile <= 1, "must be in [0, 1]"),
            ("train.epochs", self.epochs >= 1, "must be >= 1"),
            ("train.lr", self.lr > 0, "must be > 0"),
            ("train.batch_size", self.batch_size >= 1, "must be >= 1"),
            ("model.hidden", self.hidden >= 0, "must be >= 0"),
            ("eval.test_samples", self.test_samples >= 1, "must be >= 1"),
            ("eval.probe_size", self.probe_size >= 1, "must be >= 1"),
            ("baseline.alpha0", 0 < self.alpha0 <= 1, "must be in (0, 1]"),
            ("baseline.kl_jump", self.cluster_kl_jump >= 1, "must be >= 1"),
            ("stop.time_budget", self.time_budget > 0, "must be > 0"),
            ("predictor.hidden", len(self.predictor_hidden) == 2 and min(self.predictor_hidden) >= 1,
             "must be two positive widths"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(msg, key=key)
        fleet = self.fleet()
        if len(fleet) != self.population.n_clients:
            raise ConfigError(f"{len(fleet)} devices for {self.population.n_clients} clients", key="devices")
        for dev in fleet:
            if dev not in self.multipliers:
                raise ConfigError(f"unknown device class {dev!r}", key="devices")
        for dev, mult in self.multipliers.items():
            if mult <= 0:
                raise ConfigError(f"multiplier for {dev} must be > 0", key="device.multipliers")
        for d in self.drifts:
            try:
                d.validate(self.population.J)
            except RejectedInput as exc:
                raise ConfigError(str(exc), key="drift") from exc
            if not 0 <= d.client_id < self.population.n_clients:
                raise ConfigError(f"drift client {d.client_id} does not exist", key="drift")


# key -> (attribute path, converter)
def _int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError("expected an integer")
    return v


def _float(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError("expected a number")
    return float(v)


def _opt_float(v):
    return None if v is None else _float(v)


def _bool(v):
    if not isinstance(v, bool):
        raise ValueError("expected true or false")
    return v


def _str(v):
    if not isinstance(v, str):
        raise ValueError("expected a string")
    return v


def _list(v):
    if not isinstance(v, list):
        raise ValueError("expected a list")
    return v


def _pair(v):
    v = _list(v)
    if len(v) != 2:
        raise ValueError("expected two values")
    return tuple(_int(x) for x in v)


def _multipliers(v):
    if not isinstance(v, dict):
        raise ValueError("expected an object")
    return {str(k): _float(x) for k, x in v.items()}


def _drifts(v):
    out = []
    for item in _list(v):
        if not isinstance(item, dict):
            raise ValueError("each drift must be an object")
        unknown = set(item) - {"client_id", "trigger_time", "new_class_skew", "adopt_cluster"}
        if unknown:
            raise ValueError(f"unknown drift field(s) {sorted(unknown)}")
        out.append(DriftSpec(
            _int(item["client_id"]), _float(item["trigger_time"]),
            [_float(x) for x in _list(item["new_class_skew"])], item.get("adopt_cluster"),
        ))
    return out


_KEYS = {
    "protocol": ("protocol", _str),
    "seed": ("seed", _int),
    "name": ("name", _str),
    "population.seed": ("population.seed", _int),
    "population.G": ("population.G", _int),
    "population.clients_per_cluster": ("population.clients_per_cluster", lambda v: [_int(x) for x in _list(v)]),
    "population.feature_dim": ("population.feature_dim", _int),
    "population.J": ("population.J", _int),
    "population.samples_per_client": ("population.samples_per_client", _int),
    "population.class_skew": ("population.class_skew", lambda v: [[_float(x) for x in _list(r)] for r in _list(v)]),
    "population.noise_std": ("population.noise_std", _float),
    "population.class_sep": ("population.class_sep", _float),
    "population.cluster_jitter": ("population.cluster_jitter", _float),
    "population.concept_shift": ("population.concept_shift", _int),
    "devices": ("devices", lambda v: [_str(x) for x in _list(v)]),
    "device.base_seconds": ("base_seconds", _float),
    "device.jitter": ("jitter", _float),
    "device.multipliers": ("multipliers", _multipliers),
    "link.up_bps": ("up_bps", _float),
    "link.ratio": ("link_ratio", _float),
    "model.hidden": ("hidden", _int),
    "train.epochs": ("epochs", _int),
    "train.lr": ("lr", _float),
    "train.batch_size": ("batch_size", _int),
    "apfl.C": ("C", _int),
    "apfl.hm": ("hm", _int),
    "apfl.eta": ("eta", _float),
    "apfl.refine_period": ("refine_period", _int),
    "apfl.expand_quantile": ("expand_quantile", _float),
    "apfl.expand_min_score": ("expand_min_score", _float),
    "apfl.merge_lr": ("merge_lr", _float),
    "apfl.expand_lr": ("expand_lr", _float),
    "apfl.expand_epochs": ("expand_epochs", _int),
    "broadcast.mode": ("broadcast_mode", _str),
    "broadcast.k": ("K", _int),
    "broadcast.flipped": ("flipped", _bool),
    "predictor.hidden": ("predictor_hidden", _pair),
    "predictor.lr": ("predictor_lr", _float),
    "predictor.pretrain_pairs": ("pretrain_pairs", _int),
    "predictor.pretrain_epochs": ("pretrain_epochs", _int),
    "predictor.finetune": ("finetune", _bool),
    "baseline.alpha0": ("alpha0", _float),
    "baseline.decay_exponent": ("decay_exponent", _float),
    "baseline.kl_jump": ("cluster_kl_jump", _float),
    "eval.test_samples": ("test_samples", _int),
    "eval.probe_size": ("probe_size", _int),
    "stop.time_budget": ("time_budget", _float),
    "stop.target_accuracy": ("target_accuracy", _opt_float),
    "drift": ("drifts", _drifts),
}
REQUIRED_KEYS = ("seed",)


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse ``key = value`` lines.

    ``preset = NAME`` selects the starting configuration; every other key
    overrides it. ``population.seed`` defaults to ``seed``.
    """
    entries: list[tuple[str, str, int]] = []
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEYS and key != "preset":
            raise ConfigError("unknown key", key=key, line=lineno)
        if key in seen:
            raise ConfigError(f"duplicate key (first set on line {seen[key]})", key=key, line=lineno)
        seen[key] = lineno
        entries.append((key, value, lineno))

    cfg = ExperimentConfig()
    for key, value, lineno in entries:
        if key == "preset":
            try:
                cfg = preset(_str(_json_or_word(value)))
            except (RejectedInput, ValueError) as exc:
                raise ConfigError(str(exc), key=key, line=lineno) from exc
    for key, value, lineno in entries:
        if key == "preset":
            continue
        attr, conv = _KEYS[key]
        try:
            converted = conv(_json_or_word(value))
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"invalid value {value!r}: {exc}", key=key, line=lineno) from exc
        target = cfg
        *path, last = attr.split(".")
        for p in path:
            target = getattr(target, p)
        setattr(target, last, converted)
    for key in REQUIRED_KEYS:
        if key not in seen:
            raise ConfigError("missing required key", key=key)
    if "population.seed" not in seen:
        cfg.population.seed = cfg.seed
    try:
        cfg.validate()
    except ConfigError as exc:
        if exc.key in seen and exc.line is None:
            raise ConfigError(str(exc).split(": ", 1)[-1], key=exc.key, line=seen[exc.key]) from exc
        raise
    return cfg


def _json_or_word(value: str):
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def _strip_comment(raw: str) -> str:
    in_str = False
    for i, ch in enumerate(raw):
        if ch == '"' and (i == 0 or raw[i - 1] != "\\"):
            in_str = not in_str
        elif ch == "#" and not in_str:
            return raw[:i].strip()
    return raw.strip()


def parse_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def dumps_config(cfg: ExperimentConfig) -> str:
    """Inverse of :func:`parse_config_text` for every documented key."""
    lines = []
    for key, (attr, _) in _KEYS.items():
        target = cfg
        for p in attr.split("."):
            target = getattr(target, p)
        value = target
        if key == "devices" and value is None:
            continue
        if key == "drift":
            value = [d.__dict__ for d in value]
        if isinstance(value, tuple):
            value = list(value)
        lines.append(f"{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"


def preset(name: str) -> ExperimentConfig:
    """Named configurations used by the scenario command and the acceptance suite."""
    from .data import scenario_config

    if name in ("A", "B", "C", "D"):
        return scenario_config(name)
    if name == "fleet20":
        # Two groups of ten, each owning four classes on shared feature anchors.
        cfg = ExperimentConfig(lr=CALIBRATED_LR)
        cfg.population = PopulationSpec(
            G=2, clients_per_cluster=[10, 10], feature_dim=8, J=8, samples_per_client=100,
            class_skew=[uniform(8, range(4 * g, 4 * g + 4)) for g in range(2)],
            noise_std=1.0, concept_shift=4,
        )
        cfg.name = "fleet20"
        return cfg
    if name == "g4":
        cfg = ExperimentConfig(lr=CALIBRATED_LR)
        cfg.name = "g4"
        return cfg
    if name == "g4-40":
        cfg = ExperimentConfig(lr=CALIBRATED_LR)
        cfg.population.clients_per_cluster = [10, 10, 10, 10]
        cfg.name = "g4-40"
        return cfg
    raise RejectedInput(f"unknown preset {name!r}")
