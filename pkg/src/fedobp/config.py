"""Line-oriented ``key = value`` experiment configuration.

Keys may be dotted (``method.q = 0.99``); ``#`` starts a comment; lists
are comma separated.  Unknown keys are an error.  :func:`dump_config`
writes the fully resolved configuration back in the same format, so
``parse_config(dump_config(c)) == c``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

from fedobp.federation import MethodKind, MethodSpec
from fedobp.importance import NormKind, NormMode, ScoreKind
from fedobp.nn import ModelSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    num_classes: int = 10
    per_class: int = 100
    input_shape: tuple[int, ...] = (1, 16, 16)
    noise_sigma: float = 0.8
    template_block: int = 4
    images: str = ""
    labels: str = ""


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = DatasetConfig()
    conv_channels: tuple[int, ...] = (8, 16)
    kernel_size: int = 5
    pool: str = "max2x2"
    fc_widths: tuple[int, ...] = (64,)
    method: MethodSpec = MethodSpec.fedobp(0.99)
    n_clients: int = 20
    alpha: float = 0.1
    rounds: int = 50
    gamma: float = 0.2
    eta: float = 0.05
    batch_size: int = 32
    local_epochs: int = 5
    test_fraction: float = 0.5
    min_client_samples: int = 10
    seeds: tuple[int, ...] = (1,)
    output_dir: str = "runs/default"
    sweep_q: tuple[float, ...] = (0.1, 0.5, 0.9, 0.99, 0.999, 1.0)
    sweep_scores: tuple[str, ...] = ("obp", "fisher", "gradient")

    def model_spec(self, input_shape=None, num_classes=None) -> ModelSpec:
        return ModelSpec(
            input_shape=tuple(input_shape or self.dataset.input_shape),
            conv_channels=self.conv_channels,
            kernel_size=self.kernel_size,
            pool=self.pool,
            fc_widths=self.fc_widths,
            num_classes=num_classes or self.dataset.num_classes,
        )

    def with_method(self, method: MethodSpec) -> "ExperimentConfig":
        return replace(self, method=method)


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(p) for p in v.split(",") if p.strip())


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(p) for p in v.split(",") if p.strip())


def _strs(v: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in v.split(",") if p.strip())


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


_TOP = {
    "n_clients": int, "alpha": float, "rounds": int, "gamma": float, "eta": float,
    "batch_size": int, "local_epochs": int, "test_fraction": float,
    "min_client_samples": int, "seeds": _ints, "output_dir": str,
}
_DATASET = {
    "kind": str, "num_classes": int, "per_class": int, "input_shape": _ints,
    "noise_sigma": float, "template_block": int, "images": str, "labels": str,
}
_MODEL = {"conv_channels": _ints, "kernel_size": int, "pool": str, "fc_widths": _ints}
_METHOD = {"name": str, "score": str, "q": float, "norm": str, "cls_only": _bool, "layers": _strs}
_SWEEP = {"q": _floats, "scores": _strs}


def _method_from(d: dict) -> MethodSpec:
    name = d.get("name", "fedobp")
    norm = NormMode(NormKind(d.get("norm", "none")), d.get("cls_only", False))
    if name == "fedobp":
        return MethodSpec.fedobp(d.get("q", 0.99), norm)
    if name == "score":
        return MethodSpec.score_decouple(d.get("score", "obp"), d.get("q", 0.99), norm)
    if name == "fixed":
        return MethodSpec.fixed_layer(d.get("layers", ("classifier",)))
    if name == "fedavg":
        return MethodSpec.fedavg()
    if name == "local":
        return MethodSpec.local_only()
    raise ConfigError(f"unknown method.name {name!r}")


def _method_items(m: MethodSpec) -> dict[str, str]:
    if m.kind is MethodKind.DECOUPLE:
        out = {"name": "fedobp" if m.score is ScoreKind.OBP else "score"}
        if m.score is not ScoreKind.OBP:
            out["score"] = m.score.value
        out.update(q=repr(m.q), norm=m.norm.kind.value, cls_only=str(m.norm.cls_only).lower())
        return out
    if m.kind is MethodKind.FIXED:
        return {"name": "fixed", "layers": ", ".join(m.layers)}
    return {"name": m.kind.value}


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    sections = {"dataset": {}, "model": {}, "method": {}, "sweep": {}}
    top = {}
    tables = {"dataset": _DATASET, "model": _MODEL, "method": _METHOD, "sweep": _SWEEP}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = key.strip(), value.strip()
        section, dot, sub = key.partition(".")
        try:
            if dot:
                if section not in tables or sub not in tables[section]:
                    raise ConfigError(f"line {lineno}: unknown key {key!r}")
                sections[section][sub] = tables[section][sub](value)
            else:
                if key not in _TOP:
                    raise ConfigError(f"line {lineno}: unknown key {key!r}")
                top[key] = _TOP[key](value)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None

    cfg = base or ExperimentConfig()
    if sections["dataset"]:
        cfg = replace(cfg, dataset=replace(cfg.dataset, **sections["dataset"]))
    if sections["model"]:
        cfg = replace(cfg, **sections["model"])
    if sections["method"]:
        merged = {**_parsed_method_items(cfg.method), **sections["method"]}
        try:
            cfg = replace(cfg, method=_method_from(merged))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if sections["sweep"]:
        renamed = {f"sweep_{k}": v for k, v in sections["sweep"].items()}
        cfg = replace(cfg, **renamed)
    cfg = replace(cfg, **top)
    validate(cfg)
    return cfg


def _parsed_method_items(m: MethodSpec) -> dict:
    items = _method_items(m)
    out: dict = {}
    for k, v in items.items():
        out[k] = _METHOD[k](v)
    return out


def validate(cfg: ExperimentConfig) -> None:
    problems = []
    if cfg.rounds < 1:
        problems.append("rounds must be >= 1")
    if not 0 < cfg.gamma <= 1:
        problems.append("gamma must lie in (0, 1]")
    if not cfg.eta > 0:
        problems.append("eta must be > 0")
    if cfg.local_epochs < 1:
        problems.append("local_epochs must be >= 1")
    if cfg.batch_size < 1:
        problems.append("batch_size must be >= 1")
    if not cfg.seeds:
        problems.append("seeds must be non-empty")
    if any(s < 0 for s in cfg.seeds):
        problems.append("seeds must be non-negative")
    if cfg.n_clients < 1:
        problems.append("n_clients must be >= 1")
    if not cfg.alpha > 0:
        problems.append("alpha must be > 0")
    if not 0 < cfg.test_fraction < 1:
        problems.append("test_fraction must lie in (0, 1)")
    if cfg.min_client_samples < 2:
        problems.append("min_client_samples must be >= 2 (each client needs a train and a test sample)")
    if cfg.dataset.kind not in ("synthetic", "idx"):
        problems.append(f"dataset.kind must be 'synthetic' or 'idx', got {cfg.dataset.kind!r}")
    if cfg.dataset.kind == "idx" and not (cfg.dataset.images and cfg.dataset.labels):
        problems.append("dataset.images and dataset.labels are required for idx data")
    if cfg.dataset.template_block < 1:
        problems.append("dataset.template_block must be >= 1")
    if any(not 0 < q <= 1 for q in cfg.sweep_q):
        problems.append("sweep.q values must lie in (0, 1]")
    for s in cfg.sweep_scores:
        if s not in {k.value for k in ScoreKind}:
            problems.append(f"unknown sweep score {s!r}")
    if cfg.dataset.kind == "synthetic":
        try:
            cfg.model_spec()
        except ValueError as exc:
            problems.append(f"model: {exc}")
    if problems:
        raise ConfigError("; ".join(problems))


def dump_config(cfg: ExperimentConfig) -> str:
    d = cfg.dataset
    lines = [
        f"n_clients = {cfg.n_clients}",
        f"alpha = {cfg.alpha!r}",
        f"rounds = {cfg.rounds}",
        f"gamma = {cfg.gamma!r}",
        f"eta = {cfg.eta!r}",
        f"batch_size = {cfg.batch_size}",
        f"local_epochs = {cfg.local_epochs}",
        f"test_fraction = {cfg.test_fraction!r}",
        f"min_client_samples = {cfg.min_client_samples}",
        f"seeds = {', '.join(str(s) for s in cfg.seeds)}",
        f"output_dir = {cfg.output_dir}",
        f"dataset.kind = {d.kind}",
        f"dataset.num_classes = {d.num_classes}",
        f"dataset.per_class = {d.per_class}",
        f"dataset.input_shape = {', '.join(str(v) for v in d.input_shape)}",
        f"dataset.noise_sigma = {d.noise_sigma!r}",
        f"dataset.template_block = {d.template_block}",
        f"dataset.images = {d.images}",
        f"dataset.labels = {d.labels}",
        f"model.conv_channels = {', '.join(str(v) for v in cfg.conv_channels)}",
        f"model.kernel_size = {cfg.kernel_size}",
        f"model.pool = {cfg.pool}",
        f"model.fc_widths = {', '.join(str(v) for v in cfg.fc_widths)}",
    ]
    lines += [f"method.{k} = {v}" for k, v in _method_items(cfg.method).items()]
    lines += [
        f"sweep.q = {', '.join(repr(q) for q in cfg.sweep_q)}",
        f"sweep.scores = {', '.join(cfg.sweep_scores)}",
    ]
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()[:16]


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    with open(path) as fh:
        cfg = parse_config(fh.read())
    if overrides:
        cfg = replace(cfg, **overrides)
        validate(cfg)
    return cfg
