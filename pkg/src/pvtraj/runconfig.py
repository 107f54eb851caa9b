"""Plain-text run configuration: `key = value` lines, one tree for a run.

Every key has a documented default; unknown keys are rejected. "auto" on
the optimizer and aggregation keys resolves from the backbone kind (concat
and Adam/1e-4/16/200 for lstm, weighted sum and SGD/0.01/64/250 for conv).
The resolved configuration is echoed into the run directory so a run can be
reproduced from that file alone.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from .backbones import BackboneConfig
from .features import FeatureConfig
from .training import OptimizerConfig, regime_for


class RunConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise RunConfigError(f"expected a boolean, got {s!r}")


def _parse_int_tuple(s: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in s.split(",") if p.strip())
    except ValueError:
        raise RunConfigError(f"expected comma-separated integers, got {s!r}") from None


def _parse_str_tuple(s: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in s.split(",") if p.strip())


def _parse_bool_tuple(s: str) -> tuple[bool, ...]:
    return tuple(_parse_bool(p) for p in s.split(",") if p.strip())


def _parse_int_list(s: str) -> tuple[int, ...]:
    return _parse_int_tuple(s)


def _auto_or(parser):
    def parse(s: str):
        return "auto" if s.strip().lower() == "auto" else parser(s)
    return parse


# key -> (default, parser). Defaults are the documented ones.
SCHEMA: dict = {
    "seed": (0, int),
    "run.dir": ("", str),
    "threads": (0, int),
    "data.train": ("", str),
    "data.val": ("", str),
    "data.test": ("", str),
    "features.embed_dim": (16, int),
    "features.social_mlp": ((32, 16), _parse_int_tuple),
    "features.pvi_mlp": ((32, 16), _parse_int_tuple),
    "features.pvi_state_dim": (16, int),
    "features.use_social": (True, _parse_bool),
    "features.use_pvi": (True, _parse_bool),
    "features.use_velocity": (False, _parse_bool),
    "features.aggregation": ("auto", str),
    "backbone.kind": ("lstm", str),
    "backbone.hidden_dim": (32, int),
    "backbone.tcn_layers": (2, int),
    "backbone.tcn_channels": (32, int),
    "backbone.tcn_kernel": (3, int),
    "backbone.extrap_layers": (3, int),
    "backbone.extrap_kernel": (3, int),
    "backbone.teacher_forcing": (False, _parse_bool),
    "optimizer.kind": ("auto", str),
    "optimizer.lr": ("auto", _auto_or(float)),
    "optimizer.batch_size": ("auto", _auto_or(int)),
    "optimizer.epochs": ("auto", _auto_or(int)),
    "optimizer.beta1": (0.9, float),
    "optimizer.beta2": (0.999, float),
    "optimizer.eps": (1e-8, float),
    "optimizer.clip_norm": (10.0, float),
    "optimizer.lr_decay_step": (0, int),
    "optimizer.lr_decay_factor": (1.0, float),
    "eval.n_samples": (20, int),
    "eval.selection": ("per_pedestrian", str),
    "ablation.backbones": (("lstm", "conv"), _parse_str_tuple),
    "ablation.si": ((False, True), _parse_bool_tuple),
    "ablation.pvi": ((False, True), _parse_bool_tuple),
    "ablation.rv": ((False,), _parse_bool_tuple),
    "ablation.seeds": ((0, 1, 2), _parse_int_list),
    "ablation.epochs": ("auto", _auto_or(int)),
}


class RunConfig:
    """Resolved configuration tree for one run."""

    def __init__(self, values: dict):
        self.values = values
        self._resolve()

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({k: v for k, (v, _) in SCHEMA.items()})

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        values = {k: v for k, (v, _) in SCHEMA.items()}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise RunConfigError(f"{source}:{lineno}: expected `key = value`, got {line!r}")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in SCHEMA:
                raise RunConfigError(f"{source}:{lineno}: unknown key {key!r}")
            _, parser = SCHEMA[key]
            try:
                values[key] = parser(val)
            except RunConfigError:
                raise
            except ValueError:
                raise RunConfigError(f"{source}:{lineno}: bad value {val!r} for {key}") from None
        return cls(values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"), source=str(path))

    def _resolve(self) -> None:
        v = self.values
        kind = v["backbone.kind"]
        if kind not in ("lstm", "conv"):
            raise RunConfigError(f"backbone.kind must be lstm or conv, got {kind!r}")
        if v["features.aggregation"] == "auto":
            v["features.aggregation"] = "concat" if kind == "lstm" else "weighted_sum"
        regime = regime_for(kind)
        if v["optimizer.kind"] == "auto":
            v["optimizer.kind"] = regime.kind
        if v["optimizer.lr"] == "auto":
            v["optimizer.lr"] = regime.lr
        if v["optimizer.batch_size"] == "auto":
            v["optimizer.batch_size"] = regime.batch_size
        if v["optimizer.epochs"] == "auto":
            v["optimizer.epochs"] = regime.epochs
        if v["ablation.epochs"] == "auto":
            v["ablation.epochs"] = v["optimizer.epochs"]

    # -- views ---------------------------------------------------------------

    def feature_config(self) -> FeatureConfig:
        v = self.values
        return FeatureConfig(
            embed_dim=v["features.embed_dim"], social_mlp=v["features.social_mlp"],
            pvi_mlp=v["features.pvi_mlp"], pvi_state_dim=v["features.pvi_state_dim"],
            use_social=v["features.use_social"], use_pvi=v["features.use_pvi"],
            use_velocity=v["features.use_velocity"], aggregation=v["features.aggregation"])

    def backbone_config(self) -> BackboneConfig:
        v = self.values
        return BackboneConfig(
            kind=v["backbone.kind"], hidden_dim=v["backbone.hidden_dim"],
            tcn_layers=v["backbone.tcn_layers"], tcn_channels=v["backbone.tcn_channels"],
            tcn_kernel=v["backbone.tcn_kernel"], extrap_layers=v["backbone.extrap_layers"],
            extrap_kernel=v["backbone.extrap_kernel"],
            teacher_forcing=v["backbone.teacher_forcing"])

    def optimizer_config(self) -> OptimizerConfig:
        v = self.values
        return OptimizerConfig(
            kind=v["optimizer.kind"], lr=v["optimizer.lr"],
            batch_size=v["optimizer.batch_size"], epochs=v["optimizer.epochs"],
            beta1=v["optimizer.beta1"], beta2=v["optimizer.beta2"], eps=v["optimizer.eps"],
            clip_norm=v["optimizer.clip_norm"], lr_decay_step=v["optimizer.lr_decay_step"],
            lr_decay_factor=v["optimizer.lr_decay_factor"])

    # -- echo ------------------------------------------------------------------

    def echo(self) -> str:
        lines = ["# resolved run configuration"]
        for key in sorted(self.values):
            val = self.values[key]
            if isinstance(val, tuple):
                rendered = ",".join("true" if x is True else "false" if x is False
                                    else str(x) for x in val)
            elif isinstance(val, bool):
                rendered = "true" if val else "false"
            else:
                rendered = str(val)
            lines.append(f"{key} = {rendered}")
        return "\n".join(lines) + "\n"

    def write_echo(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.echo(), encoding="utf-8")

    def hash(self) -> str:
        return hashlib.sha256(self.echo().encode("utf-8")).hexdigest()[:16]
