"""Run configuration: flat key-value text with sections.

The file format is INI-like, canonicalized on load: sections and keys
follow a fixed schema order, unknown names are errors, and the canonical
text embeds into checkpoints and report headers so two artifacts with
equal headers are comparable.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field

from .data import DataConfig, SceneParams
from .errors import ConfigError
from .head import HeadConfig, TOPOLOGY_CHOICES, parse_topology
from .training import OptimConfig

# (key, type, default); types: int, float, bool, str, int_list, str_list
SCHEMA: dict[str, list[tuple[str, str, object]]] = {
    "run": [
        ("seed", "int", 0),
        ("out_dir", "str", "runs"),
        ("rng", "str", "philox"),
    ],
    "head": [
        ("num_layers", "int", 4),
        ("num_queries", "int", 100),
        ("embed_dim", "int", 64),
        ("num_heads", "int", 4),
        ("num_classes", "int", 8),
        ("topology", "str", "n+b+d"),
        ("pos_encoding", "bool", True),
        ("deformable_points", "int", 4),
        ("ffn_hidden", "int", 256),
    ],
    "data": [
        ("train_scenes", "int", 512),
        ("eval_scenes", "int", 128),
        ("min_objects", "int", 1),
        ("max_objects", "int", 5),
        ("scale_min", "float", 0.1),
        ("scale_max", "float", 0.35),
        ("overlap_rate", "float", 0.3),
        ("noise_sigma", "float", 0.03),
        ("level_sizes", "int_list", [32, 16, 8]),
        ("image_size", "int", 256),
    ],
    "optim": [
        ("lr", "float", 1e-3),
        ("beta1", "float", 0.9),
        ("beta2", "float", 0.999),
        ("eps", "float", 1e-8),
        ("weight_decay", "float", 1e-4),
        ("warmup_steps", "int", 100),
        ("batch_size", "int", 4),
        ("epochs", "int", 24),
    ],
    "nms": [
        ("conf_threshold", "float", 0.25),
        ("iou_threshold", "float", 0.6),
    ],
    # reduced-size benchmark shared by the ablation matrix and layer sweep
    "ablate": [
        ("topologies", "str_list", list(TOPOLOGY_CHOICES)),
        ("seeds", "int_list", [0, 1, 2, 3, 4]),
        ("epochs", "int", 12),
        ("train_scenes", "int", 160),
        ("eval_scenes", "int", 48),
        ("num_queries", "int", 24),
        ("embed_dim", "int", 32),
        ("num_layers", "int", 2),
        ("ffn_hidden", "int", 128),
        ("max_objects", "int", 4),
        ("param_budget", "str", "ffn-balance"),
        ("layer_choices", "int_list", [2, 4, 6]),
    ],
}

_PARSERS = {
    "int": int,
    "float": float,
    "str": str,
}


def _parse_value(kind: str, raw: str):
    raw = raw.strip()
    if kind == "bool":
        if raw in ("true", "false"):
            return raw == "true"
        raise ConfigError(f"expected 'true' or 'false', got {raw!r}")
    if kind == "int_list":
        return [int(tok) for tok in raw.split(",") if tok.strip() != ""]
    if kind == "str_list":
        return [tok.strip() for tok in raw.split(",") if tok.strip() != ""]
    try:
        return _PARSERS[kind](raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} as {kind}") from exc


def _format_value(kind: str, value) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind in ("int_list", "str_list"):
        return ",".join(str(v) for v in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    @classmethod
    def default(cls) -> "RunConfig":
        vals = {
            sec: {key: default for key, _, default in keys}
            for sec, keys in SCHEMA.items()
        }
        return cls(values=vals)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        cfg = cls.default()
        schema_keys = {
            sec: {key: kind for key, kind, _ in keys} for sec, keys in SCHEMA.items()
        }
        for sec in parser.sections():
            if sec not in SCHEMA:
                raise ConfigError(f"unknown section [{sec}]")
            for key, raw in parser.items(sec):
                if key not in schema_keys[sec]:
                    raise ConfigError(f"unknown key {key!r} in section [{sec}]")
                cfg.values[sec][key] = _parse_value(schema_keys[sec][key], raw)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def get(self, section: str, key: str):
        return self.values[section][key]

    def set(self, section: str, key: str, value):
        if section not in SCHEMA or key not in {k for k, _, _ in SCHEMA[section]}:
            raise ConfigError(f"unknown config entry [{section}] {key}")
        self.values[section][key] = value

    def validate(self):
        if self.get("run", "rng") != "philox":
            raise ConfigError("rng: only 'philox' is supported")
        parse_topology(self.get("head", "topology"))
        for topo in self.get("ablate", "topologies"):
            parse_topology(topo)
        if self.get("ablate", "param_budget") not in ("none", "ffn-balance"):
            raise ConfigError("param_budget must be 'none' or 'ffn-balance'")
        for entry in ("conf_threshold", "iou_threshold"):
            v = self.get("nms", entry)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"nms {entry} must lie in [0, 1], got {v}")
        sizes = self.get("data", "level_sizes")
        if not sizes or any(b >= a for a, b in zip(sizes, sizes[1:])):
            raise ConfigError("level_sizes must be strictly decreasing, finest first")

    def canonical_text(self) -> str:
        out = io.StringIO()
        for sec, keys in SCHEMA.items():
            out.write(f"[{sec}]\n")
            for key, kind, _ in keys:
                out.write(f"{key} = {_format_value(kind, self.values[sec][key])}\n")
            out.write("\n")
        return out.getvalue()

    # -- builders -----------------------------------------------------------

    def head_config(
        self,
        topology: str | None = None,
        num_layers: int | None = None,
        ffn_hidden: int | None = None,
        ablate: bool = False,
    ) -> HeadConfig:
        h = self.values["head"]
        a = self.values["ablate"]
        return HeadConfig(
            num_layers=num_layers
            if num_layers is not None
            else (a["num_layers"] if ablate else h["num_layers"]),
            num_queries=a["num_queries"] if ablate else h["num_queries"],
            embed_dim=a["embed_dim"] if ablate else h["embed_dim"],
            num_heads=h["num_heads"],
            num_classes=h["num_classes"],
            topology=topology if topology is not None else h["topology"],
            pos_encoding=h["pos_encoding"],
            deformable_points=h["deformable_points"],
            num_levels=len(self.values["data"]["level_sizes"]),
            ffn_hidden=ffn_hidden
            if ffn_hidden is not None
            else (a["ffn_hidden"] if ablate else h["ffn_hidden"]),
        )

    def data_config(self, ablate: bool = False) -> DataConfig:
        d = self.values["data"]
        a = self.values["ablate"]
        scene = SceneParams(
            num_classes=self.values["head"]["num_classes"],
            min_objects=d["min_objects"],
            max_objects=a["max_objects"] if ablate else d["max_objects"],
            scale_min=d["scale_min"],
            scale_max=d["scale_max"],
            overlap_rate=d["overlap_rate"],
            image_size=d["image_size"],
        )
        return DataConfig(
            train_scenes=a["train_scenes"] if ablate else d["train_scenes"],
            eval_scenes=a["eval_scenes"] if ablate else d["eval_scenes"],
            scene=scene,
            level_sizes=tuple(d["level_sizes"]),
            noise_sigma=d["noise_sigma"],
        )

    def optim_config(self) -> OptimConfig:
        o = self.values["optim"]
        return OptimConfig(
            lr=o["lr"],
            beta1=o["beta1"],
            beta2=o["beta2"],
            eps=o["eps"],
            weight_decay=o["weight_decay"],
            warmup_steps=o["warmup_steps"],
            batch_size=o["batch_size"],
            epochs=o["epochs"],
        )
