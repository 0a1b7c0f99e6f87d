"""Run configuration: plain-text INI sections with typed access, strict
key validation, and a resolved echo.

Every command materializes all defaults into a fully resolved value set
and writes it back as an echo file; loading that echo reproduces the exact
same values (floats round-trip through repr), which is what makes reruns
bit-identical.
"""

from __future__ import annotations

import configparser
import math
from pathlib import Path

from .augment import AugmentConfig, ChromaticConfig, GeometricConfig, TtaConfig
from .network import ModelConfig
from .optim import AdamWConfig, OneCycleConfig
from .synth import SceneSpec
from .training import TrainConfig


class ConfigError(ValueError):
    pass


_G = GeometricConfig()
_C = ChromaticConfig()
_SYNTH_DEFAULT = SceneSpec()
_SYNTH_IMBALANCED = SceneSpec.imbalanced()


def _synth_defaults(spec: SceneSpec) -> dict:
    return {
        "n_scenes": ("int", 36),
        "preset": ("str", "default"),
        "label_space": ("str", "shell11"),
        "format": ("str", "columnar"),
        "density": ("float", spec.density),
        "color_noise": ("float", spec.color_noise),
        "width": ("float_list", list(spec.width_range)),
        "depth": ("float_list", list(spec.depth_range)),
        "height": ("float_list", list(spec.height_range)),
        "doors": ("int_list", list(spec.doors)),
        "windows": ("int_list", list(spec.windows)),
        "beams": ("int_list", list(spec.beams)),
        "columns": ("int_list", list(spec.columns)),
        "stairs": ("int_list", list(spec.stairs)),
        "installations": ("int_list", list(spec.installations)),
        "equipment": ("int_list", list(spec.equipment)),
        "clutter": ("int_list", list(spec.clutter)),
        "split": ("float_list", [0.70, 0.15, 0.15]),
    }


def _schema(synth_preset: str) -> dict:
    base = {"default": _SYNTH_DEFAULT, "custom": _SYNTH_DEFAULT,
            "imbalanced": _SYNTH_IMBALANCED}.get(synth_preset)
    if base is None:
        raise ConfigError(f"[synth] preset: unknown preset {synth_preset!r}")
    return {
        "run": {"seed": ("int", 0)},
        "data": {
            "manifest": ("str", ""),
            "label_space": ("str", ""),
            "checkpoint": ("str", ""),
            "scene": ("str", ""),
        },
        "model": {
            "stage_widths": ("int_list", [32, 64]),
            "k_neighbors": ("int", 8),
            "pool_voxel_sizes": ("float_list", [0.05, 0.10]),
            "input_channels": ("int", 3),
        },
        "train": {
            "max_epochs": ("int", 100),
            "patience": ("int", 10),
            "min_delta": ("float", 1e-4),
            "batch_size": ("int", 2),
            "max_lr": ("float", 0.006),
            "warmup_fraction": ("float", 0.05),
            "initial_divisor": ("float", 10.0),
            "final_divisor": ("float", 1000.0),
            "beta1": ("float", 0.9),
            "beta2": ("float", 0.999),
            "epsilon": ("float", 1e-8),
            "weight_decay": ("float", 0.05),
            "voxel_size": ("float", 0.025),
            "crop_points": ("int", 100_000),
        },
        "augment": {
            "enabled": ("bool", True),
            "center_shift": ("bool", _G.center_shift),
            "dropout_p": ("float", _G.dropout_p),
            "dropout_ratio": ("float", _G.dropout_ratio),
            "rotate_z": ("bool", _G.rotate_z),
            "rotate_xy_max": ("float", _G.rotate_xy_max),
            "flip_p": ("float", _G.flip_p),
            "jitter_sigma": ("float", _G.jitter_sigma),
            "jitter_clip": ("float", _G.jitter_clip),
            "auto_contrast_p": ("float", _C.auto_contrast_p),
            "translation_p": ("float", _C.translation_p),
            "translation_ratio": ("float", _C.translation_ratio),
            "chroma_jitter_p": ("float", _C.jitter_p),
            "chroma_jitter_sigma": ("float", _C.jitter_sigma),
            "normalize": ("bool", _C.normalize),
        },
        "tta": {
            "enabled": ("bool", True),
            "yaw_degrees": ("float_list", [0.0, 90.0, 180.0, 270.0]),
            "mirror_x": ("bool", True),
        },
        "eval": {
            "voxel_size": ("float", 0.025),
            "budget": ("int", 200_000),
            "split": ("str", "test"),
        },
        "render": {
            "width": ("int", 1024),
            "height": ("int", 512),
            "mode": ("str", "rgb"),
            "max_range": ("float", 25.0),
        },
        "prelabel": {"format": ("str", "columnar")},
        "synth": _synth_defaults(base),
    }


def _parse_value(kind: str, raw: str, where: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            lowered = raw.strip().lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "int_list":
            return [int(v) for v in raw.split(",") if v.strip() != ""]
        if kind == "float_list":
            return [float(v) for v in raw.split(",") if v.strip() != ""]
        return raw.strip()
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from None


def _format_value(kind: str, value) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float":
        return repr(float(value))
    if kind == "int_list":
        return ",".join(str(int(v)) for v in value)
    if kind == "float_list":
        return ",".join(repr(float(v)) for v in value)
    return str(value)


class RunConfig:
    """Fully resolved configuration values for one run."""

    def __init__(self, values: dict, schema: dict):
        self.values = values
        self.schema = schema

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        """Parse an INI file (optional), then apply (section, key) overrides."""
        raw: dict[tuple[str, str], str] = {}
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None)
            try:
                with open(path) as fh:
                    parser.read_file(fh)
            except (OSError, configparser.Error) as e:
                raise ConfigError(f"cannot read config {path}: {e}") from None
            for sec in parser.sections():
                for key, val in parser.items(sec):
                    raw[(sec, key)] = val
        for k, v in (overrides or {}).items():
            raw[k] = v

        preset = raw.get(("synth", "preset"), "default")
        schema = _schema(preset)
        values = {sec: {key: default for key, (_k, default) in keys.items()}
                  for sec, keys in schema.items()}
        for (sec, key), rawval in raw.items():
            if sec not in schema or key not in schema[sec]:
                raise ConfigError(f"unknown config entry [{sec}] {key}")
            kind = schema[sec][key][0]
            values[sec][key] = _parse_value(kind, rawval, f"[{sec}] {key}")
        values["synth"]["preset"] = "custom"
        return cls(values, schema)

    def get(self, section: str, key: str):
        return self.values[section][key]

    def echo(self) -> str:
        lines = []
        for sec in sorted(self.values):
            lines.append(f"[{sec}]")
            for key in sorted(self.values[sec]):
                kind = self.schema[sec][key][0]
                lines.append(f"{key} = {_format_value(kind, self.values[sec][key])}")
            lines.append("")
        return "\n".join(lines)

    def write_echo(self, path) -> Path:
        path = Path(path)
        path.write_text(self.echo())
        return path

    # ------------------------------------------------------------------
    # Typed builders

    @property
    def seed(self) -> int:
        return self.get("run", "seed")

    def scene_spec(self) -> SceneSpec:
        g = lambda k: self.get("synth", k)  # noqa: E731
        pair = lambda k: tuple(g(k))  # noqa: E731
        try:
            return SceneSpec(width_range=pair("width"), depth_range=pair("depth"),
                             height_range=pair("height"), density=g("density"),
                             doors=pair("doors"), windows=pair("windows"),
                             beams=pair("beams"), columns=pair("columns"),
                             stairs=pair("stairs"), installations=pair("installations"),
                             equipment=pair("equipment"), clutter=pair("clutter"),
                             color_noise=g("color_noise"))
        except ValueError as e:
            raise ConfigError(f"[synth]: {e}") from None

    def model_config(self, num_classes: int) -> ModelConfig:
        try:
            return ModelConfig(num_classes=num_classes,
                               input_channels=self.get("model", "input_channels"),
                               stage_widths=tuple(self.get("model", "stage_widths")),
                               k_neighbors=self.get("model", "k_neighbors"),
                               pool_voxel_sizes=tuple(self.get("model",
                                                               "pool_voxel_sizes")),
                               seed=self.seed)
        except ValueError as e:
            raise ConfigError(f"[model]: {e}") from None

    def augment_config(self) -> AugmentConfig:
        if not self.get("augment", "enabled"):
            return AugmentConfig.off()
        g = lambda k: self.get("augment", k)  # noqa: E731
        try:
            return AugmentConfig(
                geometric=GeometricConfig(
                    center_shift=g("center_shift"), dropout_p=g("dropout_p"),
                    dropout_ratio=g("dropout_ratio"), rotate_z=g("rotate_z"),
                    rotate_xy_max=g("rotate_xy_max"), flip_p=g("flip_p"),
                    jitter_sigma=g("jitter_sigma"), jitter_clip=g("jitter_clip")),
                chromatic=ChromaticConfig(
                    auto_contrast_p=g("auto_contrast_p"),
                    translation_p=g("translation_p"),
                    translation_ratio=g("translation_ratio"),
                    jitter_p=g("chroma_jitter_p"),
                    jitter_sigma=g("chroma_jitter_sigma"),
                    normalize=g("normalize")))
        except ValueError as e:
            raise ConfigError(f"[augment]: {e}") from None

    def tta_config(self) -> TtaConfig:
        if not self.get("tta", "enabled"):
            return TtaConfig(yaw_angles=(0.0,), mirror_x=False)
        try:
            yaws = tuple(math.radians(d) for d in self.get("tta", "yaw_degrees"))
            return TtaConfig(yaw_angles=yaws, mirror_x=self.get("tta", "mirror_x"))
        except ValueError as e:
            raise ConfigError(f"[tta]: {e}") from None

    def train_config(self) -> TrainConfig:
        g = lambda k: self.get("train", k)  # noqa: E731
        try:
            return TrainConfig(
                max_epochs=g("max_epochs"), patience=g("patience"),
                min_delta=g("min_delta"), batch_size=g("batch_size"),
                max_lr=g("max_lr"),
                onecycle=OneCycleConfig(warmup_fraction=g("warmup_fraction"),
                                        initial_divisor=g("initial_divisor"),
                                        final_divisor=g("final_divisor")),
                adamw=AdamWConfig(beta1=g("beta1"), beta2=g("beta2"),
                                  epsilon=g("epsilon"),
                                  weight_decay=g("weight_decay")),
                seed=self.seed, voxel_size=g("voxel_size"),
                crop_points=g("crop_points"), augment=self.augment_config())
        except ValueError as e:
            raise ConfigError(f"[train]: {e}") from None
