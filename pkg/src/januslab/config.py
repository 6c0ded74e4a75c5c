"""Flat key-value scenario configuration.

Format: one `key = value` per line, dotted keys, `#` comments. Every key
has a default; unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

from .distill import CameraSampler, ClipSchedule, RunConfig
from .prompt import (CondProbTable, PMIConfig, Prompt, ViewBinConfig,
                     load_table, BACK, FRONT, SIDE, TOP)
from .render import RenderConfig
from .scoremodel import (BiasConfig, ReferenceScene, ToyScoreModel,
                         build_reference)


class ConfigError(Exception):
    """Bad scenario file or invalid option value."""


DEFAULTS = {
    "steps": "2000",
    "seed": "0",
    "seeds": "",                      # comma list; ablation arms use these
    "lr": "0.05",
    "field.resolution": "32",
    "image.size": "32",
    "sigma.min": "0.03",
    "sigma.max": "0.5",
    "guidance.scale": "1.0",
    "noise.samples": "4",
    "clip.mode": "none",
    "clip.psi_static": "4.0",
    "clip.psi_start": "2.0",
    "clip.psi_end": "8.0",
    "clip.stage": "post_guidance",
    "prompt.text": "a smiling dog",
    "prompt.protected": "a,dog",
    "prompt.debias": "off",
    "pmi.threshold": "0.95",
    "pmi.default_prior": "0.5",
    "pmi.normalizer": "max",
    "table.path": "",                 # empty: use the built-in example table
    "bias.beta": "0.6",
    "bias.canonical": FRONT,
    "bias.words": "smiling:0.8",
    "bins.front_half_width_deg": "22.5",
    "bins.back_half_width_deg": "22.5",
    "bins.top_elevation_deg": "60.0",
    "camera.radius": "3.0",
    "camera.fov_y": "0.8",
    "camera.elevation_min_deg": "5.0",
    "camera.elevation_max_deg": "25.0",
    "render.samples_per_ray": "64",
    "render.near": "1.2",
    "render.far": "4.8",
    "render.background": "1,1,1",
    "reference.resolution": "32",
    "template.elevation_deg": "15.0",
    "turntable.views": "100",
    "turntable.elevation_deg": "15.0",
    "metric.distance": "pyramid_mad",
    "metric.match_threshold": "0.68",
    "out.dir": "out",
}


def parse_config_text(text: str) -> dict:
    values = dict(DEFAULTS)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = val.strip()
    return values


def load_config(path) -> dict:
    try:
        with open(path) as f:
            return parse_config_text(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e


def default_example_table() -> CondProbTable:
    """Built-in table for the "a smiling dog" scenario: "smiling" strongly
    prefers the front view; neutral words are uniform across views."""
    table = CondProbTable()
    smiling = {FRONT: 0.70, SIDE: 0.15, BACK: 0.05, TOP: 0.10}
    for view in (FRONT, SIDE, BACK, TOP):
        table.rows[("smiling", view)] = (smiling[view], 0.25)
        for word in ("a", "dog"):
            table.rows[(word, view)] = (0.25, 0.25)
    table.prior = {"smiling": 0.5, "a": 0.5, "dog": 0.5}
    return table


def _f(values, key) -> float:
    try:
        return float(values[key])
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from e


def _i(values, key) -> int:
    try:
        return int(values[key])
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from e


def _flag(values, key) -> bool:
    v = values[key].lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise ConfigError(f"{key}: expected on/off, got {v!r}")


@dataclass
class Scenario:
    """Everything needed to build the score model and run configurations."""

    values: dict

    @staticmethod
    def from_file(path) -> "Scenario":
        return Scenario(load_config(path))

    @staticmethod
    def from_defaults(**overrides) -> "Scenario":
        values = dict(DEFAULTS)
        for k, v in overrides.items():
            key = k.replace("__", ".")
            if key not in DEFAULTS:
                raise ConfigError(f"unknown key {key!r}")
            values[key] = str(v)
        return Scenario(values)

    # -- pieces -------------------------------------------------------------

    def seeds(self) -> list:
        raw = self.values["seeds"].strip()
        if not raw:
            return [_i(self.values, "seed")]
        try:
            return [int(s) for s in raw.split(",") if s.strip() != ""]
        except ValueError as e:
            raise ConfigError(f"seeds: {e}") from e

    def bias(self) -> BiasConfig:
        word_bias = {}
        raw = self.values["bias.words"].strip()
        if raw:
            for part in raw.split(","):
                try:
                    word, gamma = part.split(":")
                    word_bias[word.strip().lower()] = float(gamma)
                except ValueError as e:
                    raise ConfigError(f"bias.words: {e}") from e
        try:
            return BiasConfig(_f(self.values, "bias.beta"),
                              self.values["bias.canonical"], word_bias)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def bins(self) -> ViewBinConfig:
        return ViewBinConfig(_f(self.values, "bins.front_half_width_deg"),
                             _f(self.values, "bins.back_half_width_deg"),
                             _f(self.values, "bins.top_elevation_deg"))

    def render_cfg(self) -> RenderConfig:
        bg = self.values["render.background"].split(",")
        if len(bg) != 3:
            raise ConfigError("render.background needs three components")
        try:
            bg = tuple(float(c) for c in bg)
        except ValueError as e:
            raise ConfigError(f"render.background: {e}") from e
        try:
            return RenderConfig(_i(self.values, "render.samples_per_ray"), bg,
                                _f(self.values, "render.near"),
                                _f(self.values, "render.far"))
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def image_size(self) -> tuple:
        n = _i(self.values, "image.size")
        return (n, n)

    def prompt(self) -> Prompt:
        protected = [w for w in self.values["prompt.protected"].split(",")
                     if w.strip()]
        return Prompt.from_string(self.values["prompt.text"], protected)

    def pmi_cfg(self) -> PMIConfig:
        try:
            return PMIConfig(_f(self.values, "pmi.threshold"),
                             _f(self.values, "pmi.default_prior"),
                             self.values["pmi.normalizer"])
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def table(self) -> CondProbTable:
        path = self.values["table.path"].strip()
        if not path:
            return default_example_table()
        try:
            return load_table(path)
        except OSError as e:
            raise ConfigError(f"table.path: {e}") from e

    def build_model(self):
        """Build (hidden reference field, template set, score model)."""
        scene = ReferenceScene(resolution=_i(self.values, "reference.resolution"))
        bias = self.bias()
        hidden, templates = build_reference(
            scene, self.render_cfg(), self.bins(), bias,
            image_size=self.image_size(),
            radius=_f(self.values, "camera.radius"),
            fov_y=_f(self.values, "camera.fov_y"),
            base_elevation_deg=_f(self.values, "template.elevation_deg"))
        return hidden, templates, ToyScoreModel(templates, bias)

    def run_config(self, seed: int | None = None, clip_mode: str | None = None,
                   prompt_debias: bool | None = None,
                   psi_static: float | None = None) -> RunConfig:
        v = self.values
        clip = ClipSchedule(
            clip_mode if clip_mode is not None else v["clip.mode"],
            psi_static if psi_static is not None else _f(v, "clip.psi_static"),
            _f(v, "clip.psi_start"), _f(v, "clip.psi_end"),
            max(_i(v, "steps"), 1))
        debias = _flag(v, "prompt.debias") if prompt_debias is None else prompt_debias
        seed = _i(v, "seed") if seed is None else seed
        size = self.image_size()
        camera = CameraSampler(
            math.radians(_f(v, "camera.elevation_min_deg")),
            math.radians(_f(v, "camera.elevation_max_deg")),
            _f(v, "camera.radius"), _f(v, "camera.fov_y"), size, seed)
        try:
            return RunConfig(
                steps=_i(v, "steps"), seed=seed,
                resolution=_i(v, "field.resolution"), image_size=size,
                lr=_f(v, "lr"), sigma_min=_f(v, "sigma.min"),
                sigma_max=_f(v, "sigma.max"),
                guidance_scale=_f(v, "guidance.scale"), clip=clip,
                prompt_debias=debias,
                n_noise_samples=_i(v, "noise.samples"),
                clip_stage=v["clip.stage"], prompt=self.prompt(),
                table=self.table() if debias else None,
                pmi=self.pmi_cfg(), bins=self.bins(), camera=camera,
                render=self.render_cfg())
        except ValueError as e:
            raise ConfigError(str(e)) from e
