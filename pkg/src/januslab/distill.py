"""The score-distillation optimization loop with clipping schedules.

Per step: sample a camera, assign its view prompt, optionally debias the
user prompt, render, estimate the (guided) image-space score, clip it
elementwise per the schedule, pull it back through the renderer adjoint,
and apply an ascent update to the field.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from .field import OptimizerState, VoxelField, apply_update, new_field
from .prompt import PMIConfig, Prompt, ViewBinConfig, debias_prompt
from .render import Camera, ImageBuffer, RenderConfig, render, render_vjp
from .scoremodel import Condition, GuidanceConfig, ToyScoreModel


@dataclass
class ClipSchedule:
    mode: str = "none"  # none | static | dynamic
    psi_static: float = 4.0
    psi_start: float = 2.0
    psi_end: float = 8.0
    max_step: int = 2000

    def __post_init__(self):
        if self.mode not in ("none", "static", "dynamic"):
            raise ValueError(f"unknown clip mode {self.mode!r}")
        for p in (self.psi_static, self.psi_start, self.psi_end):
            if not (math.isfinite(p) and p > 0):
                raise ValueError("clip thresholds must be finite and positive")
        if self.mode == "dynamic" and self.psi_start > self.psi_end:
            raise ValueError("dynamic schedule must be coarse-to-fine "
                             "(psi_start <= psi_end)")

    def threshold(self, step: int) -> float:
        if self.mode == "none":
            return math.inf
        if self.mode == "static":
            return self.psi_static
        return dynamic_threshold(step, self)


def clip_score(g: ImageBuffer, psi: float) -> ImageBuffer:
    """Elementwise truncation to [-psi, psi]; psi = +inf is the identity."""
    if not psi > 0:
        raise ValueError("clip threshold must be positive")
    if math.isinf(psi):
        return ImageBuffer(g.data.copy(), "gradient")
    return ImageBuffer(np.clip(g.data, -psi, psi), "gradient")


def dynamic_threshold(step: int, sched: ClipSchedule) -> float:
    """Linear coarse-to-fine threshold: psi(0) = psi_start, psi(max) = psi_end."""
    if not 0 <= step <= sched.max_step:
        raise ValueError(f"step {step} outside [0, {sched.max_step}]")
    tau = step / sched.max_step
    return (1.0 - tau) * sched.psi_start + tau * sched.psi_end


@dataclass
class CameraSampler:
    elevation_min: float = math.radians(5.0)
    elevation_max: float = math.radians(25.0)
    radius: float = 3.0
    fov_y: float = 0.8
    image_size: tuple = (32, 32)
    seed: int = 0

    def __post_init__(self):
        if not -math.pi / 2 <= self.elevation_min <= self.elevation_max <= math.pi / 2:
            raise ValueError("bad elevation range")


def sample_camera(sampler: CameraSampler, step: int) -> Camera:
    """Azimuth uniform on [0, 2pi), elevation uniform on the configured
    range; a pure function of (seed, step)."""
    rng = np.random.default_rng((sampler.seed, step))
    azimuth = rng.uniform(0.0, 2.0 * math.pi)
    elevation = rng.uniform(sampler.elevation_min, sampler.elevation_max)
    return Camera(azimuth, elevation, sampler.radius, sampler.fov_y,
                  sampler.image_size)


@dataclass
class RunConfig:
    steps: int = 2000
    seed: int = 0
    resolution: int = 32
    image_size: tuple = (32, 32)
    lr: float = 0.05
    sigma_min: float = 0.15
    sigma_max: float = 0.8
    guidance_scale: float = 1.0
    clip: ClipSchedule = dc_field(default_factory=ClipSchedule)
    prompt_debias: bool = False
    n_noise_samples: int = 4
    clip_stage: str = "post_guidance"  # or pre_guidance
    prompt: Prompt = dc_field(default_factory=lambda: Prompt(()))
    table: object = None  # CondProbTable when prompt_debias is on
    pmi: PMIConfig = dc_field(default_factory=PMIConfig)
    bins: ViewBinConfig = dc_field(default_factory=ViewBinConfig)
    camera: CameraSampler | None = None
    render: RenderConfig = dc_field(default_factory=RenderConfig)

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not 0 < self.sigma_min <= self.sigma_max:
            raise ValueError("need 0 < sigma_min <= sigma_max")
        if self.clip_stage not in ("post_guidance", "pre_guidance"):
            raise ValueError(f"unknown clip_stage {self.clip_stage!r}")
        if self.prompt_debias and self.table is None:
            raise ValueError("prompt_debias requires a probability table")
        if self.camera is None:
            self.camera = CameraSampler(image_size=self.image_size, seed=self.seed)


LOG_COLUMNS = ("step", "azimuth_deg", "elevation_deg", "sigma", "psi",
               "preclip_maxabs", "clipped_fraction", "update_norm")


def _draw_sigma(cfg: RunConfig, step: int) -> float:
    rng = np.random.default_rng((cfg.seed, step, 1))
    return float(np.exp(rng.uniform(math.log(cfg.sigma_min),
                                    math.log(cfg.sigma_max))))


def _paas_seed(cfg: RunConfig, step: int) -> int:
    return cfg.seed * 1_048_576 + step  # steps stay far below 2**20


def distill_step(fld: VoxelField, model: ToyScoreModel, cfg: RunConfig,
                 step: int, opt: OptimizerState) -> tuple:
    """One optimization step. Returns (field', opt', log record dict)."""
    if step >= cfg.steps:
        raise ValueError(f"step {step} >= configured steps {cfg.steps}")
    cam = sample_camera(cfg.camera, step)
    az_deg = math.degrees(cam.azimuth)
    el_deg = math.degrees(cam.elevation)
    view = cfg.bins.assign(az_deg, el_deg)
    prompt = cfg.prompt
    if cfg.prompt_debias:
        prompt = debias_prompt(prompt, view, cfg.table, cfg.pmi)
    cond = Condition(view, prompt)

    z = render(fld, cam, cfg.render)
    sigma = _draw_sigma(cfg, step)
    guidance = GuidanceConfig(cfg.guidance_scale)
    psi = ClipSchedule(**{**cfg.clip.__dict__, "max_step": cfg.steps or 1}
                       ).threshold(step)
    seed = _paas_seed(cfg, step)

    if cfg.clip_stage == "post_guidance":
        est = model.paas_estimate(z, sigma, cond, cfg.n_noise_samples, seed,
                                  guidance=guidance)
        preclip = est.data
        clipped = clip_score(est, psi).data
    else:
        est_c = model.paas_estimate(z, sigma, cond, cfg.n_noise_samples, seed)
        est_u = model.paas_estimate(
            z, sigma, cond, cfg.n_noise_samples, seed,
            score_fn=lambda zp, s: model.unconditional_score(zp, s).data)
        preclip = est_c.data
        cc = clip_score(est_c, psi).data
        clipped = cc + guidance.scale * (cc - est_u.data)

    preclip_maxabs = float(np.abs(preclip).max())
    frac = float(np.mean(np.abs(preclip) > psi)) if math.isfinite(psi) else 0.0

    grad = render_vjp(fld, cam, cfg.render, ImageBuffer(clipped, "gradient"))
    new_fld, new_opt = apply_update(fld, grad, opt)
    update_norm = float(np.sqrt(
        ((new_fld.raw_density - fld.raw_density) ** 2).sum()
        + ((new_fld.raw_color - fld.raw_color) ** 2).sum()))
    record = {"step": step, "azimuth_deg": az_deg, "elevation_deg": el_deg,
              "sigma": sigma, "psi": psi, "preclip_maxabs": preclip_maxabs,
              "clipped_fraction": frac, "update_norm": update_norm}
    return new_fld, new_opt, record


def optimize(cfg: RunConfig, model: ToyScoreModel,
             init_field: VoxelField | None = None) -> tuple:
    """Run the full loop; returns (field, list of log records). Deterministic
    given the config and seed."""
    fld = init_field if init_field is not None \
        else new_field(cfg.resolution, "seeded_noise", cfg.seed)
    opt = OptimizerState(lr=cfg.lr)
    records = []
    for step in range(cfg.steps):
        fld, opt, rec = distill_step(fld, model, cfg, step, opt)
        records.append(rec)
    return fld, records


def write_log(records, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for rec in records:
            writer.writerow({k: repr(v) if isinstance(v, float) else v
                             for k, v in rec.items()})
