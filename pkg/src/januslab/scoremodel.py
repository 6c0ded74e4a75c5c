"""Analytic stand-in for a pose/prompt-conditioned 2D diffusion model.

The image distribution given a (view bin, prompt) condition is a Dirac
mixture at template images, smoothed by Gaussian noise of scale sigma.
Every score is therefore exact, the denoiser is the exact posterior mean,
and the Bayes / mutual-information decompositions of the conditional score
can be checked numerically.

The canonical-view bias enters in two deliberate places:
  * beta mixes the canonical-view template into every conditional (and
    therefore into the marginal), modeling a dataset where frontal views
    are over-represented;
  * word_bias blends the canonical face patch into the non-canonical
    templates whenever a biasing word ("smiling", ...) is present in the
    prompt, modeling prompt/view contradiction.
"""

from __future__ import annotations

import itertools
import math
import os
from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import VoxelField, softplus_inv
from .prompt import Prompt, ViewBinConfig, TOP
from .render import Camera, ImageBuffer, RenderConfig, render, write_ppm


@dataclass
class BiasConfig:
    beta: float = 0.0
    canonical_bin: str = "front view"
    word_bias: dict = dc_field(default_factory=dict)  # word -> blend gamma in [0,1]

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        for w, g in self.word_bias.items():
            if not 0.0 <= g <= 1.0:
                raise ValueError(f"blend for {w!r} must lie in [0, 1]")


@dataclass(frozen=True)
class NoiseLevel:
    sigma: float
    sigma_min: float = 1e-3
    sigma_max: float = 10.0

    def __post_init__(self):
        if not self.sigma_min <= self.sigma <= self.sigma_max:
            raise ValueError(f"sigma {self.sigma} outside "
                             f"[{self.sigma_min}, {self.sigma_max}]")


@dataclass(frozen=True)
class Condition:
    view_bin: str
    prompt: Prompt


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.scale) and self.scale >= 0):
            raise ValueError("guidance scale must be finite and >= 0")


@dataclass
class ReferenceScene:
    """Procedural asymmetric object: a sphere with two dark eye disks and a
    mouth patch on its front (+z) hemisphere, so "front" is visually
    distinct from every other view."""

    body_radius: float = 0.62
    body_density: float = 40.0
    body_color: tuple = (0.85, 0.68, 0.45)
    feature_color: tuple = (0.05, 0.05, 0.08)
    eye_dirs: tuple = ((-0.30, 0.28, 1.0), (0.30, 0.28, 1.0))
    eye_radius_rad: float = 0.24
    mouth_dir: tuple = (0.0, -0.35, 1.0)
    mouth_radius_rad: float = 0.30
    resolution: int = 32


def build_reference_field(scene: ReferenceScene) -> VoxelField:
    n = scene.resolution
    centers = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    x, y, z = np.meshgrid(centers, centers, centers, indexing="ij")
    pts = np.stack([x, y, z], axis=-1)
    rad = np.linalg.norm(pts, axis=-1)
    inside = rad <= scene.body_radius

    raw_density = np.where(inside, softplus_inv(scene.body_density),
                           softplus_inv(1e-4))
    color = np.broadcast_to(np.asarray(scene.body_color), pts.shape).copy()
    dirs = pts / np.maximum(rad, 1e-9)[..., None]
    feats = [(d, scene.eye_radius_rad) for d in scene.eye_dirs]
    feats.append((scene.mouth_dir, scene.mouth_radius_rad))
    for fdir, frad in feats:
        u = np.asarray(fdir, dtype=np.float64)
        u = u / np.linalg.norm(u)
        ang = np.arccos(np.clip(dirs @ u, -1.0, 1.0))
        mask = inside & (ang < frad)
        color[mask] = scene.feature_color
    raw_color = np.log(color) - np.log1p(-color)  # logit
    return VoxelField(n, np.ascontiguousarray(raw_density),
                      np.ascontiguousarray(raw_color))


@dataclass
class TemplateSet:
    """Mean images keyed by (view bin, active biasing-word subset)."""

    bins: tuple
    canonical: str
    templates: dict               # (bin, wordkey) -> np.ndarray (H, W, 3)
    bias_words: tuple             # sorted biasing words with template variants
    face_patch: tuple             # (r0, r1, c0, c1) pixel box of the face region

    def key_for(self, words) -> tuple:
        return tuple(w for w in self.bias_words if w in set(words))

    def mean(self, view_bin: str, words=()) -> np.ndarray:
        return self.templates[(view_bin, self.key_for(words))]

    @property
    def image_shape(self) -> tuple:
        return next(iter(self.templates.values())).shape

    def patch(self, img: np.ndarray) -> np.ndarray:
        r0, r1, c0, c1 = self.face_patch
        return img[r0:r1, c0:c1]

    def export_ppm(self, directory) -> list:
        os.makedirs(directory, exist_ok=True)
        paths = []
        for (bin_name, key), img in sorted(self.templates.items()):
            wordkey = "+".join(key) if key else "clean"
            name = f"{bin_name.replace(' ', '_')}_{wordkey}.ppm"
            path = os.path.join(directory, name)
            write_ppm(ImageBuffer(img, "radiance"), path)
            paths.append(path)
        return paths


def build_reference(scene: ReferenceScene, render_cfg: RenderConfig,
                    bin_cfg: ViewBinConfig, bias: BiasConfig,
                    image_size: tuple = (32, 32), radius: float = 3.0,
                    fov_y: float = 0.8,
                    base_elevation_deg: float = 15.0) -> tuple:
    """Build the hidden reference field and its template set.

    Templates are renders of the hidden field at each bin's representative
    camera; word-bias variants blend the canonical face patch into the
    non-canonical templates with the word's blend weight.
    """
    if not bin_cfg.names:
        raise ValueError("bin set must be non-empty")
    hidden = build_reference_field(scene)
    base = {}
    for name in bin_cfg.names:
        az, el = bin_cfg.template_camera(name, base_elevation_deg)
        cam = Camera(math.radians(az), math.radians(el), radius, fov_y, image_size)
        base[name] = render(hidden, cam, render_cfg).data
    h, w = image_size
    patch = (5 * h // 16, 11 * h // 16, 5 * w // 16, 11 * w // 16)
    r0, r1, c0, c1 = patch
    canonical = bias.canonical_bin
    bias_words = tuple(sorted(bias.word_bias))
    templates = {}
    for name in bin_cfg.names:
        for klen in range(len(bias_words) + 1):
            for key in itertools.combinations(bias_words, klen):
                img = base[name].copy()
                if name != canonical:
                    # active biasing words push the canonical face patch in
                    keep = 1.0
                    for word in key:
                        keep *= 1.0 - bias.word_bias[word]
                    gamma = 1.0 - keep
                    img[r0:r1, c0:c1] = ((1.0 - gamma) * img[r0:r1, c0:c1]
                                         + gamma * base[canonical][r0:r1, c0:c1])
                templates[(name, key)] = img
    return hidden, TemplateSet(tuple(bin_cfg.names), canonical, templates,
                               bias_words, patch)


def _logsumexp(a, axis=None):
    m = np.max(a, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))).squeeze(axis)


class ToyScoreModel:
    """Exact scores, denoiser, guidance and score decompositions for the
    template mixture."""

    def __init__(self, templates: TemplateSet, bias: BiasConfig):
        self.templates = templates
        self.bias = bias
        # the condition universe: every (view bin, biasing-word subset)
        keys = sorted({k for _, k in templates.templates})
        self.word_keys = tuple(keys)
        self.conditions = tuple((v, k) for v in templates.bins for k in keys)

    # -- mixture plumbing ---------------------------------------------------

    def _components(self, view_bin: str, key: tuple) -> list:
        """(mean, weight) pairs of the beta-biased conditional mixture."""
        beta = self.bias.beta
        mu = self.templates.templates[(view_bin, key)]
        if beta == 0.0 or view_bin == self.bias.canonical_bin:
            return [(mu, 1.0)]
        canon = self.templates.templates[(self.bias.canonical_bin, key)]
        return [(mu, 1.0 - beta), (canon, beta)]

    def _condition_set(self, view_bin=None, key=None) -> list:
        """Flattened (mean, weight) components of the mixture obtained by
        fixing view_bin and/or word key and marginalizing the rest
        uniformly. Weights need not be normalized (scores are invariant)."""
        comps = []
        for v, k in self.conditions:
            if view_bin is not None and v != view_bin:
                continue
            if key is not None and k != key:
                continue
            comps.extend(self._components(v, k))
        if not comps:
            raise ValueError(f"empty condition subset ({view_bin!r}, {key!r})")
        return comps

    @staticmethod
    def _score_of(comps, z: np.ndarray, sigma: float) -> np.ndarray:
        means = np.stack([m.reshape(-1) for m, _ in comps])
        logw = np.log(np.array([w for _, w in comps]))
        zf = z.reshape(-1)
        diff = means - zf[None, :]
        loglik = logw - (diff * diff).sum(axis=1) / (2.0 * sigma * sigma)
        resp = np.exp(loglik - _logsumexp(loglik))
        return (resp[:, None] * diff).sum(axis=0).reshape(z.shape) / (sigma * sigma)

    @staticmethod
    def _logpdf_of(comps, z: np.ndarray, sigma: float) -> float:
        """Unnormalized-weight mixture log density (up to an additive
        constant when the weights do not sum to one)."""
        means = np.stack([m.reshape(-1) for m, _ in comps])
        logw = np.log(np.array([w for _, w in comps]))
        logw = logw - _logsumexp(logw)
        zf = z.reshape(-1)
        d = zf.size
        diff = means - zf[None, :]
        ll = (logw - (diff * diff).sum(axis=1) / (2.0 * sigma * sigma)
              - 0.5 * d * math.log(2.0 * math.pi * sigma * sigma))
        return float(_logsumexp(ll))

    def _check(self, z: ImageBuffer, sigma: float):
        if z.data.shape != self.templates.image_shape:
            raise ValueError(f"image shape {z.data.shape} != template shape "
                             f"{self.templates.image_shape}")
        if not sigma > 0:
            raise ValueError("sigma must be positive")

    def _cond_key(self, cond: Condition) -> tuple:
        return self.templates.key_for(cond.prompt.words)

    # -- public operations --------------------------------------------------

    def conditional_score(self, z: ImageBuffer, sigma: float,
                          cond: Condition) -> ImageBuffer:
        """grad_z log p(z | view, prompt; sigma), exact."""
        self._check(z, sigma)
        comps = self._components(cond.view_bin, self._cond_key(cond))
        return ImageBuffer(self._score_of(comps, z.data, sigma), "gradient")

    def unconditional_score(self, z: ImageBuffer, sigma: float) -> ImageBuffer:
        """grad_z log p(z; sigma) for the condition-marginalized mixture."""
        self._check(z, sigma)
        return ImageBuffer(self._score_of(self._condition_set(), z.data, sigma),
                           "gradient")

    def cfg_score(self, z: ImageBuffer, sigma: float, cond: Condition,
                  guidance: GuidanceConfig) -> ImageBuffer:
        """Classifier-free guidance on scores: cond + s * (cond - uncond)."""
        c = self.conditional_score(z, sigma, cond).data
        if guidance.scale == 0.0:
            return ImageBuffer(c, "gradient")
        u = self.unconditional_score(z, sigma).data
        return ImageBuffer(c + guidance.scale * (c - u), "gradient")

    def denoise(self, z: ImageBuffer, sigma: float, cond: Condition) -> ImageBuffer:
        """Exact posterior mean of the template mixture under noise sigma:
        D(z; sigma) = z + sigma^2 * conditional score."""
        s = self.conditional_score(z, sigma, cond)
        return ImageBuffer(z.data + sigma * sigma * s.data, "radiance")

    def paas_estimate(self, z: ImageBuffer, sigma: float, cond: Condition,
                      n_samples: int, seed: int,
                      guidance: GuidanceConfig | None = None,
                      score_fn=None) -> ImageBuffer:
        """Monte-Carlo perturb-and-average score: the mean over gaussian
        noise draws of (D(z + sigma*n; sigma) - z) / sigma^2.

        With guidance, D is the guided denoiser z + sigma^2 * cfg_score;
        a custom score_fn(z_perturbed, sigma) -> array overrides both.
        Noise comes from a counter-based generator keyed on the seed, so
        estimates are reproducible draw-by-draw.
        """
        self._check(z, sigma)
        if n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if score_fn is None:
            if guidance is None:
                score_fn = lambda zp, s: self.conditional_score(zp, s, cond).data
            else:
                score_fn = lambda zp, s: self.cfg_score(zp, s, cond, guidance).data
        rng = np.random.Generator(np.random.Philox(key=seed))
        acc = np.zeros_like(z.data)
        for _ in range(n_samples):
            noise = rng.standard_normal(z.data.shape)
            zp = ImageBuffer(z.data + sigma * noise, "gradient")
            denoised = z.data + sigma * noise + sigma * sigma * score_fn(zp, sigma)
            acc += (denoised - z.data) / (sigma * sigma)
        return ImageBuffer(acc / n_samples, "gradient")

    def decompose_gradient(self, z: ImageBuffer, sigma: float,
                           cond: Condition) -> dict:
        """Bayes and mutual-information split of the conditional score.

        Returns gradients of log p(z), log p(view|z), log p(prompt|z),
        log of the pose/prompt pointwise conditional mutual information,
        and log p(view, prompt | z). The additive identities
        uncond + pose_prompt = conditional and pose + prompt + pcmi =
        pose_prompt hold exactly by construction.
        """
        self._check(z, sigma)
        key = self._cond_key(cond)
        s_joint = self._score_of(self._components(cond.view_bin, key), z.data, sigma)
        s_0 = self._score_of(self._condition_set(), z.data, sigma)
        s_v = self._score_of(self._condition_set(view_bin=cond.view_bin), z.data, sigma)
        s_k = self._score_of(self._condition_set(key=key), z.data, sigma)
        grad = {
            "uncond": s_0,
            "pose_grad": s_v - s_0,
            "prompt_grad": s_k - s_0,
            "pcmi_grad": s_joint + s_0 - s_v - s_k,
            "pose_prompt_grad": s_joint - s_0,
        }
        return {k: ImageBuffer(v, "gradient") for k, v in grad.items()}

    # log densities exposed for oracle-style checks against the scores
    def log_density(self, z: ImageBuffer, sigma: float, view_bin=None,
                    key=None) -> float:
        if view_bin is None and key is None:
            comps = self._condition_set()
        elif view_bin is not None and key is not None:
            comps = self._components(view_bin, key)
        else:
            comps = self._condition_set(view_bin=view_bin, key=key)
        return self._logpdf_of(comps, z.data, sigma)
