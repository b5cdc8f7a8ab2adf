"""Learned perturbation masks and gradient/occlusion saliency baselines."""

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .blackbox import BlackBox, ModelFailureError, class_tuple
from .core import as_image, heatmap_from_channels, tv_energy, tv_gradient, upsample_weights
from .io import save_mpt1, save_pgm, write_kv
from .perturb import Perturber, PerturbSpec

GAMES = ("deletion", "preservation")


@dataclass(frozen=True)
class ObjectiveConfig:
    game: str = "deletion"
    lambda1: float = 1e-4
    lambda2: float = 1e-2
    beta: float = 3.0
    target_class: int | tuple = 0
    jitter_tau: int = 4
    jitter_samples_per_step: int = 1
    robust: bool = True

    def __post_init__(self):
        if self.game not in GAMES:
            raise ValueError(f"unknown game {self.game!r}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularization weights must be >= 0")
        if self.beta <= 1:
            raise ValueError("beta must be > 1")
        if self.jitter_tau < 0 or self.jitter_samples_per_step < 1:
            raise ValueError("invalid jitter settings")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.1
    iters: int = 300
    mask_h: int | None = None  # None: ceil(H / scale) when robust, else H
    mask_w: int | None = None
    upsample_scale: int = 8
    mask_blur_sigma: float = 5.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.iters < 0:
            raise ValueError("iters must be >= 0")


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape), 0)


def adam_step(state: AdamState, m, grad, opt: OptimConfig):
    """Bias-corrected Adam update followed by projection onto [0, 1]."""
    m = np.asarray(m, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    t = state.step + 1
    m1 = opt.adam_beta1 * state.first_moment + (1.0 - opt.adam_beta1) * grad
    m2 = opt.adam_beta2 * state.second_moment + (1.0 - opt.adam_beta2) * grad * grad
    mhat = m1 / (1.0 - opt.adam_beta1**t)
    vhat = m2 / (1.0 - opt.adam_beta2**t)
    new = np.clip(m - opt.lr * mhat / (np.sqrt(vhat) + opt.adam_eps), 0.0, 1.0)
    return new, AdamState(m1, m2, t)


def shift_image(x, ty: int, tx: int) -> np.ndarray:
    """x(. - tau) with edge replication at the uncovered border."""
    if ty == 0 and tx == 0:
        return x
    h, w = x.shape[:2]
    return np.pad(x, ((ty, 0), (tx, 0), (0, 0)), mode="edge")[:h, :w]


def mask_shape(x0_shape, cfg: ObjectiveConfig, opt: OptimConfig):
    h, w = x0_shape[:2]
    if not cfg.robust:
        return h, w
    s = opt.upsample_scale
    return (opt.mask_h or math.ceil(h / s), opt.mask_w or math.ceil(w / s))


class MaskObjective:
    """The regularized deletion/preservation objective bound to one image.

    With ``robust`` the variable is a low-resolution mask m and the image is
    perturbed by its smooth upsampling M; otherwise m acts at full resolution.
    """

    def __init__(self, model: BlackBox, spec: PerturbSpec, x0, cfg: ObjectiveConfig,
                 opt: OptimConfig | None = None):
        self.model = model
        self.spec = spec
        self.x0 = model.check_input(x0)
        self.cfg = cfg
        self.opt = opt or OptimConfig()
        self.classes = model.check_class(cfg.target_class)
        self.sign = 1.0 if cfg.game == "deletion" else -1.0
        h, w = self.x0.shape[:2]
        self.mask_shape = mask_shape(self.x0.shape, cfg, self.opt)
        if cfg.robust:
            mh, mw = self.mask_shape
            s = self.opt.upsample_scale
            self.ay = upsample_weights(mh, s, self.opt.mask_blur_sigma, h)
            self.ax = upsample_weights(mw, s, self.opt.mask_blur_sigma, w)
        self._perturbers = {}

    def perturber(self, shift=(0, 0)) -> Perturber:
        if shift not in self._perturbers:
            self._perturbers[shift] = Perturber(self.spec, shift_image(self.x0, *shift))
        return self._perturbers[shift]

    def upsample(self, m) -> np.ndarray:
        if not self.cfg.robust:
            return np.asarray(m, dtype=np.float64)
        return self.ay @ m @ self.ax.T

    def draw_shifts(self, rng) -> list:
        tau = self.cfg.jitter_tau
        if tau <= 1:
            return [(0, 0)] * self.cfg.jitter_samples_per_step
        return [tuple(int(v) for v in rng.integers(0, tau, size=2))
                for _ in range(self.cfg.jitter_samples_per_step)]

    def target_score(self, x) -> float:
        scores = self.model.scores(x)
        if not np.all(np.isfinite(scores)):
            raise ModelFailureError("model returned non-finite scores")
        return float(sum(scores[c] for c in self.classes))

    def l1(self, m) -> float:
        return float(np.sum(1.0 - m)) if self.sign > 0 else float(np.sum(m))

    def evaluate(self, m, shifts=((0, 0),)):
        """Return (value, gradient, parts) with parts = (l1, tv, mean score)."""
        m = np.asarray(m, dtype=np.float64)
        if m.shape != tuple(self.mask_shape):
            raise ValueError(f"mask shape {m.shape} != expected {self.mask_shape}")
        cfg = self.cfg
        big = self.upsample(m)
        score = 0.0
        dbig = np.zeros_like(big)
        for shift in shifts:
            pert = self.perturber(tuple(shift))
            xp = pert.apply(big)
            s, g = self.model.score_and_gradient(xp, self.classes)
            if not np.all(np.isfinite(s)) or not np.all(np.isfinite(g)):
                raise ModelFailureError("model returned non-finite scores or gradients")
            score += sum(s[c] for c in self.classes)
            dbig += pert.vjp(big, g)
        score /= len(shifts)
        dbig /= len(shifts)
        dm = self.ay.T @ dbig @ self.ax if cfg.robust else dbig
        l1 = self.l1(m)
        tv = tv_energy(m, cfg.beta) if cfg.lambda2 > 0 else 0.0
        value = cfg.lambda1 * l1 + cfg.lambda2 * tv + self.sign * score
        grad = self.sign * dm - self.sign * cfg.lambda1
        if cfg.lambda2 > 0:
            grad = grad + cfg.lambda2 * tv_gradient(m, cfg.beta)
        return float(value), grad, (l1, tv, float(score))


def objective(cfg: ObjectiveConfig, model: BlackBox, spec: PerturbSpec, x0, m,
              opt: OptimConfig | None = None, rng=None):
    """Objective value and its exact gradient with respect to m.

    One jitter draw per sample is taken from ``rng`` (no jitter without it).
    """
    obj = MaskObjective(model, spec, x0, cfg, opt)
    shifts = obj.draw_shifts(rng) if rng is not None else [(0, 0)]
    value, grad, _ = obj.evaluate(m, shifts)
    return value, grad


def _disk_distances(mask_h, mask_w):
    yy, xx = np.indices((mask_h, mask_w), dtype=np.float64)
    return np.hypot(yy - (mask_h - 1) / 2.0, xx - (mask_w - 1) / 2.0)


def init_circular_mask(model: BlackBox, spec: PerturbSpec, x0, c, mask_h: int, mask_w: int,
                       game: str = "deletion", scale: int = 1, sigma_m: float = 0.0) -> np.ndarray:
    """Smallest centred disk reaching 99% of the full-perturbation score change.

    Deletion: zeros inside the disk must push the score to within 1% of the
    fully perturbed score. Preservation: ones inside the disk must keep the
    score within 1% of the original. Falls back to all zeros when the
    perturbation does not lower the score at all.
    """
    x0 = model.check_input(x0)
    classes = model.check_class(c)
    h, w = x0.shape[:2]
    pert = Perturber(spec, x0)
    ay = upsample_weights(mask_h, scale, sigma_m, h)
    ax = upsample_weights(mask_w, scale, sigma_m, w)

    def score(m):
        s = model.scores(pert.apply(ay @ m @ ax.T))
        return float(sum(s[k] for k in classes))

    zeros = np.zeros((mask_h, mask_w))
    p0 = float(sum(model.scores(x0)[k] for k in classes))
    pb = score(zeros)
    if p0 - pb <= 1e-12:
        return zeros
    dist = _disk_distances(mask_h, mask_w)
    for r in range(0, int(math.ceil(math.hypot(mask_h, mask_w))) + 1):
        inside = dist <= r
        if game == "deletion":
            m = np.where(inside, 0.0, 1.0)
            if score(m) <= p0 - 0.99 * (p0 - pb):
                return m
        else:
            m = np.where(inside, 1.0, 0.0)
            if score(m) >= pb + 0.99 * (p0 - pb):
                return m
    return zeros


@dataclass
class ExplainResult:
    mask: np.ndarray
    upsampled_mask: np.ndarray
    saliency: np.ndarray
    objective_trace: list  # (objective, l1, tv, score) per iteration
    final_scores: tuple  # (p0, p_masked, p_b, p_prime)
    config: dict = field(default_factory=dict)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_mpt1(d / "mask.mpt1", self.mask)
        save_mpt1(d / "upsampled_mask.mpt1", self.upsampled_mask)
        save_mpt1(d / "saliency.mpt1", self.saliency)
        save_pgm(d / "saliency.pgm", self.saliency)
        rows = ["iter,objective,l1,tv,score"]
        for i, (v, l1, tv, s) in enumerate(self.objective_trace):
            rows.append(f"{i},{v!r},{l1!r},{tv!r},{s!r}")
        (d / "trace.csv").write_text("\n".join(rows) + "\n")
        p0, p, pb, pp = self.final_scores
        write_kv(d / "meta.txt", {**self.config, "p0": p0, "p_masked": p, "p_b": pb, "p_prime": pp})


def learn_mask(model: BlackBox, spec: PerturbSpec, x0, cfg: ObjectiveConfig,
               opt: OptimConfig) -> ExplainResult:
    from .evaluation import normalized_score

    obj = MaskObjective(model, spec, x0, cfg, opt)
    mh, mw = obj.mask_shape
    if cfg.robust:
        m = init_circular_mask(model, spec, obj.x0, cfg.target_class, mh, mw, cfg.game,
                               opt.upsample_scale, opt.mask_blur_sigma)
    else:
        m = init_circular_mask(model, spec, obj.x0, cfg.target_class, mh, mw, cfg.game)
    rng = np.random.default_rng(opt.seed)
    state = AdamState.zeros(m.shape)
    trace = []
    for it in range(opt.iters):
        value, grad, (l1, tv, s) = obj.evaluate(m, obj.draw_shifts(rng))
        if not math.isfinite(value) or not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"objective became non-finite at iteration {it}")
        trace.append((value, l1, tv, s))
        m, state = adam_step(state, m, grad, opt)
    value, _, (l1, tv, s) = obj.evaluate(m)
    trace.append((value, l1, tv, s))

    big = obj.upsample(m)
    saliency = 1.0 - big if cfg.game == "deletion" else big.copy()
    pert = obj.perturber()
    p0 = obj.target_score(obj.x0)
    pm = obj.target_score(pert.apply(big))
    pb = obj.target_score(pert.fully_perturbed())
    config = {**{k: v for k, v in asdict(cfg).items()}, **asdict(opt),
              **{f"perturb_{k}": v for k, v in asdict(spec).items()}}
    config["target_class"] = list(class_tuple(cfg.target_class))
    return ExplainResult(m, big, saliency, trace, (p0, pm, pb, normalized_score(pm, p0, pb)), config)


# ---------------------------------------------------------------- baselines


def gradient_saliency(model: BlackBox, x0, c) -> np.ndarray:
    return heatmap_from_channels(model.gradient(x0, c))


def gradient_times_input(model: BlackBox, x0, c) -> np.ndarray:
    x0 = as_image(x0)
    return heatmap_from_channels(model.gradient(x0, c) * x0)


def occlusion_drops(model: BlackBox, spec: PerturbSpec, x0, c, window: int, stride: int):
    """Score drop max(0, p0 - p) for every window placement as (top, left, drop)."""
    x0 = model.check_input(x0)
    classes = model.check_class(c)
    h, w = x0.shape[:2]
    if window < 1 or stride < 1 or window > min(h, w):
        raise ValueError("window must fit in the image and stride must be >= 1")
    pert = Perturber(spec, x0)
    p0 = float(sum(model.scores(x0)[k] for k in classes))
    out = []
    for top in range(0, h - window + 1, stride):
        for left in range(0, w - window + 1, stride):
            m = np.ones((h, w))
            m[top : top + window, left : left + window] = 0.0
            s = model.scores(pert.apply(m))
            out.append((top, left, max(0.0, p0 - float(sum(s[k] for k in classes)))))
    return out


def occlusion_map(model: BlackBox, spec: PerturbSpec, x0, c, window: int, stride: int) -> np.ndarray:
    """Occlusion drops spread over each window, averaged where windows overlap."""
    x0 = as_image(x0)
    h, w = x0.shape[:2]
    total = np.zeros((h, w))
    count = np.zeros((h, w))
    for top, left, drop in occlusion_drops(model, spec, x0, c, window, stride):
        total[top : top + window, left : left + window] += drop
        count[top : top + window, left : left + window] += 1
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)
