"""Explanations as rules that predict the black box, scored by faithfulness."""

from dataclasses import dataclass

import numpy as np

from .blackbox import BlackBox
from .core import InvalidInputError, as_image

RIDGE_MAX_DIM = 256


@dataclass
class LabeledSample:
    x: np.ndarray
    in_class: bool


@dataclass
class RuleReport:
    rule_id: str
    faithfulness_error: float
    n: int
    theta: float | None = None
    epsilon: float | None = None

    def row(self) -> list:
        return [self.rule_id, "" if self.theta is None else self.theta,
                "" if self.epsilon is None else self.epsilon, self.n, repr(float(self.faithfulness_error))]


@dataclass(frozen=True)
class RidgeConfig:
    lam: float = 1e-2
    sigma: float = 0.1
    n: int = 10000
    seed: int = 0
    sampling: str = "orthogonal"  # or "iid"

    def __post_init__(self):
        if self.lam < 0 or self.sigma <= 0 or self.n < 1:
            raise ValueError("need lam >= 0, sigma > 0, n >= 1")
        if self.sampling not in ("orthogonal", "iid"):
            raise ValueError(f"unknown sampling {self.sampling!r}")


def faithfulness_q1(model: BlackBox, c: int, threshold: float, samples) -> RuleReport:
    """Error of the rule "x is in class c iff score_c(x) >= threshold"."""
    samples = list(samples)
    if not samples:
        raise InvalidInputError("no samples")
    model.check_class(c)
    fails = sum((model.scores(s.x)[c] >= threshold) != bool(s.in_class) for s in samples)
    return RuleReport("Q1", fails / len(samples), len(samples))


def rotate(x, angle: int) -> np.ndarray:
    """Counter-clockwise rotation of the spatial axes by a multiple of 90 degrees."""
    if angle % 90:
        raise InvalidInputError(f"only multiples of 90 degrees are supported, got {angle}")
    x = as_image(x)
    k = (angle // 90) % 4
    if k % 2 and x.shape[0] != x.shape[1]:
        raise InvalidInputError("90/270 degree rotations need square images")
    return np.rot90(x, k, axes=(0, 1))


def rotation_failures(model: BlackBox, samples, angle: int) -> int:
    """Count images whose predicted class changes under rotation by ``angle``."""
    return sum(int(np.argmax(model.scores(x))) != int(np.argmax(model.scores(rotate(x, angle))))
               for x in samples)


def faithfulness_q2(model: BlackBox, c: int, samples, angles) -> RuleReport:
    """Error of "rotated copies receive the same prediction" over (x, angle) pairs.

    ``c`` is kept for interface symmetry: the predicate compares argmax
    classes, so it does not depend on a particular target.
    """
    samples = list(samples)
    angles = list(angles)
    if not samples or not angles:
        raise InvalidInputError("need samples and angles")
    for a in angles:
        if a not in (90, 180, 270):
            raise InvalidInputError(f"angle {a} not in {{90, 180, 270}}")
    fails = sum(rotation_failures(model, samples, a) for a in angles)
    n = len(samples) * len(angles)
    return RuleReport("Q2", fails / n, n)


def max_theta_rule(model: BlackBox, c: int, samples, angles, epsilon: float) -> RuleReport:
    """Largest theta such that every angle <= theta is epsilon-faithful."""
    if not 0.0 <= epsilon <= 1.0:
        raise InvalidInputError("epsilon must lie in [0, 1]")
    samples = list(samples)
    theta, err = 0, 0.0
    for a in sorted(angles):
        e = faithfulness_q2(model, c, samples, [a]).faithfulness_error
        if e > epsilon:
            break
        theta, err = a, max(err, e)
    return RuleReport("Q3", err, len(samples), theta=theta, epsilon=epsilon)


def gaussian_directions(rng, n: int, d: int, orthogonal: bool = True) -> np.ndarray:
    """n standard normal vectors in R^d.

    Orthogonal mode draws them in blocks of d: a Haar-random orthonormal basis
    with independent chi(d) lengths, so each row is still exactly N(0, I) but
    rows in a block are mutually orthogonal, which shrinks the sampling error
    of the empirical covariance.
    """
    if not orthogonal:
        return rng.standard_normal((n, d))
    blocks = []
    for _ in range(-(-n // d)):
        q, r = np.linalg.qr(rng.standard_normal((d, d)))
        q = q * np.sign(np.diag(r))
        blocks.append(q.T * np.sqrt(rng.chisquare(d, size=d))[:, None])
    return np.concatenate(blocks)[:n]


def ridge_saliency(model: BlackBox, x0, c: int, cfg: RidgeConfig) -> np.ndarray:
    """Ridge-regularized local linear fit of f_c around x0 under Gaussian sampling.

    Solves (lam I + E[d d^T]) w = E[d (f(x) - f(x0))] with d = x - x0 estimated
    from ``cfg.n`` samples.
    """
    x0 = model.check_input(x0)
    model.check_class(c)
    d = x0.size
    if d > RIDGE_MAX_DIM:
        raise InvalidInputError(f"input dimension {d} exceeds {RIDGE_MAX_DIM}")
    rng = np.random.default_rng(cfg.seed)
    deltas = cfg.sigma * gaussian_directions(rng, cfg.n, d, cfg.sampling == "orthogonal")
    f0 = model.scores(x0)[c]
    df = np.array([model.scores(x0 + dx.reshape(x0.shape))[c] - f0 for dx in deltas])
    cov = deltas.T @ deltas / cfg.n
    rhs = deltas.T @ df / cfg.n
    a = cov + cfg.lam * np.eye(d)
    if cfg.lam == 0 and cfg.n < d:
        raise np.linalg.LinAlgError("singular system: lam = 0 with fewer samples than dimensions")
    return np.linalg.solve(a, rhs).reshape(x0.shape)
