"""Black-box classifiers with exact input gradients.

Every model maps an (H, W, C) image to a vector of class scores and can return
the gradient of one score (or of a sum of scores) with respect to the image.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import InputShapeError, as_image
from .io import load_tensor_dir, read_kv, save_tensor_dir, write_kv


class InvalidClassError(ValueError):
    pass


class ModelFailureError(RuntimeError):
    pass


class TrainingFailureError(RuntimeError):
    pass


def class_tuple(c) -> tuple:
    if isinstance(c, (int, np.integer)):
        return (int(c),)
    return tuple(int(k) for k in c)


class BlackBox:
    """Score function f: images -> R^C with analytic input gradients.

    Subclasses implement ``_scores`` and ``_score_and_gradient``; a class
    argument may be a single index or a sequence, in which case the gradient
    is that of the summed scores.
    """

    num_classes: int
    input_shape: tuple

    def check_input(self, x) -> np.ndarray:
        x = as_image(x)
        if self.input_shape is not None and x.shape != tuple(self.input_shape):
            raise InputShapeError(f"model expects {tuple(self.input_shape)}, got {x.shape}")
        return x

    def check_class(self, c) -> tuple:
        cs = class_tuple(c)
        for k in cs:
            if not 0 <= k < self.num_classes:
                raise InvalidClassError(f"class {k} outside [0, {self.num_classes})")
        return cs

    def scores(self, x) -> np.ndarray:
        return self._scores(self.check_input(x))

    def gradient(self, x, c) -> np.ndarray:
        return self.score_and_gradient(x, c)[1]

    def score_and_gradient(self, x, c):
        x = self.check_input(x)
        cs = self.check_class(c)
        return self._score_and_gradient(x, cs)

    def _scores(self, x):
        raise NotImplementedError

    def _score_and_gradient(self, x, cs):
        raise NotImplementedError


class LinearModel(BlackBox):
    """Single-output linear score <w, x> + b."""

    def __init__(self, w, b: float = 0.0):
        self.w = as_image(w)
        self.b = float(b)
        self.num_classes = 1
        self.input_shape = self.w.shape

    def _scores(self, x):
        return np.array([np.sum(self.w * x) + self.b])

    def _score_and_gradient(self, x, cs):
        return self._scores(x), len(cs) * self.w.copy()


class RegionMeanModel(BlackBox):
    """Score of class c is the mean intensity over its pixel region.

    ``regions`` is a boolean (C, H, W) stack; the mean also runs over channels.
    """

    def __init__(self, regions, channels: int = 1):
        regions = np.asarray(regions, dtype=bool)
        if regions.ndim == 2:
            regions = regions[None]
        if np.any(regions.sum(axis=(1, 2)) == 0):
            raise ValueError("every class region must be nonempty")
        self.regions = regions
        self.num_classes = regions.shape[0]
        self.input_shape = (regions.shape[1], regions.shape[2], channels)
        self._weights = regions[..., None] / (regions.sum(axis=(1, 2))[:, None, None, None] * channels)
        self._weights = np.broadcast_to(self._weights, (self.num_classes, *self.input_shape)).copy()

    @classmethod
    def from_boxes(cls, height, width, boxes, channels: int = 1):
        regions = np.zeros((len(boxes), height, width), dtype=bool)
        for k, (x0, y0, x1, y1) in enumerate(boxes):
            regions[k, y0:y1, x0:x1] = True
        return cls(regions, channels)

    def _scores(self, x):
        return np.tensordot(self._weights, x, axes=3)

    def _score_and_gradient(self, x, cs):
        return self._scores(x), self._weights[list(cs)].sum(axis=0)


# ---------------------------------------------------------------- tiny CNN


def _conv_forward(x, w, b):
    # x (N,H,W,Ci), w (3,3,Ci,Co); zero 'same' padding
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (N,H,W,Ci,3,3)
    out = np.tensordot(cols, w, axes=([4, 5, 3], [0, 1, 2])) + b
    return out, cols


def _conv_backward(dout, cols, w, need_dx=True):
    dw = np.tensordot(cols, dout, axes=([0, 1, 2], [0, 1, 2]))  # (Ci,3,3,Co)
    dw = dw.transpose(1, 2, 0, 3)
    db = dout.sum(axis=(0, 1, 2))
    if not need_dx:
        return None, dw, db
    n, h, wd, _ = dout.shape
    dcols = np.tensordot(dout, w, axes=([3], [3]))  # (N,H,W,3,3,Ci)
    dxp = np.zeros((n, h + 2, wd + 2, w.shape[2]))
    for i in range(3):
        for j in range(3):
            dxp[:, i : i + h, j : j + wd, :] += dcols[:, :, :, i, j, :]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def _pool_forward(x):
    n, h, w, c = x.shape
    blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, h // 2, w // 2, c, 4)
    # argmax returns the first maximum: row-major tie-breaking within the window
    idx = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dout, idx, shape):
    n, h, w, c = shape
    onehot = (np.arange(4) == idx[..., None]) * dout[..., None]
    onehot = onehot.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return onehot.reshape(n, h, w, c)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc_w", "fc_b")


class TinyCnn(BlackBox):
    """conv3x3(8)-ReLU-pool2, conv3x3(16)-ReLU-pool2, dense, softmax.

    Scores are softmax probabilities. Backpropagation is written out by hand;
    ReLU has subgradient 0 at 0 and max-pool routes to the first argmax.
    """

    def __init__(self, params: dict, input_shape=(32, 32, 1)):
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in PARAM_NAMES}
        self.input_shape = tuple(int(s) for s in input_shape)
        self.num_classes = self.params["fc_b"].shape[0]
        h, w, _ = self.input_shape
        if h % 4 or w % 4:
            raise InputShapeError("TinyCnn input height and width must be multiples of 4")

    @classmethod
    def init(cls, num_classes: int = 3, input_shape=(32, 32, 1), seed: int = 0):
        rng = np.random.default_rng(seed)
        h, w, c = input_shape
        flat = (h // 4) * (w // 4) * 16
        params = {
            "conv1_w": rng.standard_normal((3, 3, c, 8)) * np.sqrt(2.0 / (9 * c)),
            "conv1_b": np.zeros(8),
            "conv2_w": rng.standard_normal((3, 3, 8, 16)) * np.sqrt(2.0 / 72),
            "conv2_b": np.zeros(16),
            "fc_w": rng.standard_normal((flat, num_classes)) * np.sqrt(1.0 / flat),
            "fc_b": np.zeros(num_classes),
        }
        return cls(params, input_shape)

    def forward(self, xs):
        """Batched forward pass; returns (logits, cache)."""
        p = self.params
        z1, cols1 = _conv_forward(xs, p["conv1_w"], p["conv1_b"])
        a1 = np.maximum(z1, 0.0)
        h1, idx1 = _pool_forward(a1)
        z2, cols2 = _conv_forward(h1, p["conv2_w"], p["conv2_b"])
        a2 = np.maximum(z2, 0.0)
        h2, idx2 = _pool_forward(a2)
        flat = h2.reshape(len(xs), -1)
        logits = flat @ p["fc_w"] + p["fc_b"]
        cache = (cols1, z1, idx1, cols2, z2, idx2, flat, h2.shape)
        return logits, cache

    def backward(self, dlogits, cache, need_dx=True):
        """Backpropagate dL/dlogits; returns (dL/dx, parameter grads)."""
        p = self.params
        cols1, z1, idx1, cols2, z2, idx2, flat, h2_shape = cache
        grads = {"fc_w": flat.T @ dlogits, "fc_b": dlogits.sum(axis=0)}
        dh2 = (dlogits @ p["fc_w"].T).reshape(h2_shape)
        da2 = _pool_backward(dh2, idx2, z2.shape)
        dz2 = da2 * (z2 > 0)
        dh1, grads["conv2_w"], grads["conv2_b"] = _conv_backward(dz2, cols2, p["conv2_w"])
        da1 = _pool_backward(dh1, idx1, z1.shape)
        dz1 = da1 * (z1 > 0)
        dx, grads["conv1_w"], grads["conv1_b"] = _conv_backward(dz1, cols1, p["conv1_w"], need_dx)
        return dx, grads

    def predict_proba(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64)
        out = []
        for start in range(0, len(xs), 256):
            logits, _ = self.forward(xs[start : start + 256])
            out.append(_softmax(logits))
        return np.concatenate(out) if out else np.zeros((0, self.num_classes))

    def _scores(self, x):
        logits, _ = self.forward(x[None])
        return _softmax(logits)[0]

    def _score_and_gradient(self, x, cs):
        logits, cache = self.forward(x[None])
        prob = _softmax(logits)[0]
        # d(sum_c p_c)/dz_j = sum_c p_c (delta_cj - p_j)
        sel = np.zeros_like(prob)
        sel[list(cs)] = 1.0
        dz = prob * sel - prob * np.sum(prob * sel)
        dx, _ = self.backward(dz[None], cache)
        return prob, dx[0]


# ---------------------------------------------------------------- corpus

SHAPE_NAMES = ("square", "disk", "cross")


@dataclass
class ShapeCorpus:
    images: np.ndarray  # (n, H, W, 1)
    labels: np.ndarray  # (n,)
    boxes: np.ndarray  # (n, 4) as x0, y0, x1, y1 with exclusive ends

    def __len__(self):
        return len(self.labels)

    def subset(self, start, stop):
        return ShapeCorpus(self.images[start:stop], self.labels[start:stop], self.boxes[start:stop])


def _shape_pixels(kind, size):
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == 0:
        return np.ones((size, size), dtype=bool)
    if kind == 1:
        c = (size - 1) / 2.0
        return (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2.0) ** 2
    t = max(2, size // 3)
    lo = (size - t) // 2
    return ((xx >= lo) & (xx < lo + t)) | ((yy >= lo) & (yy < lo + t))


def generate_shape_corpus(n: int, seed: int, size: int = 32) -> ShapeCorpus:
    """Images with one square, disk or cross on a faint noise texture."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    images = np.empty((n, size, size, 1))
    labels = np.empty(n, dtype=np.int64)
    boxes = np.empty((n, 4), dtype=np.int64)
    for i in range(n):
        kind = int(rng.integers(3))
        s = int(rng.integers(6, 17))
        top = int(rng.integers(0, size - s + 1))
        left = int(rng.integers(0, size - s + 1))
        pix = _shape_pixels(kind, s)
        img = 0.1 * rng.random((size, size))
        fill = rng.uniform(0.5, 1.0)
        region = np.zeros((size, size), dtype=bool)
        region[top : top + s, left : left + s] = pix
        img[region] += fill
        ys, xs = np.nonzero(region)
        # float32-representable so MPT1 round trips are exact
        images[i, :, :, 0] = np.clip(img, 0.0, 1.0).astype(np.float32)
        labels[i] = kind
        boxes[i] = (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)
    return ShapeCorpus(images, labels, boxes)


def shape_region(corpus: ShapeCorpus, i: int) -> np.ndarray:
    """Boolean pixel set of the shape in image i (bright pixels inside its box)."""
    x0, y0, x1, y1 = corpus.boxes[i]
    out = np.zeros(corpus.images.shape[1:3], dtype=bool)
    out[y0:y1, x0:x1] = corpus.images[i, y0:y1, x0:x1, 0] > 0.3
    return out


# ---------------------------------------------------------------- training


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    train_accuracy: float = float("nan")
    test_accuracy: float = float("nan")


def accuracy(model: TinyCnn, corpus: ShapeCorpus) -> float:
    pred = np.argmax(model.predict_proba(corpus.images), axis=1)
    return float(np.mean(pred == corpus.labels))


def train_tiny_cnn(corpus: ShapeCorpus, epochs: int = 10, lr: float = 0.05, seed: int = 0,
                   test_corpus: ShapeCorpus | None = None, batch_size: int = 32,
                   momentum: float = 0.9, weight_decay: float = 1e-2):
    """Minibatch SGD with momentum and L2 weight decay on softmax cross-entropy.

    Returns (model, report). Deterministic given ``seed``.
    """
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    if lr <= 0:
        raise ValueError("lr must be > 0")
    model = TinyCnn.init(3, corpus.images.shape[1:], seed)
    rng = np.random.default_rng(seed + 1)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    report = TrainReport()
    n = len(corpus)
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xs, ys = corpus.images[idx], corpus.labels[idx]
            logits, cache = model.forward(xs)
            prob = _softmax(logits)
            loss = -np.sum(np.log(prob[np.arange(len(idx)), ys] + 1e-300))
            if not np.isfinite(loss):
                raise TrainingFailureError("loss diverged")
            total += loss
            dlogits = prob.copy()
            dlogits[np.arange(len(idx)), ys] -= 1.0
            dlogits /= len(idx)
            _, grads = model.backward(dlogits, cache, need_dx=False)
            for k in PARAM_NAMES:
                g = grads[k] + weight_decay * model.params[k] if k.endswith("_w") else grads[k]
                velocity[k] = momentum * velocity[k] - lr * g
                model.params[k] += velocity[k]
        report.epoch_losses.append(total / n)
    report.train_accuracy = accuracy(model, corpus)
    if test_corpus is not None:
        report.test_accuracy = accuracy(model, test_corpus)
    return model, report


# ---------------------------------------------------------------- persistence


def save_model(model: BlackBox, directory) -> None:
    d = Path(directory)
    if isinstance(model, TinyCnn):
        save_tensor_dir(d, model.params)
        kind = "tiny_cnn"
    elif isinstance(model, LinearModel):
        save_tensor_dir(d, {"w": model.w, "b": np.array([model.b])})
        kind = "linear"
    elif isinstance(model, RegionMeanModel):
        save_tensor_dir(d, {"regions": model.regions.astype(np.float64)})
        kind = "region_mean"
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    write_kv(d / "model.txt", {"kind": kind, "input_shape": list(model.input_shape)})


def load_model(directory) -> BlackBox:
    d = Path(directory)
    if not (d / "model.txt").exists():
        raise FileNotFoundError(f"no model.txt in {d}")
    meta = read_kv(d / "model.txt")
    shape = tuple(int(s) for s in meta["input_shape"].split(","))
    t = load_tensor_dir(d)
    kind = meta["kind"]
    if kind == "tiny_cnn":
        return TinyCnn(t, shape)
    if kind == "linear":
        return LinearModel(t["w"], float(t["b"][0]))
    if kind == "region_mean":
        return RegionMeanModel(t["regions"] > 0.5, shape[2])
    raise ValueError(f"unknown model kind {kind!r}")


def save_corpus(corpus: ShapeCorpus, directory) -> None:
    from .io import save_mpt1

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_mpt1(d / "images.mpt1", corpus.images)
    rows = ["index,label,x0,y0,x1,y1"]
    for i, (lab, box) in enumerate(zip(corpus.labels, corpus.boxes)):
        rows.append(",".join(str(int(v)) for v in (i, lab, *box)))
    (d / "labels.csv").write_text("\n".join(rows) + "\n")


def load_corpus(directory) -> ShapeCorpus:
    import csv

    from .io import load_mpt1

    d = Path(directory)
    images = load_mpt1(d / "images.mpt1")
    with open(d / "labels.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    labels = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    boxes = np.array([[int(r[k]) for k in ("x0", "y0", "x1", "y1")] for r in rows], dtype=np.int64)
    if len(labels) != len(images):
        raise ValueError("labels.csv and images.mpt1 disagree on sample count")
    return ShapeCorpus(images, labels, boxes)
