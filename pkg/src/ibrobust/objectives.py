"""Training losses, optimizer, training loops, and layer-reconstruction probes."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset
from .entropy import quantize_and_rate
from .errors import (
    DivergedLoss,
    LabelOutOfRange,
    NonFinite,
    ShapeMismatch,
    TeacherMissing,
)
from .nn import Model, SplitBackbone, kl_std_normal, split_backbone

LN2 = math.log(2.0)


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 128
    learning_rate: float = 1e-3
    beta: float = 0.0
    seed: int = 0
    dataset: str = ""
    objective: str = "base"
    probe_layers: list[int] | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")


@dataclass
class TeacherHead:
    """Frozen shallow layers of a trained base model; SVBI's distillation target."""

    split: SplitBackbone

    @staticmethod
    def from_model(teacher: Model) -> "TeacherHead":
        if teacher.spec.objective != "base":
            raise TeacherMissing("teacher head must come from a base model")
        return TeacherHead(split=split_backbone(teacher))

    def forward(self, tape: T.Tape, x: T.Tensor) -> T.Tensor:
        # parameters enter as constants: no gradient ever reaches the teacher
        return self.split.head(tape, x)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _one_hot(labels: np.ndarray, k: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelOutOfRange(f"labels outside [0, {k})")
    out = np.zeros((len(labels), k), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def ce_loss(logits: T.Tensor, labels: np.ndarray) -> T.Tensor:
    """Mean negative log-likelihood in nats, via log-sum-exp."""
    if logits.data.ndim != 2:
        raise ShapeMismatch("ce_loss expects (batch, classes) logits")
    k = logits.shape[1]
    onehot = logits.tape.constant(_one_hot(labels, k, logits.dtype))
    lse = T.logsumexp(logits, axis=1)
    picked = T.sum_(T.mul(logits, onehot), axis=1)
    return T.mean(T.sub(lse, picked))


def dvib_loss(logits: T.Tensor, labels, mu: T.Tensor, sigma: T.Tensor, beta: float) -> T.Tensor:
    """Cross entropy plus beta times the Gaussian KL rate term."""
    ce = ce_loss(logits, labels)
    if beta == 0.0:
        return ce
    return T.add(ce, T.mul(kl_std_normal(mu, sigma), float(beta)))


def svbi_loss(h_teacher: T.Tensor, h_student: T.Tensor, rate_bits, beta: float,
              pixel_count: int) -> T.Tensor:
    """Head-distillation MSE plus beta times bits-per-pixel."""
    if h_teacher.shape != h_student.shape:
        raise ShapeMismatch(
            f"teacher {h_teacher.shape} vs student {h_student.shape} head shapes differ"
        )
    mse = T.mean(T.square(T.sub(h_student, h_teacher)))
    if beta == 0.0:
        return mse
    bpp = T.mul(rate_bits, float(beta) / float(pixel_count))
    return T.add(mse, bpp)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adaptive-moment optimizer; updates a parameter dict in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 trainable: set[str] | None = None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.names = sorted(trainable if trainable is not None else params.keys())
        self.m = {n: np.zeros_like(params[n]) for n in self.names}
        self.v = {n: np.zeros_like(params[n]) for n in self.names}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for n in self.names:
            g = grads.get(n)
            if g is None:
                continue
            m = self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            v = self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * (g * g)
            self.params[n] = (
                self.params[n] - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            ).astype(self.params[n].dtype)


# ---------------------------------------------------------------------------
# metrics log
# ---------------------------------------------------------------------------

LOG_COLUMNS = ("epoch", "split", "loss_total", "loss_ce_or_mse", "loss_rate", "acc_top1", "bpp")


@dataclass
class MetricsLog:
    rows: list[dict] = field(default_factory=list)

    def add(self, **kw):
        self.rows.append({c: kw.get(c, "") for c in LOG_COLUMNS})

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=LOG_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)

    def final(self, key: str, split: str = "test"):
        vals = [r[key] for r in self.rows if r["split"] == split and r[key] != ""]
        return vals[-1] if vals else None


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------


def accuracy(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 512) -> float:
    return float((model.predict(x, batch_size) == y).mean())


def dvib_rate_bits(model: Model, x: np.ndarray, batch_size: int = 512) -> float:
    """Mean per-image KL (bits) of the posterior against the prior."""
    total = 0.0
    for i in range(0, len(x), batch_size):
        tape = T.Tape(model.dtype)
        out = model.forward(tape, tape.constant(x[i : i + batch_size]))
        mu, sigma = out.bottleneck.mu.data, out.bottleneck.sigma.data
        kl = 0.5 * (mu**2 + sigma**2 - 1.0 - np.log(sigma**2)).sum(axis=1)
        total += float(kl.sum())
    return total / len(x) / LN2


def svbi_rate_bits(model: Model, x: np.ndarray, batch_size: int = 512) -> float:
    """Mean per-image coded size (bits) of the rounded latent."""
    total = 0.0
    for i in range(0, len(x), batch_size):
        tape = T.Tape(model.dtype)
        out = model.forward(tape, tape.constant(x[i : i + batch_size]), quantize="none")
        symbols = np.round(out.latent.data)
        lik = model.entropy_model.likelihood_np(symbols)
        total += float(-np.log2(np.maximum(lik, 1e-12)).sum())
    return total / len(x)


def eval_bpp(model: Model, x: np.ndarray) -> float | None:
    pixels = x.shape[2] * x.shape[3]
    if model.spec.objective == "dvib":
        return dvib_rate_bits(model, x) / pixels
    if model.spec.objective == "svbi":
        return svbi_rate_bits(model, x) / pixels
    return None


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _trainable_names(model: Model) -> set[str]:
    if model.spec.objective != "svbi":
        return set(model.params)
    return {n for n in model.params if n.split(".")[0].startswith(("enc", "dec", "entropy"))}


def train(model: Model, config: TrainConfig, dataset: Dataset,
          teacher: Model | None = None, log_path=None,
          eval_limit: int | None = None) -> tuple[Model, MetricsLog]:
    """Optimize ``model`` in place; returns it with the per-epoch metrics log.

    Deterministic for a fixed (config.seed, dataset, build): shuffling, noise
    draws and initialization all derive from the seed. SVBI training requires
    the trained base ``teacher`` whose tail the model reuses.
    """
    objective = model.spec.objective
    if objective == "svbi":
        if teacher is None:
            raise TeacherMissing("svbi training requires the base teacher model")
        head = TeacherHead.from_model(teacher)
    rng = np.random.default_rng(config.seed)
    trainable = _trainable_names(model)
    opt = Adam(model.params, lr=config.learning_rate, trainable=trainable)
    log = MetricsLog()
    n = len(dataset.train_x)
    pixels = dataset.train_x.shape[2] * dataset.train_x.shape[3]
    ex, ey = dataset.test_x, dataset.test_y
    if eval_limit is not None:
        ex, ey = ex[:eval_limit], ey[:eval_limit]

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        sums = {"total": 0.0, "fit": 0.0, "rate": 0.0}
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = dataset.train_x[idx]
            yb = dataset.train_y[idx]
            tape = T.Tape(model.dtype)
            leaves = {name: tape.leaf(model.params[name]) for name in trainable}
            try:
                if objective == "base":
                    out = model.forward(tape, tape.constant(xb), leaves, train=True)
                    fit = ce_loss(out.logits, yb)
                    loss, rate_val = fit, 0.0
                elif objective == "dvib":
                    out = model.forward(tape, tape.constant(xb), leaves, train=True, rng=rng)
                    fit = ce_loss(out.logits, yb)
                    kl = kl_std_normal(out.bottleneck.mu, out.bottleneck.sigma)
                    loss = T.add(fit, T.mul(kl, config.beta)) if config.beta else fit
                    rate_val = float(kl.data)
                else:  # svbi head distillation
                    xt = tape.constant(xb)
                    h_t = head.forward(tape, xt)
                    y_lat = model.codec_encode(tape, xt, leaves)
                    code = quantize_and_rate(
                        y_lat, model.entropy_model, "train", pixels, rng=rng,
                        param_tensors=leaves,
                    )
                    h_s = model.codec_decode(tape, code.noisy, leaves)
                    fit = T.mean(T.square(T.sub(h_s, h_t)))
                    loss = svbi_loss(h_t, h_s, code.rate_tensor, config.beta, pixels)
                    rate_val = code.rate_bits / pixels
                grads = T.backward(loss)
            except NonFinite as e:
                raise DivergedLoss(f"epoch {epoch}: {e}") from e
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise DivergedLoss(f"epoch {epoch}: loss is not finite")
            opt.step({name: T.grad_of(grads, t) for name, t in leaves.items()})
            sums["total"] += loss_val
            sums["fit"] += float(fit.data)
            sums["rate"] += rate_val
            batches += 1

        acc = accuracy(model, ex, ey)
        bpp = eval_bpp(model, ex[: min(len(ex), 2000)])
        log.add(epoch=epoch, split="train",
                loss_total=round(sums["total"] / batches, 6),
                loss_ce_or_mse=round(sums["fit"] / batches, 6),
                loss_rate=round(sums["rate"] / batches, 6))
        log.add(epoch=epoch, split="test", acc_top1=round(acc, 6),
                bpp="" if bpp is None else round(bpp, 6))
    if log_path is not None:
        log.save_csv(log_path)
    return model, log


# ---------------------------------------------------------------------------
# rate-weight sweep
# ---------------------------------------------------------------------------


def sweep_rate_weight(train_fn, baseline_acc: float, lo: float = 1e-4, hi: float = 1.0,
                      grid: int = 5, refine: int = 2, tolerance_points: float = 1.0):
    """Find the largest rate weight that stays near-lossless.

    ``train_fn(beta) -> (acc, bpp)`` trains a bottleneck model at the given
    weight. Starts from a log-spaced grid and narrows toward the highest beta
    whose accuracy stays within ``tolerance_points`` of ``baseline_acc``.
    Returns (best_beta, acc, bpp, trials) where trials lists every
    (beta, acc, bpp) evaluated.
    """
    threshold = baseline_acc - tolerance_points / 100.0
    trials: list[tuple[float, float, float]] = []

    def run(beta: float):
        acc, bpp = train_fn(beta)
        trials.append((beta, acc, bpp))
        return acc, bpp

    betas = np.geomspace(lo, hi, grid)
    results = [run(b) for b in betas]
    ok = [i for i, (acc, _) in enumerate(results) if acc >= threshold]
    if not ok:
        best = min(range(len(betas)), key=lambda i: baseline_acc - results[i][0])
        b = betas[best]
        return float(b), results[best][0], results[best][1], trials
    best_i = max(ok)
    lo_b = betas[best_i]
    hi_b = betas[best_i + 1] if best_i + 1 < len(betas) else betas[best_i] * 4.0
    best = (float(lo_b), results[best_i][0], results[best_i][1])
    for _ in range(refine):
        mid = math.sqrt(lo_b * hi_b)
        acc, bpp = run(mid)
        if acc >= threshold:
            best = (float(mid), acc, bpp)
            lo_b = mid
        else:
            hi_b = mid
    return best[0], best[1], best[2], trials


# ---------------------------------------------------------------------------
# layer-reconstruction probes
# ---------------------------------------------------------------------------


class ProbeDecoder:
    """Small reconstruction network reading one internal representation."""

    def __init__(self, rep_shape: tuple[int, int, int], out_shape: tuple[int, int, int],
                 seed: int, dtype=np.float32):
        from .nn import _Init

        self.rep_shape = rep_shape
        self.out_shape = out_shape
        self.dtype = np.dtype(dtype)
        c_in, h, _ = rep_shape
        c_out, target, _ = out_shape
        ups = 0
        cur = h
        while cur < target:
            cur *= 2
            ups += 1
        self.upsamples = ups
        width = 16
        init = _Init(seed, dtype)
        init.conv("p_in", c_in, width, 3)
        n_t = max(3, ups)  # at least three transposed-conv layers
        self.n_t = n_t
        for i in range(n_t):
            if i < ups:
                init.convT(f"p_t{i}", width, width, 4)
            else:
                init.convT(f"p_t{i}", width, width, 3)
        init.conv("p_out", width, c_out, 3)
        self.params = init.params

    def forward(self, tape: T.Tape, rep: T.Tensor, param_tensors=None) -> T.Tensor:
        def p(name):
            if param_tensors is not None and name in param_tensors:
                return param_tensors[name]
            return tape.constant(self.params[name])

        h = T.relu(T.add(T.conv2d(rep, p("p_in.w"), 1, 1), p("p_in.b")))
        for i in range(self.n_t):
            if i < self.upsamples:
                h = T.add(T.conv2d_transpose(h, p(f"p_t{i}.w"), 2, 1), p(f"p_t{i}.b"))
            else:
                h = T.add(T.conv2d_transpose(h, p(f"p_t{i}.w"), 1, 1), p(f"p_t{i}.b"))
            h = T.relu(h)
        target = self.out_shape[1]
        if h.shape[2] > target:
            h = T.slice_(h, (slice(None), slice(None), slice(0, target), slice(0, target)))
        return T.add(T.conv2d(h, p("p_out.w"), 1, 1), p("p_out.b"))


def representation(model: Model, tape: T.Tape, x: T.Tensor, layer_index: int) -> T.Tensor:
    """Trunk activation after ``layer_index`` layers (0 = the input itself)."""
    from .nn import _run_layers

    if not 0 <= layer_index <= len(model.trunk):
        raise ValueError(f"layer_index {layer_index} outside [0, {len(model.trunk)}]")
    return _run_layers(model.trunk[:layer_index], x, model._getter(tape, None))


def train_layer_probe(model: Model, layer_index: int, dataset: Dataset,
                      epochs: int = 5, batch_size: int = 128, lr: float = 1e-2,
                      seed: int = 0, train_limit: int | None = 2000,
                      test_limit: int | None = 512) -> tuple[ProbeDecoder, dict]:
    """Train a decoder reconstructing inputs from one frozen representation.

    Returns the probe and {'mse': float, 'psnr': float} on held-out samples.
    """
    x_train = dataset.train_x[:train_limit] if train_limit else dataset.train_x
    x_test = dataset.test_x[:test_limit] if test_limit else dataset.test_x
    tape0 = T.Tape(model.dtype)
    rep0 = representation(model, tape0, tape0.constant(x_train[:1]), layer_index)
    probe = ProbeDecoder(rep0.shape[1:], dataset.input_shape, seed=seed, dtype=model.dtype)
    rng = np.random.default_rng(seed)
    opt = Adam(probe.params, lr=lr)
    n = len(x_train)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb = x_train[idx]
            tape = T.Tape(model.dtype)
            leaves = {name: tape.leaf(arr) for name, arr in probe.params.items()}
            rep = representation(model, tape, tape.constant(xb), layer_index)
            recon = probe.forward(tape, rep, leaves)
            loss = T.mean(T.square(T.sub(recon, tape.constant(xb))))
            grads = T.backward(loss)
            opt.step({name: T.grad_of(grads, t) for name, t in leaves.items()})
    # held-out reconstruction quality
    tape = T.Tape(model.dtype)
    rep = representation(model, tape, tape.constant(x_test), layer_index)
    recon = probe.forward(tape, rep)
    mse = float(np.mean((recon.data - x_test) ** 2))
    psnr = float("inf") if mse == 0 else -10.0 * math.log10(mse)
    return probe, {"mse": mse, "psnr": psnr}
