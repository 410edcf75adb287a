"""White-box adversarial attacks: FGSM, C&W, EAD, JSMA (+ one-pixel variant),
and the latent-targeting attack on generative codecs.

All attacks operate in the [0, 1] pixel domain (any input normalization is
the model's own business), are deterministic given (model, input, config),
and return per-sample :class:`AdvResult` records whose norms are exactly
reproducible from (x, x_adv) via :func:`ibrobust.metrics.perturbation_norms`.

Implementations are batched across samples; a sample that has finished
(attack succeeded and its best iterate stopped improving) is frozen while the
rest of the batch continues, so per-sample outcomes do not depend on how
samples are grouped into batches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import (
    JacobianTooLarge,
    NoSaliencyCandidates,
    NonFinite,
    NonFiniteGradient,
)
from .metrics import perturbation_norms
from .nn import Model, kl_std_normal
from .objectives import ce_loss

JACOBIAN_FEATURE_LIMIT = 4096


@dataclass(frozen=True)
class AttackConfig:
    """Hyperparameters for one attack run (defaults are the audited values)."""

    kind: str
    epsilon: float = 8.0 / 255.0  # fgsm step
    alpha: float = 1.0  # cw distance weight
    beta_w: float = 10.0  # cw misclassification weight
    c: float = 10.0  # ead loss weight
    beta_l1: float = 5e-2  # ead sparsity weight
    theta: float = 1.0  # jsma per-pixel step, in [-1, 1]
    gamma: float = 0.25  # jsma touched-pixel budget (fraction)
    lambda_reg: float = 0.1  # tabacof perturbation weight
    max_iters: int = 200
    lr: float = 5e-3  # step size for the iterative attacks
    targeted: int | None = None  # fixed target class; None = per-sample policy
    seed: int = 0
    grace: int = 10  # extra iterations after the last best-iterate improvement

    KINDS = ("fgsm", "cw", "ead", "jsma", "jsma1px", "tabacof")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not -1.0 <= self.theta <= 1.0:
            raise ValueError("theta must be in [-1, 1]")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        for name in ("epsilon", "alpha", "beta_w", "c", "beta_l1", "lambda_reg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class AdvResult:
    x_adv: np.ndarray
    success: bool
    pred_before: int
    pred_after: int
    l0_frac: float
    l2: float
    linf: float
    iterations_used: int
    target: int = -1  # attack target class; -1 for untargeted


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (C,H,W) or (N,C,H,W) input, got {x.shape}")


def _results(model: Model, x0: np.ndarray, x_adv: np.ndarray, success: np.ndarray,
             pred_before: np.ndarray, iters: np.ndarray,
             targets=None) -> list[AdvResult]:
    pred_after = model.predict(x_adv)
    out = []
    for i in range(len(x0)):
        norms = perturbation_norms(x0[i], x_adv[i])
        out.append(AdvResult(
            x_adv=x_adv[i],
            success=bool(success[i]),
            pred_before=int(pred_before[i]),
            pred_after=int(pred_after[i]),
            l0_frac=norms.l0_frac,
            l2=norms.l2,
            linf=norms.linf,
            iterations_used=int(iters[i]),
            target=-1 if targets is None else int(np.atleast_1d(targets)[i]),
        ))
    return out


def _input_gradient(model: Model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    tape = T.Tape(model.dtype)
    xt = tape.leaf(x)
    out = model.forward(tape, xt)
    loss = ce_loss(out.logits, y)
    try:
        grads = T.backward(loss, wrt=[xt])
    except NonFinite as e:
        raise NonFiniteGradient(str(e)) from e
    g = xt.grad
    if not np.isfinite(g).all():
        raise NonFiniteGradient("input gradient contains NaN/Inf")
    return g


def next_likely_targets(model: Model, x: np.ndarray) -> np.ndarray:
    """Second-most-likely class of the clean prediction (the targeting policy)."""
    logits = model.logits_np(x)
    order = np.argsort(logits, axis=1)
    return order[:, -2].astype(np.int64)


# ---------------------------------------------------------------------------
# FGSM
# ---------------------------------------------------------------------------


def fgsm(model: Model, x: np.ndarray, y, epsilon: float) -> AdvResult | list[AdvResult]:
    """Single-step untargeted gradient-sign attack: one gradient per sample."""
    xb, single = _as_batch(x)
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    pred_before = model.predict(xb)
    g = _input_gradient(model, xb, yb)
    x_adv = np.clip(xb + np.float32(epsilon) * np.sign(g), 0.0, 1.0)
    pred_after = model.predict(x_adv)
    success = pred_after != yb
    res = _results(model, xb, x_adv, success, pred_before, np.ones(len(xb)))
    return res[0] if single else res


# ---------------------------------------------------------------------------
# shared machinery for the iterative attacks
# ---------------------------------------------------------------------------


class _AdamState:
    def __init__(self, shape, dtype, lr):
        self.m = np.zeros(shape, dtype=np.float64)
        self.v = np.zeros(shape, dtype=np.float64)
        self.t = np.zeros(shape[0], dtype=np.int64)  # per-sample step count
        self.lr = lr

    def step(self, var: np.ndarray, grad: np.ndarray, active: np.ndarray) -> np.ndarray:
        self.t[active] += 1
        self.m[active] = 0.9 * self.m[active] + 0.1 * grad[active]
        self.v[active] = 0.999 * self.v[active] + 0.001 * (grad[active] ** 2)
        t = self.t[active].reshape((-1,) + (1,) * (var.ndim - 1))
        mhat = self.m[active] / (1 - 0.9**t)
        vhat = self.v[active] / (1 - 0.999**t)
        var = var.copy()
        var[active] = var[active] - self.lr * mhat / (np.sqrt(vhat) + 1e-8)
        return var


def _margin_loss(logits: T.Tensor, target_onehot: np.ndarray) -> T.Tensor:
    """max(max_{j != t} z_j - z_t, 0) per sample (kappa = 0)."""
    tape = logits.tape
    oh = tape.constant(target_onehot.astype(logits.dtype))
    z_t = T.sum_(T.mul(logits, oh), axis=1)
    masked = T.sub(logits, T.mul(oh, 1e9))
    z_other = T.max_(masked, axis=1)
    return T.relu(T.sub(z_other, z_t))


def _batch_forward_logits(model, tape, xt):
    try:
        return model.forward(tape, xt).logits
    except NonFinite as e:
        raise NonFiniteGradient(str(e)) from e


def cw(model: Model, x: np.ndarray, target, alpha: float = 1.0, beta_w: float = 10.0,
       max_iters: int = 200, lr: float = 5e-3, grace: int = 10) -> AdvResult | list[AdvResult]:
    """Targeted C&W-style attack: minimize alpha*L2 + beta_w*margin by plain
    gradient descent on a tanh-reparameterized variable (box constraint by
    construction); returns the lowest-L2 successful iterate, best-effort when
    never successful."""
    xb, single = _as_batch(x)
    tb = np.atleast_1d(np.asarray(target, dtype=np.int64))
    n = len(xb)
    k = model.num_classes
    pred_before = model.predict(xb)
    onehot = np.zeros((n, k), dtype=np.float64)
    onehot[np.arange(n), tb] = 1.0

    x64 = np.clip(xb.astype(np.float64), 1e-6, 1.0 - 1e-6)
    u = np.arctanh(x64 * 2.0 - 1.0)

    best_x = xb.copy()
    best_l2 = np.full(n, np.inf)
    success = np.zeros(n, dtype=bool)
    iters_used = np.zeros(n, dtype=np.int64)
    last_improve = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)

    for it in range(max_iters + 1):
        tape = T.Tape(model.dtype)
        ut = tape.leaf(u.astype(model.dtype))
        x_adv_t = T.mul(T.add(T.tanh(ut), 1.0), 0.5)
        logits = _batch_forward_logits(model, tape, x_adv_t)
        d = T.sub(x_adv_t, tape.constant(xb))
        l2 = T.sqrt(T.add(T.sum_(T.square(d), axis=(1, 2, 3)), 1e-12))
        margin = _margin_loss(logits, onehot)
        obj = T.add(T.mul(l2, alpha), T.mul(margin, beta_w))
        loss = T.sum_(obj)

        x_now = x_adv_t.data
        l2_now = l2.data.astype(np.float64)
        hit = logits.data.argmax(axis=1) == tb
        improved = hit & (l2_now < best_l2) & active
        if improved.any():
            best_x[improved] = x_now[improved]
            best_l2[improved] = l2_now[improved]
            success[improved] = True
            last_improve[improved] = it
        iters_used[active] = it
        active &= ~(success & (it - last_improve >= grace))
        if not active.any() or it == max_iters:
            break

        try:
            grads = T.backward(loss, wrt=[ut])
        except NonFinite as e:
            raise NonFiniteGradient(str(e)) from e
        mask = active.reshape((-1,) + (1,) * (u.ndim - 1))
        u = u - lr * np.where(mask, ut.grad.astype(np.float64), 0.0)

    x_final = np.where(success.reshape((-1,) + (1,) * 3), best_x, x_now)
    x_final = np.clip(x_final, 0.0, 1.0).astype(xb.dtype)
    res = _results(model, xb, x_final, success, pred_before, iters_used, targets=tb)
    return res[0] if single else res


def ead(model: Model, x: np.ndarray, target, c: float = 10.0, beta_l1: float = 5e-2,
        max_iters: int = 200, lr: float = 5e-3, grace: int = 10) -> AdvResult | list[AdvResult]:
    """Elastic-net attack via iterative shrinkage-thresholding; returns the
    lowest-L1 successful iterate (best-effort when never successful)."""
    xb, single = _as_batch(x)
    tb = np.atleast_1d(np.asarray(target, dtype=np.int64))
    n = len(xb)
    k = model.num_classes
    pred_before = model.predict(xb)
    onehot = np.zeros((n, k), dtype=np.float64)
    onehot[np.arange(n), tb] = 1.0

    x0 = xb.astype(np.float64)
    x_cur = x0.copy()
    thresh = lr * beta_l1

    best_x = xb.copy()
    best_l1 = np.full(n, np.inf)
    success = np.zeros(n, dtype=bool)
    iters_used = np.zeros(n, dtype=np.int64)
    last_improve = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)

    for it in range(max_iters + 1):
        tape = T.Tape(model.dtype)
        xt = tape.leaf(x_cur.astype(model.dtype))
        logits = _batch_forward_logits(model, tape, xt)
        d = T.sub(xt, tape.constant(xb))
        l2sq = T.sum_(T.square(d), axis=(1, 2, 3))
        margin = _margin_loss(logits, onehot)
        loss = T.sum_(T.add(T.mul(margin, c), l2sq))

        diff = x_cur - x0
        l1_now = np.abs(diff).sum(axis=(1, 2, 3))
        hit = logits.data.argmax(axis=1) == tb
        improved = hit & (l1_now < best_l1) & active
        if improved.any():
            best_x[improved] = x_cur[improved].astype(xb.dtype)
            best_l1[improved] = l1_now[improved]
            success[improved] = True
            last_improve[improved] = it
        iters_used[active] = it
        active &= ~(success & (it - last_improve >= grace))
        if not active.any() or it == max_iters:
            break

        try:
            T.backward(loss, wrt=[xt])
        except NonFinite as e:
            raise NonFiniteGradient(str(e)) from e
        g = xt.grad.astype(np.float64)
        y_step = x_cur - lr * g
        # soft-threshold toward the original image, then box-project
        dd = y_step - x0
        dd = np.sign(dd) * np.maximum(np.abs(dd) - thresh, 0.0)
        x_new = np.clip(x0 + dd, 0.0, 1.0)
        x_cur = np.where(active.reshape((-1,) + (1,) * 3), x_new, x_cur)

    x_final = np.where(success.reshape((-1,) + (1,) * 3), best_x.astype(np.float64), x_cur)
    x_final = np.clip(x_final, 0.0, 1.0).astype(xb.dtype)
    res = _results(model, xb, x_final, success, pred_before, iters_used, targets=tb)
    return res[0] if single else res


# ---------------------------------------------------------------------------
# saliency attacks
# ---------------------------------------------------------------------------


def _saliency_scores(grad_target: np.ndarray, grad_other: np.ndarray,
                     x: np.ndarray, theta: float) -> np.ndarray:
    """Spec saliency rule on per-pixel channel-summed logit gradients.

    Zero where the target gradient opposes the step, where the combined
    other-class gradient points up, or where the pixel cannot move further.
    """
    a = grad_target.sum(axis=1).reshape(len(x), -1)  # (N, H*W)
    b = grad_other.sum(axis=1).reshape(len(x), -1)
    if theta >= 0:
        movable = (x < 1.0).any(axis=1).reshape(len(x), -1)
    else:
        movable = (x > 0.0).any(axis=1).reshape(len(x), -1)
        a, b = -a, -b  # stepping down flips the desired gradient signs
    scores = a * np.abs(b)
    scores[(a < 0) | (b > 0) | ~movable] = 0.0
    return scores


def _apply_pixel_steps(x: np.ndarray, pixel_idx: np.ndarray, theta: float,
                       rows: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    out = x.copy()
    py, px = np.divmod(pixel_idx, w)
    out[rows, :, py, px] = np.clip(out[rows, :, py, px] + theta, 0.0, 1.0)
    return out


def jacobian(model: Model, x: np.ndarray) -> np.ndarray:
    """Full class-score Jacobian d logits / d x for a batch: (N, K, C, H, W)."""
    xb, _ = _as_batch(x)
    n = len(xb)
    k = model.num_classes
    tape = T.Tape(model.dtype)
    xt = tape.leaf(xb)
    logits = _batch_forward_logits(model, tape, xt)
    rows = []
    for cls in range(k):
        score = T.sum_(T.slice_(logits, (slice(None), slice(cls, cls + 1))))
        grads = T.backward(score)
        rows.append(T.grad_of(grads, xt).copy())
    return np.stack(rows, axis=1)


def jsma(model: Model, x: np.ndarray, target: int, theta: float = 1.0,
         gamma: float = 0.25) -> AdvResult:
    """Full-Jacobian saliency attack on one sample.

    Guarded to small inputs; larger ones should use :func:`jsma_one_pixel`.
    Raises :class:`NoSaliencyCandidates` when every pixel scores zero.
    """
    xb, _ = _as_batch(x)
    if xb.shape[0] != 1:
        raise ValueError("jsma operates on a single sample")
    features = int(np.prod(xb.shape[1:]))
    if features > JACOBIAN_FEATURE_LIMIT:
        raise JacobianTooLarge(
            f"{features} features > {JACOBIAN_FEATURE_LIMIT}; use jsma_one_pixel"
        )
    pred_before = model.predict(xb)
    pixels = xb.shape[2] * xb.shape[3]
    budget = max(1, int(gamma * pixels))
    touched: set[int] = set()
    x_cur = xb.copy()
    it = 0
    while True:
        pred = model.predict(x_cur)[0]
        if pred == target or len(touched) >= budget:
            break
        jac = jacobian(model, x_cur)[0]  # (K, C, H, W)
        grad_t = jac[target][None]
        grad_o = (jac.sum(axis=0) - jac[target])[None]
        scores = _saliency_scores(grad_t, grad_o, x_cur, theta)[0]
        if not (scores > 0).any():
            raise NoSaliencyCandidates("saliency map is all-zero")
        pick = int(scores.argmax())
        x_cur = _apply_pixel_steps(x_cur, np.array([pick]), theta, np.array([0]))
        touched.add(pick)
        it += 1
    success = np.array([model.predict(x_cur)[0] == target])
    return _results(model, xb, x_cur, success, pred_before, np.array([it]),
                    targets=np.array([target]))[0]


def jsma_pick_pixel(model: Model, x: np.ndarray, target, theta: float = 1.0) -> np.ndarray:
    """One-pixel-per-iteration selection: two backward passes for the batch.

    Returns the flat pixel index per sample (-1 where no candidate exists).
    """
    xb, _ = _as_batch(x)
    tb = np.atleast_1d(np.asarray(target, dtype=np.int64))
    n = len(xb)
    k = model.num_classes
    onehot = np.zeros((n, k), dtype=np.float64)
    onehot[np.arange(n), tb] = 1.0
    tape = T.Tape(model.dtype)
    xt = tape.leaf(xb)
    logits = _batch_forward_logits(model, tape, xt)
    oh = tape.constant(onehot.astype(model.dtype))
    s_target = T.sum_(T.mul(logits, oh))
    s_other = T.sum_(T.mul(logits, T.sub(1.0, oh)))
    try:
        g_t = T.grad_of(T.backward(s_target), xt)
        g_o = T.grad_of(T.backward(s_other), xt)
    except NonFinite as e:
        raise NonFiniteGradient(str(e)) from e
    scores = _saliency_scores(g_t, g_o, xb, theta)
    picks = scores.argmax(axis=1)
    picks[~(scores > 0).any(axis=1)] = -1
    return picks


def jsma_one_pixel(model: Model, x: np.ndarray, target, theta: float = 1.0,
                   max_iters: int = 200) -> AdvResult | list[AdvResult]:
    """Saliency attack that touches exactly one pixel per iteration.

    Uses two input-gradient passes per iteration instead of the full
    Jacobian; the pixel choice matches :func:`jsma` on inputs where both
    run. A sample with an all-zero saliency map raises
    :class:`NoSaliencyCandidates` when it is the only one being attacked;
    inside a batch it is marked failed and frozen.
    """
    xb, single = _as_batch(x)
    tb = np.atleast_1d(np.asarray(target, dtype=np.int64))
    n = len(xb)
    pred_before = model.predict(xb)
    x_cur = xb.copy()
    success = np.zeros(n, dtype=bool)
    exhausted = np.zeros(n, dtype=bool)
    iters_used = np.zeros(n, dtype=np.int64)
    for it in range(max_iters):
        pred = model.predict(x_cur)
        success = pred == tb
        active = ~success & ~exhausted
        if not active.any():
            break
        idx = np.flatnonzero(active)
        picks = jsma_pick_pixel(model, x_cur[idx], tb[idx], theta)
        none = picks < 0
        if none.any():
            if single:
                raise NoSaliencyCandidates("saliency map is all-zero")
            exhausted[idx[none]] = True
            idx = idx[~none]
            picks = picks[~none]
        if idx.size:
            x_cur = _apply_pixel_steps(x_cur, picks, theta, idx)
            iters_used[idx] = it + 1
    success = model.predict(x_cur) == tb
    res = _results(model, xb, x_cur, success, pred_before, iters_used, targets=tb)
    return res[0] if single else res


# ---------------------------------------------------------------------------
# latent-targeting attack on the generative codec
# ---------------------------------------------------------------------------


class LatentSystem:
    """Encoder view of a classifier system for latent-targeting attacks.

    base: deterministic penultimate representation; dvib: Gaussian posterior
    (mu, sigma); svbi: deterministic codec latent. The downstream prediction
    is always the full system's own eval-mode forward.
    """

    def __init__(self, model: Model):
        self.model = model

    def encode(self, tape: T.Tape, xt: T.Tensor):
        model = self.model
        p = model._getter(tape, None)
        if model.spec.objective == "svbi":
            return model.codec_encode(tape, xt), None
        from .nn import _apply_layer, _run_layers

        h = _run_layers(model.trunk, xt, p)
        h = _apply_layer(("flatten",), h, p)
        h = T.relu(T.add(T.matmul(h, p("fc1.w")), p("fc1.b")))
        if model.spec.objective == "base":
            return h, None
        mu = T.add(T.matmul(h, p("mu.w")), p("mu.b"))
        sigma = T.add(T.softplus(T.add(T.matmul(h, p("sigma.w")), p("sigma.b"))), 1e-6)
        return mu, sigma

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.model.predict(x)


def _gaussian_kl(mu_q, sigma_q, mu_p: np.ndarray, sigma_p: np.ndarray) -> T.Tensor:
    """KL(q || p) between diagonal Gaussians; p side is constant."""
    tape = mu_q.tape
    mu_p_t = tape.constant(mu_p)
    var_p = tape.constant(sigma_p.astype(np.float64) ** 2)
    log_sigma_p = tape.constant(np.log(sigma_p.astype(np.float64)))
    term = (
        T.sub(log_sigma_p, T.log(sigma_q))
        + T.div(T.add(T.square(sigma_q), T.square(T.sub(mu_q, mu_p_t))), T.mul(var_p, 2.0))
        - 0.5
    )
    return T.sum_(term, axis=tuple(range(1, mu_q.data.ndim)))


def tabacof(system: LatentSystem, x: np.ndarray, x_target: np.ndarray,
            target_label: int, lambda_reg: float = 0.1, max_iters: int = 100,
            lr: float = 0.05) -> AdvResult | list[AdvResult]:
    """Drive the encoder's latent toward a chosen target image's latent.

    Minimizes D(enc(clip(x+d)), enc(x_target)) + lambda_reg * ||d||^2 where D
    is the Gaussian posterior KL when the encoder is stochastic and squared
    distance otherwise. Success is downstream: the system predicts the
    target image's label.
    """
    model = system.model
    xb, single = _as_batch(x)
    n = len(xb)
    pred_before = model.predict(xb)

    tape0 = T.Tape(model.dtype)
    mu_t, sigma_t = system.encode(tape0, tape0.constant(x_target[None]))
    mu_target = np.repeat(mu_t.data, n, axis=0)
    sigma_target = np.repeat(sigma_t.data, n, axis=0) if sigma_t is not None else None

    d = np.zeros_like(xb, dtype=np.float64)
    adam = _AdamState(d.shape, np.float64, lr)
    active = np.ones(n, dtype=bool)
    best_hit_x = xb.copy()
    best_hit_obj = np.full(n, np.inf)
    best_any_x = xb.copy()
    best_any_obj = np.full(n, np.inf)
    success = np.zeros(n, dtype=bool)
    iters_used = np.zeros(n, dtype=np.int64)

    for it in range(max_iters + 1):
        tape = T.Tape(model.dtype)
        dt = tape.leaf(d.astype(model.dtype))
        x0t = tape.constant(xb)
        raw = T.add(x0t, dt)
        x_adv_t = T.sub(T.relu(raw), T.relu(T.sub(raw, 1.0)))  # clip to [0, 1]
        mu_q, sigma_q = system.encode(tape, x_adv_t)
        if sigma_q is not None:
            dist = _gaussian_kl(mu_q, sigma_q, mu_target, sigma_target)
        else:
            diff = T.sub(mu_q, tape.constant(mu_target))
            dist = T.sum_(T.square(diff), axis=tuple(range(1, mu_q.data.ndim)))
        pen = T.sum_(T.square(dt), axis=(1, 2, 3))
        obj = T.add(dist, T.mul(pen, lambda_reg))
        loss = T.sum_(obj)

        x_now = np.clip(x_adv_t.data, 0.0, 1.0)
        obj_now = obj.data.astype(np.float64)
        pred_now = model.predict(x_now)
        hit = pred_now == target_label
        improved = active & hit & (obj_now < best_hit_obj)
        if improved.any():
            best_hit_x[improved] = x_now[improved]
            best_hit_obj[improved] = obj_now[improved]
            success[improved] = True
        lower = obj_now < best_any_obj
        if lower.any():
            best_any_x[lower] = x_now[lower]
            best_any_obj[lower] = obj_now[lower]
        iters_used[active] = it
        if it == max_iters:
            break
        try:
            grads = T.backward(loss, wrt=[dt])
        except NonFinite as e:
            raise NonFiniteGradient(str(e)) from e
        d = adam.step(d, dt.grad.astype(np.float64), active)

    # best target-hitting iterate; best-objective iterate as the fallback
    x_final = np.where(success.reshape((-1,) + (1,) * 3), best_hit_x, best_any_x).astype(xb.dtype)
    success_final = model.predict(x_final) == target_label
    res = _results(model, xb, x_final, success_final, pred_before, iters_used,
                   targets=np.full(n, target_label))
    return res[0] if single else res


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def run_attack(model: Model, config: AttackConfig, x: np.ndarray, y: np.ndarray,
               x_target: np.ndarray | None = None,
               target_label: int | None = None) -> list[AdvResult]:
    """Attack a batch under one config; targets follow the fixed policy
    (untargeted FGSM, next-likely class for CW/EAD/JSMA)."""
    xb, _ = _as_batch(x)
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if config.kind == "fgsm":
        return fgsm(model, xb, yb, config.epsilon)
    if config.kind == "tabacof":
        system = LatentSystem(model)
        return tabacof(system, xb, x_target, target_label,
                       lambda_reg=config.lambda_reg, max_iters=config.max_iters,
                       lr=max(config.lr, 0.02))
    if config.targeted is not None:
        targets = np.full(len(xb), config.targeted, dtype=np.int64)
    else:
        targets = next_likely_targets(model, xb)
    if config.kind == "cw":
        return cw(model, xb, targets, alpha=config.alpha, beta_w=config.beta_w,
                  max_iters=config.max_iters, lr=config.lr, grace=config.grace)
    if config.kind == "ead":
        return ead(model, xb, targets, c=config.c, beta_l1=config.beta_l1,
                   max_iters=config.max_iters, lr=config.lr, grace=config.grace)
    if config.kind == "jsma":
        out = []
        for i in range(len(xb)):
            try:
                out.append(jsma(model, xb[i], int(targets[i]), config.theta, config.gamma))
            except NoSaliencyCandidates:
                out.append(_results(model, xb[i : i + 1], xb[i : i + 1].copy(),
                                    np.array([False]), model.predict(xb[i : i + 1]),
                                    np.array([0]), targets=targets[i : i + 1])[0])
        return out
    if config.kind == "jsma1px":
        res = jsma_one_pixel(model, xb, targets, config.theta, config.max_iters)
        return res if isinstance(res, list) else [res]
    raise ValueError(f"unhandled attack kind {config.kind!r}")
