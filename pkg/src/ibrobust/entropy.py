"""Learned factorized entropy model and the rate side of the codec.

Each latent channel gets an independent monotone CDF built from a learned
piecewise-linear spline with 8 segments over fixed knots, mapped through a
sigmoid so the support is unbounded and every integer symbol keeps nonzero
probability during training. The probability of integer symbol ``n`` is
``CDF(n + 0.5) - CDF(n - 0.5)``.

Training uses the additive-uniform-noise relaxation (rate measured on
``y + U(-0.5, 0.5)``); evaluation rounds to integers and measures the exact
model rate, which the arithmetic coder in :mod:`ibrobust.coder` achieves to
within a small constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ZeroLikelihood

KNOTS = np.linspace(-10.0, 10.0, 9)
MIN_SLOPE = 1e-3
LIKELIHOOD_FLOOR = 1e-9


class FactorizedEntropyModel:
    """Per-channel monotone spline CDF over the quantized latent.

    Parameters live in the owning model's parameter dict under
    ``{prefix}.offset`` (1, L, 1, 1) and ``{prefix}.raw_slopes``
    (8, L, 1, 1); slopes are softplus-positive.
    """

    def __init__(self, channels: int, param_prefix: str, params: dict,
                 tail_mass: float = 2.0 ** -8):
        self.channels = channels
        self.prefix = param_prefix
        self.params = params
        self.tail_mass = tail_mass

    @staticmethod
    def init_params(params: dict, prefix: str, channels: int, dtype) -> None:
        # softplus(raw) == 0.5 initial slope: smooth CDF spanning the knot range
        raw0 = float(np.log(np.expm1(0.5)))
        params[f"{prefix}.offset"] = np.zeros((1, channels, 1, 1), dtype=dtype)
        params[f"{prefix}.raw_slopes"] = np.full((8, channels, 1, 1), raw0, dtype=dtype)

    # -- differentiable (tape) path -----------------------------------------

    def _slopes_tensor(self, p) -> list[T.Tensor]:
        raw = p(f"{self.prefix}.raw_slopes")
        out = []
        for k in range(8):
            seg = T.slice_(raw, (slice(k, k + 1),))  # (1, L, 1, 1)
            out.append(T.softplus(seg) + MIN_SLOPE)
        return out

    def spline_tensor(self, x: T.Tensor, p) -> T.Tensor:
        """Monotone pre-sigmoid spline g(x), centered so g(0) == offset."""
        t = KNOTS
        seg_w = float(t[1] - t[0])
        slopes = self._slopes_tensor(p)
        # first segment extends to -inf: m0 * (min(x, t1) - t0)
        seg0 = seg_w - T.relu(float(t[1]) - x)
        g = p(f"{self.prefix}.offset") + slopes[0] * seg0
        for k in range(1, 7):
            seg = T.relu(x - float(t[k])) - T.relu(x - float(t[k + 1]))
            g = g + slopes[k] * seg
        # last segment extends to +inf
        g = g + slopes[7] * T.relu(x - float(t[7]))
        # subtract the spline mass accumulated on [t0, 0] (knots put 0 at t[4])
        s_at_zero = (slopes[0] + slopes[1] + slopes[2] + slopes[3]) * seg_w
        return g - s_at_zero

    def cdf_tensor(self, x: T.Tensor, p) -> T.Tensor:
        return T.sigmoid(self.spline_tensor(x, p))

    def likelihood_tensor(self, y: T.Tensor, p) -> T.Tensor:
        """P(symbol) at (possibly noisy) latent positions, floored away from 0."""
        hi = self.cdf_tensor(y + 0.5, p)
        lo = self.cdf_tensor(y - 0.5, p)
        raw = hi - lo
        return T.relu(raw - LIKELIHOOD_FLOOR) + LIKELIHOOD_FLOOR

    def rate_bits_tensor(self, y: T.Tensor, p) -> T.Tensor:
        """Mean per-sample total bits for a batch of (possibly noisy) latents."""
        pl = self.likelihood_tensor(y, p)
        nats = T.sum_(T.neg(T.log(pl)), axis=tuple(range(1, 4)))
        return T.mean(nats) * (1.0 / float(np.log(2.0)))

    # -- numpy twin (evaluation / coding) ------------------------------------

    def _np_params(self):
        offset = np.asarray(self.params[f"{self.prefix}.offset"], dtype=np.float64)
        raw = np.asarray(self.params[f"{self.prefix}.raw_slopes"], dtype=np.float64)
        slopes = np.log1p(np.exp(-np.abs(raw))) + np.maximum(raw, 0) + MIN_SLOPE
        return offset, slopes

    def spline_np(self, x: np.ndarray) -> np.ndarray:
        """Numpy mirror of :meth:`spline_tensor`; x is (N, L, h, w)."""
        t = KNOTS
        seg_w = t[1] - t[0]
        offset, slopes = self._np_params()
        g = offset + slopes[0] * (seg_w - np.maximum(t[1] - x, 0))
        for k in range(1, 7):
            g = g + slopes[k] * (np.maximum(x - t[k], 0) - np.maximum(x - t[k + 1], 0))
        g = g + slopes[7] * np.maximum(x - t[7], 0)
        return g - (slopes[0] + slopes[1] + slopes[2] + slopes[3]) * seg_w

    def cdf_np(self, x: np.ndarray) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.spline_np(x)))

    def likelihood_np(self, symbols: np.ndarray) -> np.ndarray:
        s = symbols.astype(np.float64)
        return self.cdf_np(s + 0.5) - self.cdf_np(s - 0.5)

    def _invert_spline(self, target_g: float, channel: int) -> float:
        """x with g(x) == target_g for one channel (piecewise-linear inverse)."""
        offset, slopes = self._np_params()
        v = float(offset[0, channel, 0, 0])
        m = slopes[:, channel, 0, 0]
        t = KNOTS
        center = float((m[0] + m[1] + m[2] + m[3]) * (t[1] - t[0]))
        gs = [v - center]  # g at t[0]: offset minus the [t0, 0] spline mass
        for k in range(8):
            gs.append(gs[-1] + m[k] * (t[k + 1] - t[k]))
        if target_g <= gs[0]:
            return float(t[0] - (gs[0] - target_g) / m[0])
        if target_g >= gs[-1]:
            return float(t[-1] + (target_g - gs[-1]) / m[7])
        for k in range(8):
            if gs[k] <= target_g <= gs[k + 1]:
                return float(t[k] + (target_g - gs[k]) / m[k])
        raise RuntimeError("unreachable: monotone spline inversion failed")

    def symbol_range(self, channel: int, extend: int = 0) -> tuple[int, int]:
        """Integer support [smin, smax] covering all but the tail mass."""
        half = self.tail_mass / 2.0
        glo = float(np.log(half / (1.0 - half)))  # logit
        ghi = -glo
        xlo = self._invert_spline(glo, channel)
        xhi = self._invert_spline(ghi, channel)
        return int(np.floor(xlo)) - extend, int(np.ceil(xhi)) + extend

    def coding_tables(self, precision: int = 16, extend: int = 8) -> list[dict]:
        """Quantized per-channel CDF tables for the arithmetic coder.

        ``extend`` widens the tail-mass support by a few symbols on each side
        so mildly drifted latents stay codable; symbols beyond the widened
        range still raise SymbolOutOfSupport at encode time.
        """
        total = 1 << precision
        tables = []
        for ch in range(self.channels):
            smin, smax = self.symbol_range(ch, extend=extend)
            sym = np.arange(smin, smax + 1, dtype=np.int64)
            # evaluate this channel's pmf by placing values on channel ch
            full = np.zeros((1, self.channels, 1, sym.size))
            full[0, ch, 0, :] = sym
            pmf = self.likelihood_np(full)[0, ch, 0, :]
            pmf = np.maximum(pmf, 1e-12)
            counts = np.round(pmf / pmf.sum() * (total - sym.size)).astype(np.int64) + 1
            drift = total - int(counts.sum())
            counts[int(np.argmax(counts))] += drift
            if counts.min() < 1:
                raise ZeroLikelihood("entropy table quantization produced empty bucket")
            cdf = np.zeros(sym.size + 1, dtype=np.int64)
            np.cumsum(counts, out=cdf[1:])
            tables.append({"smin": smin, "smax": smax, "cdf": cdf, "precision": precision})
        return tables


@dataclass
class LatentCode:
    """Quantized bottleneck output with its model rate.

    ``rate_bits`` is the total model information of this code; ``bpp`` divides
    by the source image pixel count (H*W). In train mode ``symbols`` is None
    (the latent carries additive uniform noise instead of rounding) and
    ``rate_tensor`` holds the differentiable rate for the loss.
    """

    symbols: np.ndarray | None
    likelihoods: np.ndarray
    rate_bits: float
    bpp: float
    pixel_count: int
    entropy_model: FactorizedEntropyModel | None = None
    rate_tensor: T.Tensor | None = None  # differentiable rate (train mode)
    noisy: T.Tensor | None = None  # noise-relaxed latent (train mode)


def quantize_and_rate(latent, entropy_model: FactorizedEntropyModel, mode: str,
                      pixel_count: int, rng: np.random.Generator | None = None,
                      param_tensors: dict | None = None) -> LatentCode:
    """Quantize a latent and measure its rate under the entropy model.

    ``mode='train'`` adds uniform noise in [-0.5, 0.5) (differentiable rate
    proxy; ``latent`` must be a tape Tensor); ``mode='eval'`` rounds to the
    nearest integer and reports the exact model rate. The latent layout is
    (L, h, w) or a batch (N, L, h, w); rates are per sample (averaged over
    the batch in train mode). During codec training pass ``param_tensors``
    with the entropy parameters registered as tape leaves so the rate term
    also trains the spline.
    """
    if mode == "train":
        if not isinstance(latent, T.Tensor) or latent.tape is None:
            raise TypeError("train-mode quantize_and_rate needs a tape Tensor latent")
        if rng is None:
            raise ValueError("train-mode quantize_and_rate needs an rng")
        x = latent if latent.data.ndim == 4 else T.reshape(latent, (1,) + latent.shape)
        tape = latent.tape
        noise = tape.constant(rng.uniform(-0.5, 0.5, size=x.shape).astype(tape.dtype))
        noisy = T.add(x, noise)
        getter = _const_getter(tape, entropy_model.params, param_tensors)
        pl = entropy_model.likelihood_tensor(noisy, getter)
        nats = T.sum_(T.neg(T.log(pl)), axis=(1, 2, 3))
        rate = T.mean(nats) * (1.0 / float(np.log(2.0)))
        rate_val = float(rate.data)
        return LatentCode(
            symbols=None,
            likelihoods=pl.data,
            rate_bits=rate_val,
            bpp=rate_val / pixel_count,
            pixel_count=pixel_count,
            entropy_model=entropy_model,
            rate_tensor=rate,
            noisy=noisy,
        )
    if mode != "eval":
        raise ValueError(f"unknown mode {mode!r}")

    arr = latent.data if isinstance(latent, T.Tensor) else np.asarray(latent)
    squeeze = arr.ndim == 3
    if squeeze:
        arr = arr[None]
    if arr.shape[0] != 1:
        raise ValueError("eval-mode quantize_and_rate expects one sample at a time")
    symbols = np.round(arr).astype(np.int64)
    lik = entropy_model.likelihood_np(symbols)
    if np.any(lik <= 0):
        raise ZeroLikelihood("a symbol fell outside the modeled support")
    rate_bits = float(-np.log2(lik).sum())
    symbols_out = symbols[0] if squeeze else symbols
    lik_out = lik[0] if squeeze else lik
    return LatentCode(
        symbols=symbols_out.astype(np.int32),
        likelihoods=lik_out,
        rate_bits=rate_bits,
        bpp=rate_bits / pixel_count,
        pixel_count=pixel_count,
        entropy_model=entropy_model,
    )


def sample_symbols(entropy_model, shape: tuple[int, int],
                   rng: np.random.Generator) -> np.ndarray:
    """Draw (channels, h, w)-shaped symbols from the model's coded pmf."""
    h, w = shape
    tables = entropy_model.coding_tables()
    out = np.empty((entropy_model.channels, h, w), dtype=np.int32)
    for ch, tab in enumerate(tables):
        cdf = tab["cdf"]
        total = int(cdf[-1])
        draws = rng.integers(0, total, size=h * w)
        idx = np.searchsorted(cdf, draws, side="right") - 1
        out[ch] = (idx + tab["smin"]).reshape(h, w)
    return out


def _const_getter(tape: T.Tape, params: dict, param_tensors: dict | None = None):
    cache: dict[str, T.Tensor] = {}

    def get(name: str) -> T.Tensor:
        if param_tensors is not None and name in param_tensors:
            return param_tensors[name]
        if name not in cache:
            cache[name] = tape.constant(params[name])
        return cache[name]

    return get
