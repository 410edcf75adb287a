"""Residual classifiers in three depth tiers with three training objectives.

Tiers D1/D2/D3 are 8/14/20 residual blocks, desk-scale stand-ins for deep
backbones. Objectives:

  * ``base``: plain log-loss classifier;
  * ``dvib``: a Gaussian bottleneck before the final linear layer
    (classifier samples ``z = mu + sigma * eps`` during training, uses the
    posterior mean at evaluation);
  * ``svbi``: the shallow head of a trained base backbone replaced by a
    small variational codec (encoder, quantizer with a learned entropy
    model, decoder); the deep tail of the teacher is kept frozen.

Models are plain parameter dictionaries plus a layer program, so a forward
pass can run with parameters either as tape leaves (training) or constants
(inference and attacks).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .entropy import FactorizedEntropyModel
from .errors import NonPositiveSigma, ShapeMismatch, UnsupportedShape

TIER_BLOCKS = {"D1": (2, 3, 3), "D2": (4, 5, 5), "D3": (6, 7, 7)}
OBJECTIVES = ("base", "svbi", "dvib")

_SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description: depth tier, bottleneck placement, objective."""

    tier: str
    input_shape: tuple[int, int, int]  # (channels, height, width)
    num_classes: int
    objective: str = "base"
    beta: float = 0.0
    latent_channels: int = 0  # 0 selects the per-objective default

    def __post_init__(self):
        if self.tier not in TIER_BLOCKS:
            raise UnsupportedShape(f"unknown tier {self.tier!r}")
        if self.objective not in OBJECTIVES:
            raise UnsupportedShape(f"unknown objective {self.objective!r}")
        c, h, w = self.input_shape
        if c < 1 or h < 12 or w < 12 or h % 4 or w % 4:
            raise UnsupportedShape(
                f"input shape {self.input_shape} unsupported; need H, W >= 12 and divisible by 4"
            )
        if self.beta < 0:
            raise UnsupportedShape("beta must be nonnegative")

    def resolved_latent(self) -> int:
        if self.latent_channels > 0:
            return self.latent_channels
        return {"base": 0, "dvib": 32, "svbi": 6}[self.objective]

    def to_dict(self) -> dict:
        return {
            "tier": self.tier,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "objective": self.objective,
            "beta": self.beta,
            "latent_channels": self.latent_channels,
        }

    @staticmethod
    def from_dict(d: dict) -> "NetworkSpec":
        return NetworkSpec(
            tier=d["tier"],
            input_shape=tuple(d["input_shape"]),
            num_classes=int(d["num_classes"]),
            objective=d["objective"],
            beta=float(d["beta"]),
            latent_channels=int(d["latent_channels"]),
        )


def _base_width(in_channels: int) -> int:
    return 8 if in_channels == 1 else 12


def _fc_hidden(in_channels: int) -> int:
    return 320 if in_channels == 1 else 256


# ---------------------------------------------------------------------------
# bottleneck building blocks
# ---------------------------------------------------------------------------


@dataclass
class GaussianBottleneck:
    """Diagonal Gaussian posterior with a standard normal prior."""

    mu: T.Tensor
    sigma: T.Tensor

    def sample(self, noise) -> T.Tensor:
        return reparam_sample(self.mu, self.sigma, noise)


def reparam_sample(mu: T.Tensor, sigma: T.Tensor, noise) -> T.Tensor:
    """z = mu + sigma * noise, differentiable in mu and sigma."""
    noise_arr = noise.data if isinstance(noise, T.Tensor) else np.asarray(noise)
    if mu.shape != sigma.shape or noise_arr.shape != mu.shape:
        raise ShapeMismatch(
            f"reparam_sample: shapes differ mu={mu.shape} sigma={sigma.shape} noise={noise_arr.shape}"
        )
    if np.any(sigma.data <= 0):
        raise NonPositiveSigma("sigma must be positive")
    return T.add(mu, T.mul(sigma, noise))


def kl_std_normal(mu: T.Tensor, sigma: T.Tensor) -> T.Tensor:
    """KL(N(mu, sigma) || N(0, 1)) in nats, summed over latent dims and
    averaged over the batch (first axis)."""
    if mu.shape != sigma.shape:
        raise ShapeMismatch("kl_std_normal: mu and sigma shapes differ")
    if np.any(sigma.data <= 0):
        raise NonPositiveSigma("sigma must be positive")
    per_dim = (T.square(mu) + T.square(sigma) - 1.0 - T.log(T.square(sigma))) * 0.5
    if mu.data.ndim == 1:
        return T.sum_(per_dim)
    summed = T.sum_(per_dim, axis=tuple(range(1, mu.data.ndim)))
    return T.mean(summed)


# ---------------------------------------------------------------------------
# layer program
# ---------------------------------------------------------------------------
# Each layer is a tuple: ("conv", name, stride, pad) / ("convT", name, stride,
# pad) / ("relu",) / ("pool",) / ("block", name, stride) / ("flatten",) /
# ("linear", name). Parameter names derive from the layer name.


def _apply_layer(layer, x: T.Tensor, p: Callable[[str], T.Tensor]) -> T.Tensor:
    kind = layer[0]
    if kind == "conv":
        _, name, stride, pad = layer
        out = T.conv2d(x, p(f"{name}.w"), stride=stride, padding=pad)
        return T.add(out, p(f"{name}.b"))
    if kind == "convT":
        _, name, stride, pad = layer
        out = T.conv2d_transpose(x, p(f"{name}.w"), stride=stride, padding=pad)
        return T.add(out, p(f"{name}.b"))
    if kind == "relu":
        return T.relu(x)
    if kind == "pool":
        return T.max_pool2d(x)
    if kind == "flatten":
        n = x.shape[0]
        return T.reshape(x, (n, int(np.prod(x.shape[1:]))))
    if kind == "linear":
        _, name = layer
        return T.add(T.matmul(x, p(f"{name}.w")), p(f"{name}.b"))
    if kind == "crop":
        _, h, w = layer
        if x.shape[2] == h and x.shape[3] == w:
            return x
        return T.slice_(x, (slice(None), slice(None), slice(0, h), slice(0, w)))
    if kind == "block":
        _, name, stride = layer
        h = T.add(T.conv2d(x, p(f"{name}.conv1.w"), stride=stride, padding=1), p(f"{name}.conv1.b"))
        h = T.relu(h)
        h = T.add(T.conv2d(h, p(f"{name}.conv2.w"), stride=1, padding=1), p(f"{name}.conv2.b"))
        try:
            skip_w = p(f"{name}.skip.w")
        except KeyError:
            skip = x
        else:
            skip = T.add(T.conv2d(x, skip_w, stride=stride, padding=0), p(f"{name}.skip.b"))
        return T.relu(T.add(h, skip))
    raise ValueError(f"unknown layer kind {kind!r}")


def _run_layers(layers, x: T.Tensor, p) -> T.Tensor:
    for layer in layers:
        x = _apply_layer(layer, x, p)
    return x


class _Init:
    """He fan-in initialiser drawing from one deterministic stream."""

    def __init__(self, seed: int, dtype):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}

    def conv(self, name, c_in, c_out, k, zero=False):
        fan_in = c_in * k * k
        scale = 0.0 if zero else math.sqrt(2.0 / fan_in)
        self.params[f"{name}.w"] = (self.rng.standard_normal((c_out, c_in, k, k)) * scale).astype(self.dtype)
        self.params[f"{name}.b"] = np.zeros(c_out, dtype=self.dtype).reshape(1, c_out, 1, 1)

    def convT(self, name, c_in, c_out, k):
        fan_in = c_in * k * k
        scale = math.sqrt(2.0 / fan_in)
        self.params[f"{name}.w"] = (self.rng.standard_normal((c_in, c_out, k, k)) * scale).astype(self.dtype)
        self.params[f"{name}.b"] = np.zeros(c_out, dtype=self.dtype).reshape(1, c_out, 1, 1)

    def linear(self, name, n_in, n_out, scale_mul=1.0, bias=0.0):
        scale = math.sqrt(2.0 / n_in) * scale_mul
        self.params[f"{name}.w"] = (self.rng.standard_normal((n_in, n_out)) * scale).astype(self.dtype)
        self.params[f"{name}.b"] = np.full((n_out,), bias, dtype=self.dtype)


def _backbone_layers(spec: NetworkSpec) -> tuple[list, list[tuple], int]:
    """Layer program for the convolutional trunk plus (name, meta) for init.

    Returns (layers, inits, head_len) where ``head_len`` is the layer count of
    the shallow head: stem + first residual group (the SVBI replacement target).
    """
    c, h, w = spec.input_shape
    w0 = _base_width(c)
    widths = (w0, 2 * w0, 4 * w0)
    blocks = TIER_BLOCKS[spec.tier]
    layers: list = [("conv", "stem", 1, 1), ("relu",), ("pool",)]
    inits: list[tuple] = [("conv", "stem", c, w0, 3, False)]
    ch = w0
    for stage, (width, nblocks) in enumerate(zip(widths, blocks)):
        for b in range(nblocks):
            stride = 2 if (stage > 0 and b == 0) else 1
            name = f"s{stage + 1}b{b}"
            layers.append(("block", name, stride))
            inits.append(("conv", f"{name}.conv1", ch, width, 3, False))
            # zero-init of the residual branch output keeps deep stacks
            # trainable without normalisation layers
            inits.append(("conv", f"{name}.conv2", width, width, 3, True))
            if stride != 1 or ch != width:
                inits.append(("conv", f"{name}.skip", ch, width, 1, False))
            ch = width
        if stage == 0:
            head_len = len(layers)
    return layers, inits, head_len


def _spatial_after_trunk(spec: NetworkSpec) -> tuple[int, int]:
    _, h, w = spec.input_shape
    h, w = h // 2, w // 2  # stem pool
    for _ in range(2):  # stride-2 entering stages 2 and 3
        h = (h + 2 - 3) // 2 + 1
        w = (w + 2 - 3) // 2 + 1
    return h, w


@dataclass
class ForwardOut:
    """Everything a forward pass can produce; unused fields stay None."""

    logits: T.Tensor
    bottleneck: GaussianBottleneck | None = None
    latent: T.Tensor | None = None  # SVBI continuous encoder output
    latent_q: T.Tensor | None = None  # SVBI decoded-from (noisy or rounded)
    head_out: T.Tensor | None = None  # SVBI decoder output (H-tilde)


class Model:
    """A trained or trainable classifier: spec + named parameters.

    Parameters are plain numpy arrays. ``forward`` accepts an optional map of
    parameter-name -> tape Tensor so a training loop can register leaves; any
    parameter not in the map is wrapped as a tape constant (no gradient).
    Models are immutable after training and safe to share across threads.
    """

    def __init__(self, spec: NetworkSpec, params: dict[str, np.ndarray],
                 dtype=np.float32):
        self.spec = spec
        self.params = params
        self.dtype = np.dtype(dtype)
        self._build_programs()

    # -- construction -------------------------------------------------------

    def _build_programs(self):
        spec = self.spec
        self.trunk, _, self.head_len = _backbone_layers(spec)
        hs, ws = _spatial_after_trunk(spec)
        self.flat_dim = 4 * _base_width(spec.input_shape[0]) * hs * ws
        self.fc_hidden = _fc_hidden(spec.input_shape[0])
        self.enc_layers = self.dec_layers = self.tail_layers = None
        if spec.objective == "svbi":
            self.entropy_model = FactorizedEntropyModel(
                channels=spec.resolved_latent(), param_prefix="entropy", params=self.params
            )
            self.enc_layers, _, self.dec_layers, _ = _codec_programs(spec)
            self.tail_layers = self.trunk[self.head_len :]
        else:
            self.entropy_model = None

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def param_count(self, prefix: str = "") -> int:
        return int(sum(v.size for k, v in self.params.items() if k.startswith(prefix)))

    def clone_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    # -- forward ------------------------------------------------------------

    def _getter(self, tape: T.Tape, param_tensors: dict[str, T.Tensor] | None):
        cache: dict[str, T.Tensor] = {}

        def get(name: str) -> T.Tensor:
            if param_tensors is not None and name in param_tensors:
                return param_tensors[name]
            if name not in cache:
                if name not in self.params:
                    raise KeyError(name)
                cache[name] = tape.constant(self.params[name])
            return cache[name]

        return get

    def forward(self, tape: T.Tape, x: T.Tensor, param_tensors=None,
                train: bool = False, rng: np.random.Generator | None = None,
                quantize: str = "round") -> ForwardOut:
        """Run the network. ``quantize`` applies to SVBI only:
        'round' (eval; straight-through gradients), 'noise' (training relax),
        'none' (continuous latent)."""
        p = self._getter(tape, param_tensors)
        spec = self.spec
        if x.shape[1:] != spec.input_shape:
            raise ShapeMismatch(f"input {x.shape[1:]} != spec {spec.input_shape}")
        if spec.objective == "svbi":
            return self._forward_svbi(tape, x, p, train, rng, quantize)

        h = _run_layers(self.trunk, x, p)
        h = _apply_layer(("flatten",), h, p)
        h = T.relu(T.add(T.matmul(h, p("fc1.w")), p("fc1.b")))
        if spec.objective == "base":
            logits = T.add(T.matmul(h, p("out.w")), p("out.b"))
            return ForwardOut(logits=logits)

        # dvib: Gaussian bottleneck before the final linear layer
        mu = T.add(T.matmul(h, p("mu.w")), p("mu.b"))
        sigma = T.add(T.softplus(T.add(T.matmul(h, p("sigma.w")), p("sigma.b"))), _SIGMA_FLOOR)
        bn = GaussianBottleneck(mu=mu, sigma=sigma)
        if train:
            if rng is None:
                raise ValueError("dvib training forward needs an rng for the noise draw")
            noise = tape.constant(rng.standard_normal(mu.shape).astype(self.dtype))
            z = bn.sample(noise)
        else:
            z = mu
        logits = T.add(T.matmul(z, p("out.w")), p("out.b"))
        return ForwardOut(logits=logits, bottleneck=bn)

    def _forward_svbi(self, tape, x, p, train, rng, quantize):
        y = _run_layers(self.enc_layers, x, p)
        if quantize == "noise":
            if rng is None:
                raise ValueError("svbi noisy forward needs an rng")
            u = tape.constant(rng.uniform(-0.5, 0.5, size=y.shape).astype(self.dtype))
            yq = T.add(y, u)
        elif quantize == "round":
            yq = _round_ste(y)
        elif quantize == "none":
            yq = y
        else:
            raise ValueError(f"unknown quantize mode {quantize!r}")
        h_tilde = _run_layers(self.dec_layers, yq, p)
        logits = self._run_tail(tape, h_tilde, p)
        return ForwardOut(logits=logits, latent=y, latent_q=yq, head_out=h_tilde)

    def _run_tail(self, tape, h, p):
        t = _run_layers(self.tail_layers, h, p)
        t = _apply_layer(("flatten",), t, p)
        t = T.relu(T.add(T.matmul(t, p("fc1.w")), p("fc1.b")))
        return T.add(T.matmul(t, p("out.w")), p("out.b"))

    def codec_encode(self, tape: T.Tape, x: T.Tensor, param_tensors=None) -> T.Tensor:
        """SVBI continuous encoder output (no quantization)."""
        return _run_layers(self.enc_layers, x, self._getter(tape, param_tensors))

    def codec_decode(self, tape: T.Tape, latent: T.Tensor, param_tensors=None) -> T.Tensor:
        """SVBI decoder: latent (quantized or relaxed) to the head representation."""
        return _run_layers(self.dec_layers, latent, self._getter(tape, param_tensors))

    # -- inference helpers ---------------------------------------------------

    def logits_np(self, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """Eval-mode logits for a plain array input, batched."""
        outs = []
        for i in range(0, len(x), batch_size):
            tape = T.Tape(self.dtype)
            xt = tape.constant(x[i : i + batch_size])
            outs.append(self.forward(tape, xt).logits.data)
        return np.concatenate(outs, axis=0)

    def predict(self, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
        return self.logits_np(x, batch_size).argmax(axis=1)


def _round_ste(y: T.Tensor) -> T.Tensor:
    """Round to integers in the forward pass, identity gradient backward.

    Lets white-box attacks differentiate through the quantizer while being
    evaluated against the true quantized system.
    """
    tape = y.tape
    delta = tape.constant(np.round(y.data) - y.data)
    return T.add(y, delta)


# ---------------------------------------------------------------------------
# SplitBackbone
# ---------------------------------------------------------------------------


@dataclass
class SplitBackbone:
    """Shallow/deep partition of a model's trunk: tail(head(x)) == full(x).

    Both halves run the exact layer program of the original model, in the
    original order, so the composition is bit-identical to the unsplit
    forward.
    """

    model: Model
    split_index: int

    def head(self, tape: T.Tape, x: T.Tensor, param_tensors=None) -> T.Tensor:
        p = self.model._getter(tape, param_tensors)
        return _run_layers(self.model.trunk[: self.split_index], x, p)

    def tail(self, tape: T.Tape, h: T.Tensor, param_tensors=None) -> T.Tensor:
        p = self.model._getter(tape, param_tensors)
        t = _run_layers(self.model.trunk[self.split_index :], h, p)
        t = _apply_layer(("flatten",), t, p)
        t = T.relu(T.add(T.matmul(t, p("fc1.w")), p("fc1.b")))
        return T.add(T.matmul(t, p("out.w")), p("out.b"))


def split_backbone(model: Model, split_index: int | None = None) -> SplitBackbone:
    if model.spec.objective == "svbi":
        raise UnsupportedShape("svbi models are already split; split the teacher instead")
    idx = model.head_len if split_index is None else split_index
    if not 0 < idx <= len(model.trunk):
        raise UnsupportedShape(f"split index {idx} outside trunk of {len(model.trunk)} layers")
    return SplitBackbone(model=model, split_index=idx)


# ---------------------------------------------------------------------------
# build_model
# ---------------------------------------------------------------------------


def _codec_programs(spec: NetworkSpec):
    c, _, _ = spec.input_shape
    w0 = _base_width(c)
    latent = spec.resolved_latent()
    enc_layers = [
        ("conv", "enc0", 2, 1), ("relu",),
        ("conv", "enc1", 1, 1), ("relu",),
        ("conv", "enc2", 2, 1),
    ]
    enc_inits = [
        ("conv", "enc0", c, w0, 3, False),
        ("conv", "enc1", w0, w0, 3, False),
        ("conv", "enc2", w0, latent, 3, False),
    ]
    dw = 2 * w0
    dec_layers = [
        ("conv", "dec0", 1, 1), ("relu",),
        ("convT", "dec1", 2, 1), ("relu",),
        ("conv", "dec2", 1, 1),
    ]
    dec_inits = [
        ("conv", "dec0", latent, dw, 3, False),
        ("convT", "dec1", dw, dw, 4),
        ("conv", "dec2", dw, w0, 3, False),
    ]
    return enc_layers, enc_inits, dec_layers, dec_inits


def build_model(spec: NetworkSpec, seed: int, dtype=np.float32,
                teacher: Model | None = None) -> Model:
    """Construct a model with deterministic He-style initialisation.

    For the svbi objective a trained ``teacher`` base model of the same tier
    and input shape must be supplied; its deep tail is copied frozen into the
    new model and the codec replaces the shallow head.
    """
    init = _Init(seed, dtype)
    trunk_layers, trunk_inits, head_len = _backbone_layers(spec)

    def run_inits(entries):
        for e in entries:
            if e[0] == "conv":
                _, name, cin, cout, k, zero = e
                init.conv(name, cin, cout, k, zero=zero)
            elif e[0] == "convT":
                _, name, cin, cout, k = e
                init.convT(name, cin, cout, k)

    if spec.objective in ("base", "dvib"):
        run_inits(trunk_inits)
        hs, ws = _spatial_after_trunk(spec)
        flat_dim = 4 * _base_width(spec.input_shape[0]) * hs * ws
        hidden = _fc_hidden(spec.input_shape[0])
        init.linear("fc1", flat_dim, hidden)
        if spec.objective == "base":
            init.linear("out", hidden, spec.num_classes)
        else:
            k = spec.resolved_latent()
            init.linear("mu", hidden, k)
            # raw sigma head starts near softplus^-1(1) so sigma ~ prior scale
            init.linear("sigma", hidden, k, scale_mul=0.1, bias=math.log(math.e - 1.0))
            init.linear("out", k, spec.num_classes)
        model = Model(spec, init.params, dtype=dtype)
        return model

    # svbi
    from .errors import TeacherMissing

    if teacher is None:
        raise TeacherMissing("svbi needs a trained base teacher model")
    if teacher.spec.objective != "base":
        raise TeacherMissing("svbi teacher must be a base-objective model")
    if (teacher.spec.tier != spec.tier
            or teacher.spec.input_shape != spec.input_shape
            or teacher.spec.num_classes != spec.num_classes):
        raise TeacherMissing("svbi teacher spec does not match")

    enc_layers, enc_inits, dec_layers, dec_inits = _codec_programs(spec)
    run_inits(enc_inits)
    run_inits(dec_inits)
    FactorizedEntropyModel.init_params(init.params, "entropy", spec.resolved_latent(), dtype)
    # frozen copy of the teacher's deep layers (everything past the head)
    for name, arr in teacher.params.items():
        if _is_tail_param(name, teacher):
            init.params[name] = arr.copy()
    return Model(spec, init.params, dtype=dtype)


def _is_tail_param(name: str, teacher: Model) -> bool:
    head_names = set()
    for layer in teacher.trunk[: teacher.head_len]:
        if layer[0] in ("conv", "convT"):
            head_names.add(layer[1])
        elif layer[0] == "block":
            head_names.add(layer[1])
    root = name.split(".")[0]
    return root not in head_names
