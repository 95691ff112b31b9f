"""The beamforming network: trunk, output heads, and differentiable loss.

Architecture: two 3x3 convolution layers (32 maps each, spatial size
N_T x N_U preserved), two dense layers of 512 units, then four parallel
heads off the last dense layer:

* analog-phase head   -> sigmoid -> straight-through phase quantizer,
* digital real head and digital imaginary head,
* connection head (dynamic subarray only) -> row softmax -> Gumbel-Softmax.

Batch norm follows every trunk layer (before the leaky-ReLU); heads are
plain affine maps.  The loss is the negative sum-rate of the emitted
design against the true channel, built entirely from autodiff ops with
complex values carried as (real, imaginary) tensor pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, constant
from .errors import ConfigError, DimensionError, ParameterError
from .precoding import DSA, FC, FSA, STRUCTURES, harden_connections, squared_connection

__all__ = [
    "NetConfig", "HbfNet", "DifferentiableDesign",
    "ste_phase_head", "gumbel_softmax", "connection_head", "sample_gumbel",
    "differentiable_sum_rate_loss", "csi_to_input",
]

LOG_FLOOR = 1e-10          # epsilon inside log() of the Gumbel-Softmax
LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters.  ``q_bits=None`` means continuous
    phase shifters (no quantizer in the analog head)."""
    n_t: int
    n_rf: int
    n_u: int
    structure: str
    q_bits: int | None = 4
    tau: float = 1.5
    conv_channels: int = 32
    hidden: int = 512

    def validate(self):
        if self.structure not in STRUCTURES:
            raise ConfigError(f"unknown structure {self.structure!r}")
        if min(self.n_t, self.n_rf, self.n_u) < 1:
            raise ConfigError("dimensions must be positive")
        if self.q_bits is not None and self.q_bits < 1:
            raise ConfigError("q_bits must be >= 1 or None for continuous")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.structure != FC and self.n_t % self.n_rf != 0:
            raise ConfigError("subarray structures require n_rf | n_t")

    @property
    def analog_size(self) -> int:
        return self.n_t * self.n_rf if self.structure == FC else self.n_t


# ----------------------------------------------------------------------
# layers
# ----------------------------------------------------------------------

class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(n_in)
        self.w = ad.parameter(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.b = ad.parameter(rng.uniform(-bound, bound, size=n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.w) + self.b

    def params(self):
        return [("w", self.w), ("b", self.b)]


class Conv2d:
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator):
        fan_in = c_in * k * k
        bound = 1.0 / np.sqrt(fan_in)
        self.w = ad.parameter(rng.uniform(-bound, bound, size=(c_out, c_in, k, k)))
        self.b = ad.parameter(rng.uniform(-bound, bound, size=c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b)

    def params(self):
        return [("w", self.w), ("b", self.b)]


class BatchNorm:
    """Batch normalization over the channel axis.

    Training mode normalizes with batch statistics (biased variance) and
    maintains running statistics with momentum 0.1; inference mode uses the
    running statistics, making every sample independent of its batch.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = ad.parameter(np.ones(channels))
        self.beta = ad.parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        nd = x.data.ndim
        if nd == 2:
            axes, pshape = (0,), (1, -1)
        elif nd == 4:
            axes, pshape = (0, 2, 3), (1, -1, 1, 1)
        else:
            raise DimensionError(f"batch norm expects 2-D or 4-D input, got {nd}-D")
        gamma = ad.reshape(self.gamma, pshape)
        beta = ad.reshape(self.beta, pshape)
        if training:
            mu = ad.tensor_mean(x, axis=axes, keepdims=True)
            xc = x - mu
            var = ad.tensor_mean(ad.square(xc), axis=axes, keepdims=True)
            xhat = xc / ad.sqrt(var + self.eps)
            n = x.data.size / self.gamma.data.size
            unbiased = var.data.reshape(-1) * n / max(n - 1.0, 1.0)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu.data.reshape(-1)
            self.running_var = (1 - m) * self.running_var + m * unbiased
        else:
            rm = constant(self.running_mean.reshape(pshape))
            rv = constant(self.running_var.reshape(pshape))
            xhat = (x - rm) / ad.sqrt(rv + self.eps)
        return xhat * gamma + beta

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def state(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


# ----------------------------------------------------------------------
# head building blocks
# ----------------------------------------------------------------------

def ste_phase_head(z: Tensor, q_bits: int | None) -> Tensor:
    """Sigmoid squashing followed by the phase quantizer.

    With ``q_bits`` set, the forward emits grid phases via the hard
    quantizer while the backward sees the smooth surrogate t -> 2*pi*t
    (straight-through).  ``q_bits=None`` yields the continuous phases
    2*pi*sigmoid(z) in both directions.
    """
    t = ad.sigmoid(z)
    if q_bits is None:
        return ad.scale(t, 2.0 * np.pi)
    return ad.ste_quantize(t, q_bits)


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard Gumbel(0, 1) draws via -log(-log U)."""
    u = np.clip(rng.random(shape), 1e-300, 1.0 - 1e-16)
    return -np.log(-np.log(u))


def gumbel_softmax(p: Tensor, tau: float, g: np.ndarray) -> Tensor:
    """Relaxed one-hot rows: softmax((log(p + eps) + g) / tau) over the
    last axis.  ``p`` holds strictly positive rows summing to one; ``g`` is
    a fixed noise draw, so the output is differentiable in ``p``."""
    if tau <= 0:
        raise ParameterError("tau must be positive")
    scores = ad.scale(ad.log(p + LOG_FLOOR) + constant(g), 1.0 / tau)
    return ad.softmax(scores, axis=-1)


def connection_head(logits: Tensor, tau: float, gumbel_noise: np.ndarray):
    """Row-stochastic connection probabilities and their Gumbel-Softmax
    relaxation.  Returns ``(p, s_soft)`` graph nodes, both shaped like
    ``logits`` with rows on the simplex."""
    p = ad.softmax(logits, axis=-1)
    return p, gumbel_softmax(p, tau, gumbel_noise)


# ----------------------------------------------------------------------
# the network
# ----------------------------------------------------------------------

@dataclass
class DifferentiableDesign:
    """Graph nodes for one forward pass worth of beamformer designs.

    ``theta`` is (B, N_T, N_RF) for FC and (B, N_T) for subarrays; ``s`` is
    the (B, N_T, N_RF) connection matrix in use (soft rows during DSA
    training, one-hot otherwise); ``conn_p`` is the pre-noise probability
    matrix for DSA (None for other structures).
    """
    theta: Tensor
    a_re: Tensor
    a_im: Tensor
    w_re: Tensor
    w_im: Tensor
    s: Tensor
    conn_p: Tensor | None


class HbfNet:
    """Sum-rate network for one hybrid beamforming structure."""

    def __init__(self, config: NetConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x11bf)))
        c = config.conv_channels
        hid = config.hidden
        flat = c * config.n_t * config.n_u
        self.conv1 = Conv2d(2, c, 3, rng)
        self.bn1 = BatchNorm(c)
        self.conv2 = Conv2d(c, c, 3, rng)
        self.bn2 = BatchNorm(c)
        self.fc1 = Linear(flat, hid, rng)
        self.bn3 = BatchNorm(hid)
        self.fc2 = Linear(hid, hid, rng)
        self.bn4 = BatchNorm(hid)
        self.head_analog = Linear(hid, config.analog_size, rng)
        self.head_dig_re = Linear(hid, config.n_rf * config.n_u, rng)
        self.head_dig_im = Linear(hid, config.n_rf * config.n_u, rng)
        self.head_conn = (Linear(hid, config.n_t * config.n_rf, rng)
                          if config.structure == DSA else None)
        if config.structure == FSA:
            self._s_fixed = squared_connection(config.n_t, config.n_rf)
        elif config.structure == FC:
            self._s_fixed = np.ones((config.n_t, config.n_rf))
        else:
            self._s_fixed = None

    # -- parameter bookkeeping ---------------------------------------

    def _named_layers(self):
        layers = [("conv1", self.conv1), ("bn1", self.bn1),
                  ("conv2", self.conv2), ("bn2", self.bn2),
                  ("fc1", self.fc1), ("bn3", self.bn3),
                  ("fc2", self.fc2), ("bn4", self.bn4),
                  ("head_analog", self.head_analog),
                  ("head_dig_re", self.head_dig_re),
                  ("head_dig_im", self.head_dig_im)]
        if self.head_conn is not None:
            layers.append(("head_conn", self.head_conn))
        return layers

    def named_parameters(self):
        out = []
        for lname, layer in self._named_layers():
            for pname, p in layer.params():
                out.append((f"{lname}.{pname}", p))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_items(self):
        """Parameters plus batch-norm running statistics, in a stable order."""
        out = [(name, p.data) for name, p in self.named_parameters()]
        for lname, layer in self._named_layers():
            if isinstance(layer, BatchNorm):
                for sname, arr in layer.state():
                    out.append((f"{lname}.{sname}", arr))
        return out

    def load_state(self, items: dict):
        for name, arr in self.state_items():
            if name not in items:
                raise ConfigError(f"model state missing entry {name!r}")
            new = np.asarray(items[name], dtype=np.float64)
            if new.shape != arr.shape:
                raise DimensionError(f"state entry {name!r} has shape {new.shape}, expected {arr.shape}")
            arr[...] = new

    # -- forward passes ------------------------------------------------

    def trunk(self, x: Tensor, training: bool) -> Tensor:
        slope = LEAKY_SLOPE
        h = ad.leaky_relu(self.bn1(self.conv1(x), training), slope)
        h = ad.leaky_relu(self.bn2(self.conv2(h), training), slope)
        h = ad.flatten(h)
        h = ad.leaky_relu(self.bn3(self.fc1(h), training), slope)
        h = ad.leaky_relu(self.bn4(self.fc2(h), training), slope)
        return h

    def forward_design(self, x: Tensor, *, training: bool, hard: bool = False,
                       surrogate: bool = False, gumbel_noise: np.ndarray | None = None,
                       q_bits=...) -> DifferentiableDesign:
        """Run the network and assemble the analog/digital precoders.

        ``hard`` one-hot-hardens the DSA connection rows (evaluation);
        otherwise the Gumbel-Softmax relaxation is used and
        ``gumbel_noise`` must be provided.  ``surrogate`` replaces the
        phase quantizer with its smooth backward surrogate in the forward
        as well (for gradient verification).  ``q_bits`` defaults to the
        configured value; pass an int or None to override at evaluation.
        """
        cfg = self.config
        b = x.data.shape[0]
        q = cfg.q_bits if q_bits is ... else q_bits
        a4 = self.trunk(x, training)

        za = self.head_analog(a4)
        theta = ste_phase_head(za, None if surrogate else q)
        w_re = ad.reshape(self.head_dig_re(a4), (b, cfg.n_rf, cfg.n_u))
        w_im = ad.reshape(self.head_dig_im(a4), (b, cfg.n_rf, cfg.n_u))

        conn_p = None
        if cfg.structure == FC:
            theta = ad.reshape(theta, (b, cfg.n_t, cfg.n_rf))
            s = constant(np.broadcast_to(self._s_fixed, (b, cfg.n_t, cfg.n_rf)).copy())
            a_re, a_im = ad.cos(theta), ad.sin(theta)
        else:
            if cfg.structure == FSA:
                s = constant(np.broadcast_to(self._s_fixed, (b, cfg.n_t, cfg.n_rf)).copy())
            else:
                logits = ad.reshape(self.head_conn(a4), (b, cfg.n_t, cfg.n_rf))
                if hard:
                    p = ad.softmax(logits, axis=-1)
                    hard_rows = np.stack([harden_connections(p.data[i]) for i in range(b)])
                    conn_p = p
                    s = constant(hard_rows)
                else:
                    if gumbel_noise is None:
                        raise ParameterError("soft DSA forward requires gumbel_noise")
                    conn_p, s = connection_head(logits, cfg.tau, gumbel_noise)
            phase_col = ad.reshape(theta, (b, cfg.n_t, 1))
            a_re = ad.cos(phase_col) * s
            a_im = ad.sin(phase_col) * s
        return DifferentiableDesign(theta=theta, a_re=a_re, a_im=a_im,
                                    w_re=w_re, w_im=w_im, s=s, conn_p=conn_p)


# ----------------------------------------------------------------------
# differentiable loss
# ----------------------------------------------------------------------

def _cmatmul(ar, ai, br, bi):
    re = ad.matmul(ar, br) - ad.matmul(ai, bi)
    im = ad.matmul(ar, bi) + ad.matmul(ai, br)
    return re, im


def csi_to_input(h_hat: np.ndarray) -> np.ndarray:
    """Stack real/imaginary parts of (B, N_T, N_U) noisy CSI into the
    (B, 2, N_T, N_U) network input."""
    return np.stack([h_hat.real, h_hat.imag], axis=1)


def differentiable_sum_rate_loss(h_true: np.ndarray, design: DifferentiableDesign,
                                 sigma2: float, p_max: float):
    """Negative mean sum-rate of the design batch against the true channel.

    The power constraint is enforced in-graph: the digital precoder is
    scaled per sample by sqrt(p_max / ||A W||_F^2) before the SINRs are
    computed, so any pre-scaling of W cancels.  Returns ``(rates, loss)``
    where ``rates`` is the (B,) per-sample sum-rate node and ``loss`` the
    scalar mean of the negated rates.
    """
    if sigma2 <= 0:
        raise ParameterError("sigma2 must be positive")
    b, n_u, n_t = h_true.shape
    hc = np.conj(h_true)
    hr, hi = constant(np.ascontiguousarray(hc.real)), constant(np.ascontiguousarray(hc.imag))

    aw_re, aw_im = _cmatmul(design.a_re, design.a_im, design.w_re, design.w_im)
    rho = ad.tensor_sum(ad.square(aw_re) + ad.square(aw_im), axis=(1, 2), keepdims=True)
    factor = ad.sqrt(constant(p_max) / rho)                    # NumericError if rho == 0

    ha_re, ha_im = _cmatmul(hr, hi, design.a_re, design.a_im)
    g_re, g_im = _cmatmul(ha_re, ha_im, design.w_re, design.w_im)
    g_re = g_re * factor
    g_im = g_im * factor

    power = ad.square(g_re) + ad.square(g_im)                  # (B, N_U, N_U)
    eye = np.eye(n_u)
    signal = ad.tensor_sum(power * constant(eye), axis=2)
    interference = ad.tensor_sum(power * constant(1.0 - eye), axis=2)
    sinr = signal / (interference + sigma2)
    rates = ad.tensor_sum(ad.log2(sinr + 1.0), axis=1)         # (B,)
    loss = ad.neg(ad.tensor_mean(rates))
    return rates, loss
