"""Full-network gradient verification by central finite differences.

Checks every scalar parameter of an :class:`~hbflearn.network.HbfNet`
against the autodiff gradient of the sum-rate loss.  Both sides run in
inference-mode batch norm with the phase quantizer replaced by its smooth
surrogate (the straight-through backward), since finite differences of a
staircase measure nothing.

The finite-difference side is a standalone numpy re-implementation of the
forward pass, staged so that perturbations batch: every parameter enters
its layer linearly, so f(theta +/- h e_k) only differs downstream of that
layer by a shift of the layer output along a unit response.  All
perturbations of one layer are evaluated as batched passes over the
remaining stages, which keeps the full check at N_T=8 (hundreds of
thousands of parameters) well under a minute.

Leaky-ReLU caveat: a perturbation that pushes some pre-activation across
the kink makes the central difference average two slopes and disagree with
the (one-sided) analytic gradient.  The report therefore carries
``kink_margin``, the smallest |pre-activation| seen in the trunk; callers
should check gradients at an input whose margin comfortably exceeds the
step size (see :func:`network_gradient_check`).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, rel_error
from .network import (LEAKY_SLOPE, LOG_FLOOR, HbfNet,
                      differentiable_sum_rate_loss, sample_gumbel)
from .precoding import DSA, FC

__all__ = ["network_gradient_check", "staged_kink_margin"]

_CHUNK = 16384


def _act(y):
    # leaky_relu(y) == max(y, slope*y) for slope < 1
    return np.maximum(y, LEAKY_SLOPE * y)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _conv_np(x, w, b):
    bs, cin, hh, ww = x.shape
    cout = w.shape[0]
    k = w.shape[2]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.broadcast_to(b.reshape(1, cout, 1, 1), (bs, cout, hh, ww)).copy()
    for u in range(k):
        for v in range(k):
            xv = xp[:, :, u:u + hh, v:v + ww]
            out += np.tensordot(w[:, :, u, v], xv, axes=([1], [1])).transpose(1, 0, 2, 3)
    return out, xp


def _bn_coeffs(bn, conv: bool):
    """Inference batch norm y = z*s + t folded into two vectors."""
    shape = (1, -1, 1, 1) if conv else (1, -1)
    s = (bn.gamma.data / np.sqrt(bn.running_var + bn.eps)).reshape(shape)
    t = (bn.beta.data - bn.running_mean * s.reshape(-1)).reshape(shape)
    return s, t


def _affine(z, s, t):
    y = z * s
    y += t
    return y


def _row_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


class _StagedForward:
    """Numpy forward for a single CSI sample with cached stage activations
    and per-stage batched loss evaluators (leading axis = perturbations)."""

    def __init__(self, net: HbfNet, x: np.ndarray, h_true: np.ndarray,
                 sigma2: float, p_max: float, gumbel_noise):
        self.net = net
        self.cfg = net.config
        self.sigma2 = sigma2
        self.p_max = p_max
        self.hc = np.conj(h_true[0])
        self.g = gumbel_noise
        self.x = x

        n = net
        self.s1, self.t1 = _bn_coeffs(n.bn1, conv=True)
        self.s2, self.t2 = _bn_coeffs(n.bn2, conv=True)
        self.s3, self.t3 = _bn_coeffs(n.bn3, conv=False)
        self.s4, self.t4 = _bn_coeffs(n.bn4, conv=False)

        self.z1, self.xp1 = _conv_np(x, n.conv1.w.data, n.conv1.b.data)
        self.y1 = _affine(self.z1, self.s1, self.t1)
        self.a1 = _act(self.y1)
        self.z2, self.xp2 = _conv_np(self.a1, n.conv2.w.data, n.conv2.b.data)
        self.y2 = _affine(self.z2, self.s2, self.t2)
        self.a2 = _act(self.y2)
        self.f = self.a2.reshape(1, -1)
        self.z3 = self.f @ n.fc1.w.data + n.fc1.b.data
        self.y3 = _affine(self.z3, self.s3, self.t3)
        self.a3 = _act(self.y3)
        self.z4 = self.a3 @ n.fc2.w.data + n.fc2.b.data
        self.y4 = _affine(self.z4, self.s4, self.t4)
        self.a4 = _act(self.y4)
        self.za, self.zr, self.zi, self.zc = self._heads_from_a4(self.a4)

    def kink_margin(self) -> float:
        """Smallest |pre-activation| at any leaky-ReLU in the trunk."""
        return min(float(np.min(np.abs(y))) for y in (self.y1, self.y2, self.y3, self.y4))

    # -- per-sample normalized input for batch-norm parameter responses --

    def xhat(self, z, bn, conv: bool):
        shape = (1, -1, 1, 1) if conv else (1, -1)
        return (z - bn.running_mean.reshape(shape)) / np.sqrt(bn.running_var.reshape(shape) + bn.eps)

    # -- batched continuations from each stage -------------------------

    def loss_from_heads(self, za=None, zr=None, zi=None, zc=None):
        cfg = self.cfg
        za = self.za if za is None else za
        zr = self.zr if zr is None else zr
        zi = self.zi if zi is None else zi
        zc = self.zc if zc is None else zc
        p = max(arr.shape[0] for arr in (za, zr, zi) if arr is not None)
        if zc is not None:
            p = max(p, zc.shape[0])

        theta = 2.0 * np.pi * _sigmoid(za)
        w = (zr + 1j * zi).reshape(-1, cfg.n_rf, cfg.n_u)
        if cfg.structure == FC:
            a = np.exp(1j * theta.reshape(-1, cfg.n_t, cfg.n_rf))
        else:
            if cfg.structure == DSA:
                probs = _row_softmax(zc.reshape(-1, cfg.n_t, cfg.n_rf))
                scores = (np.log(probs + LOG_FLOOR) + self.g) / cfg.tau
                s = _row_softmax(scores)
            else:
                s = self.net._s_fixed[None]
            a = np.exp(1j * theta)[:, :, None] * s
        a = np.broadcast_to(a, (p,) + a.shape[1:])
        w = np.broadcast_to(w, (p,) + w.shape[1:])

        aw = a @ w
        rho = np.sum(np.abs(aw) ** 2, axis=(1, 2))
        g_mat = (self.hc[None] @ a) @ w * np.sqrt(self.p_max / rho)[:, None, None]
        pw = np.abs(g_mat) ** 2
        sig = np.einsum("puu->pu", pw)
        intf = pw.sum(axis=2) - sig
        rates = np.log2(1.0 + sig / (intf + self.sigma2)).sum(axis=1)
        return -rates

    def _heads_from_a4(self, a4):
        n = self.net
        za = a4 @ n.head_analog.w.data + n.head_analog.b.data
        zr = a4 @ n.head_dig_re.w.data + n.head_dig_re.b.data
        zi = a4 @ n.head_dig_im.w.data + n.head_dig_im.b.data
        zc = a4 @ n.head_conn.w.data + n.head_conn.b.data if n.head_conn is not None else None
        return za, zr, zi, zc

    def loss_from_y4(self, y4):
        return self.loss_from_heads(*self._heads_from_a4(_act(y4)))

    def loss_from_z4(self, z4):
        return self.loss_from_y4(_affine(z4, self.s4, self.t4))

    def loss_from_y3(self, y3):
        a3 = _act(y3)
        return self.loss_from_z4(a3 @ self.net.fc2.w.data + self.net.fc2.b.data)

    def loss_from_z3(self, z3):
        return self.loss_from_y3(_affine(z3, self.s3, self.t3))

    def loss_from_y2(self, y2):
        f = _act(y2).reshape(y2.shape[0], -1)
        return self.loss_from_z3(f @ self.net.fc1.w.data + self.net.fc1.b.data)

    def loss_from_z2(self, z2):
        return self.loss_from_y2(_affine(z2, self.s2, self.t2))

    def loss_from_y1(self, y1):
        a1 = _act(y1)
        z2, _ = _conv_np(a1, self.net.conv2.w.data, self.net.conv2.b.data)
        return self.loss_from_z2(z2)

    def loss_from_z1(self, z1):
        return self.loss_from_y1(_affine(z1, self.s1, self.t1))


def _fd_dense(base, responses, loss_fn, h):
    """Central differences for perturbations base +/- h * responses."""
    plus = loss_fn(base + h * responses)
    minus = loss_fn(base - h * responses)
    return (plus - minus) / (2.0 * h)


def _conv_responses(xp, cout, cin, k, hh, ww):
    """Unit responses of a conv layer output to each kernel entry, ordered
    like the flattened (cout, cin, k, k) weight."""
    n = cout * cin * k * k
    r = np.zeros((n, cout, hh, ww))
    idx = 0
    for f in range(cout):
        for c in range(cin):
            for u in range(k):
                for v in range(k):
                    r[idx, f] = xp[0, c, u:u + hh, v:v + ww]
                    idx += 1
    return r


def _channel_responses(per_channel, cout, hh=None, ww=None):
    """Responses R[k, k-th channel] = per_channel[k] for bias/affine params."""
    if hh is None:
        n = per_channel.shape[-1]
        r = np.zeros((n, n))
        np.fill_diagonal(r, per_channel.reshape(-1))
        return r
    r = np.zeros((cout, cout, hh, ww))
    for c in range(cout):
        r[c, c] = per_channel[0, c]
    return r


def _fd_linear_weight(f0, base_z, loss_fn, h):
    """Chunked central differences over a dense layer's weight matrix.

    ``f0`` is the (n_in,) layer input, ``base_z`` the (n_out,) base output;
    perturbing w[i, j] shifts z[j] by h*f0[i]."""
    n_in = f0.size
    n_out = base_z.size
    total = n_in * n_out
    grad = np.empty(total)
    ks = np.arange(total)
    for lo in range(0, total, _CHUNK):
        sel = ks[lo:lo + _CHUNK]
        i_idx = sel // n_out
        j_idx = sel % n_out
        rows = np.arange(sel.size)
        z = np.broadcast_to(base_z, (sel.size, n_out)).copy()
        z[rows, j_idx] += h * f0[i_idx]
        plus = loss_fn(z)
        z[rows, j_idx] -= 2.0 * h * f0[i_idx]
        minus = loss_fn(z)
        grad[lo:lo + sel.size] = (plus - minus) / (2.0 * h)
    return grad.reshape(n_in, n_out)


def _fd_linear_bias(base_z, loss_fn, h):
    n_out = base_z.size
    z = np.broadcast_to(base_z, (n_out, n_out)).copy()
    idx = np.arange(n_out)
    z[idx, idx] += h
    plus = loss_fn(z)
    z[idx, idx] -= 2.0 * h
    minus = loss_fn(z)
    return (plus - minus) / (2.0 * h)


def staged_kink_margin(net: HbfNet, h_true: np.ndarray, h_hat: np.ndarray,
                       sigma2: float, p_max: float = 1.0, noise_seed: int = 0) -> float:
    """Cheap pre-screen: the smallest |pre-activation| at any trunk
    leaky-ReLU for this input.  Pick inputs whose margin is well above the
    finite-difference step before running the full check."""
    from .network import csi_to_input

    cfg = net.config
    gumbel = (sample_gumbel(np.random.default_rng(noise_seed), (1, cfg.n_t, cfg.n_rf))
              if cfg.structure == DSA else None)
    st = _StagedForward(net, csi_to_input(h_hat), h_true, sigma2, p_max, gumbel)
    return st.kink_margin()


def network_gradient_check(net: HbfNet, h_true: np.ndarray, h_hat: np.ndarray,
                           sigma2: float, p_max: float = 1.0, h: float = 1e-5,
                           floor: float = 1e-4, noise_seed: int = 0) -> GradCheckReport:
    """Compare autodiff gradients against central finite differences for
    every parameter of ``net`` on a single CSI sample.

    ``h_true`` is (1, N_U, N_T) and ``h_hat`` the matching (1, N_T, N_U)
    noisy CSI.  Returns a report whose ``per_param`` entries are
    ``(name, max_rel_error)``; relative errors use a small-magnitude floor
    (see :func:`hbflearn.autodiff.rel_error`).

    The report's ``kink_margin`` is the distance of the closest trunk
    pre-activation to a leaky-ReLU kink.  For a trustworthy comparison it
    should exceed the step ``h`` by a couple of orders of magnitude;
    otherwise pick a different input sample and re-run.
    """
    from .network import csi_to_input

    cfg = net.config
    x = csi_to_input(h_hat)
    gumbel = (sample_gumbel(np.random.default_rng(noise_seed), (1, cfg.n_t, cfg.n_rf))
              if cfg.structure == DSA else None)

    # Autodiff side: inference batch norm, smooth surrogate for the quantizer.
    ad.zero_grad(net.parameters())
    design = net.forward_design(ad.constant(x), training=False, surrogate=True,
                                gumbel_noise=gumbel)
    _, loss = differentiable_sum_rate_loss(h_true, design, sigma2, p_max)
    ad.backward(loss, net.parameters())
    analytic = {name: p.grad.copy() for name, p in net.named_parameters()}

    st = _StagedForward(net, x, h_true, sigma2, p_max, gumbel)
    cc = cfg.conv_channels
    hh, ww = cfg.n_t, cfg.n_u

    numeric: dict[str, np.ndarray] = {}

    r = _conv_responses(st.xp1, cc, 2, 3, hh, ww)
    numeric["conv1.w"] = _fd_dense(st.z1, r, st.loss_from_z1, h).reshape(cc, 2, 3, 3)
    numeric["conv1.b"] = _fd_dense(st.z1, _channel_responses(np.ones((1, cc)), cc, hh, ww),
                                   st.loss_from_z1, h)
    numeric["bn1.gamma"] = _fd_dense(st.y1, _channel_responses(st.xhat(st.z1, net.bn1, True), cc, hh, ww),
                                     st.loss_from_y1, h)
    numeric["bn1.beta"] = _fd_dense(st.y1, _channel_responses(np.ones((1, cc)), cc, hh, ww),
                                    st.loss_from_y1, h)

    r = _conv_responses(st.xp2, cc, cc, 3, hh, ww)
    numeric["conv2.w"] = _fd_dense(st.z2, r, st.loss_from_z2, h).reshape(cc, cc, 3, 3)
    numeric["conv2.b"] = _fd_dense(st.z2, _channel_responses(np.ones((1, cc)), cc, hh, ww),
                                   st.loss_from_z2, h)
    numeric["bn2.gamma"] = _fd_dense(st.y2, _channel_responses(st.xhat(st.z2, net.bn2, True), cc, hh, ww),
                                     st.loss_from_y2, h)
    numeric["bn2.beta"] = _fd_dense(st.y2, _channel_responses(np.ones((1, cc)), cc, hh, ww),
                                    st.loss_from_y2, h)

    numeric["fc1.w"] = _fd_linear_weight(st.f[0], st.z3[0], st.loss_from_z3, h)
    numeric["fc1.b"] = _fd_linear_bias(st.z3[0], st.loss_from_z3, h)
    numeric["bn3.gamma"] = _fd_dense(st.y3, _channel_responses(st.xhat(st.z3, net.bn3, False), None),
                                     st.loss_from_y3, h)
    numeric["bn3.beta"] = _fd_dense(st.y3, _channel_responses(np.ones_like(st.z3), None),
                                    st.loss_from_y3, h)

    numeric["fc2.w"] = _fd_linear_weight(st.a3[0], st.z4[0], st.loss_from_z4, h)
    numeric["fc2.b"] = _fd_linear_bias(st.z4[0], st.loss_from_z4, h)
    numeric["bn4.gamma"] = _fd_dense(st.y4, _channel_responses(st.xhat(st.z4, net.bn4, False), None),
                                     st.loss_from_y4, h)
    numeric["bn4.beta"] = _fd_dense(st.y4, _channel_responses(np.ones_like(st.z4), None),
                                    st.loss_from_y4, h)

    def head_loss(which):
        return lambda z: st.loss_from_heads(**{which: z})

    heads = [("head_analog", st.za, "za"), ("head_dig_re", st.zr, "zr"),
             ("head_dig_im", st.zi, "zi")]
    if net.head_conn is not None:
        heads.append(("head_conn", st.zc, "zc"))
    for lname, base_z, key in heads:
        numeric[f"{lname}.w"] = _fd_linear_weight(st.a4[0], base_z[0], head_loss(key), h)
        numeric[f"{lname}.b"] = _fd_linear_bias(base_z[0], head_loss(key), h)

    per_param = []
    worst = 0.0
    for name, _ in net.named_parameters():
        err = rel_error(analytic[name], numeric[name], floor)
        per_param.append((name, err))
        worst = max(worst, err)
    report = GradCheckReport(max_rel_error=worst, per_param=per_param)
    report.kink_margin = st.kink_margin()
    return report
