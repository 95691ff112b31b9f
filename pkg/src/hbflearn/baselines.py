"""Classical (non-learning) hybrid precoder designs.

These serve as comparison points for the trained networks and as building
blocks for test oracles: fully digital zero-forcing with water-filling,
orthogonal matching pursuit over a steering codebook, phase-extraction
alternating minimization (fully connected and subarray-masked), a greedy
coordinate-ascent dynamic-subarray search, and a random feasible design.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericError, ParameterError, StructureError
from .precoding import (DSA, FC, FSA, TWO_PI, AnalogPrecoder, HbfDesign,
                        normalize_power, quantize_phase, realize_analog,
                        squared_connection, sum_rate, zf_digital)

__all__ = [
    "FdpSolution", "fdp_zf", "fdp_sum_rate", "water_filling",
    "steering_codebook", "omp_hbf",
    "pe_altmin_fc", "fsa_altmin", "dsa_greedy",
    "random_precoder",
]


@dataclass
class FdpSolution:
    """Fully digital precoder: columns u_u, shape (N_T, N_U)."""
    u: np.ndarray
    powers: np.ndarray         # per-user allocated power
    gains: np.ndarray          # effective channel gains seen by water-filling


def water_filling(gains: np.ndarray, p_max: float, sigma2: float) -> np.ndarray:
    """Allocate p_u = max(0, mu - sigma2/gain_u) with sum p = p_max.

    Exact active-set solution: users are sorted by inverse gain and the
    water level is the largest one keeping all active powers positive.
    """
    gains = np.asarray(gains, dtype=np.float64)
    if np.any(gains <= 0):
        raise ParameterError("water-filling gains must be positive")
    inv = sigma2 / gains
    order = np.argsort(inv)
    inv_sorted = inv[order]
    n = gains.size
    k = n
    while k > 1:
        mu = (p_max + inv_sorted[:k].sum()) / k
        if mu > inv_sorted[k - 1]:
            break
        k -= 1
    else:
        mu = p_max + inv_sorted[0]
    mu = (p_max + inv_sorted[:k].sum()) / k
    powers = np.zeros(n)
    powers[order[:k]] = mu - inv_sorted[:k]
    return powers


def fdp_zf(h: np.ndarray, sigma2: float, p_max: float = 1.0) -> FdpSolution:
    """Fully digital zero-forcing with water-filling power allocation.

    Directions are the pseudo-inverse of conj(H), so inter-user
    interference is zero by construction; per-user powers water-fill the
    resulting parallel channels and make the power constraint active.
    """
    n_u, n_t = h.shape
    if n_t < n_u:
        raise ParameterError("fdp_zf requires N_T >= N_U")
    hc = np.conj(h)
    svals = np.linalg.svd(hc, compute_uv=False)
    if svals[-1] < 1e-12 * svals[0]:
        raise NumericError(
            f"channel matrix is rank deficient (condition number {svals[0] / max(svals[-1], 1e-300):.3e})")
    u_raw = np.linalg.pinv(hc)                     # conj(H) @ u_raw = I
    col_norms = np.linalg.norm(u_raw, axis=0)
    gains = 1.0 / col_norms ** 2
    powers = water_filling(gains, p_max, sigma2)
    u = u_raw * (np.sqrt(powers) / col_norms)[None, :]
    return FdpSolution(u=u, powers=powers, gains=gains)


def fdp_sum_rate(h: np.ndarray, sol: FdpSolution, sigma2: float) -> float:
    return sum_rate(h, np.eye(h.shape[1]), sol.u, sigma2)


# ----------------------------------------------------------------------
# OMP over a steering codebook
# ----------------------------------------------------------------------

def steering_codebook(n_t: int, grid_size: int | None = None) -> np.ndarray:
    """Columns a(phi_g) for phi_g uniform in [-pi/2, pi/2], shape (n_t, G)."""
    g = 4 * n_t if grid_size is None else grid_size
    phis = np.linspace(-np.pi / 2, np.pi / 2, g)
    n = np.arange(n_t)[:, None]
    return np.exp(1j * np.pi * n * np.sin(phis)[None, :])


def _phases_to_unit(ph: np.ndarray) -> np.ndarray:
    t = (ph % TWO_PI) / TWO_PI
    return np.clip(t, 0.0, 1.0)


def quantize_matrix_phases(a: np.ndarray, q_bits: int) -> np.ndarray:
    """Phase angles of ``a`` snapped onto the q-bit grid."""
    return quantize_phase(_phases_to_unit(np.angle(a)), q_bits)


def omp_hbf(u_opt: np.ndarray, codebook: np.ndarray, n_rf: int, q_bits: int,
            p_max: float = 1.0):
    """Greedy sparse approximation of the fully digital precoder.

    Each iteration picks the codebook column with the largest total
    correlation energy against the residual, re-solves the digital part by
    least squares, and updates the residual.  Selected columns are then
    phase-quantized and the design power-normalized.

    Returns ``(HbfDesign, residual_norms)`` where the residual trace has
    one entry per iteration.
    """
    n_t, n_u = u_opt.shape
    g = codebook.shape[1]
    if g < n_rf:
        raise ParameterError("codebook must hold at least n_rf columns")
    selected: list[int] = []
    residual = u_opt.copy()
    trace = []
    for _ in range(n_rf):
        corr = np.abs(np.conj(codebook.T) @ residual) ** 2    # (G, N_U)
        energy = corr.sum(axis=1)
        energy[selected] = -1.0
        selected.append(int(np.argmax(energy)))
        a_sel = codebook[:, selected]
        w, *_ = np.linalg.lstsq(a_sel, u_opt, rcond=None)
        residual = u_opt - a_sel @ w
        trace.append(float(np.linalg.norm(residual)))
    phases = quantize_matrix_phases(codebook[:, selected], q_bits)
    analog = AnalogPrecoder(FC, phases, np.ones((n_t, n_rf)), q_bits)
    design = normalize_power(HbfDesign(analog, w, p_max))
    return design, trace


# ----------------------------------------------------------------------
# alternating minimization (phase extraction / least squares)
# ----------------------------------------------------------------------

def pe_altmin_fc(u_opt: np.ndarray, n_rf: int, q_bits: int, iters: int = 20,
                 p_max: float = 1.0):
    """Fully connected alternating minimization ("PE-AltMin-LS").

    Alternates phase extraction (analog entries take the phase of
    U_opt W^H) with an unconstrained least-squares digital step.  The
    extraction step is applied only when it does not increase
    ||U_opt - A W||_F^2, so the continuous-phase objective trace is
    monotone non-increasing by construction.  Final phases are quantized
    to the grid and the design power-normalized.

    Returns ``(HbfDesign, objective_trace)``.
    """
    if iters < 1:
        raise ParameterError("iters must be >= 1")
    n_t, n_u = u_opt.shape
    left, _, _ = np.linalg.svd(u_opt, full_matrices=True)
    a = np.exp(1j * np.angle(left[:, :n_rf]))
    w, *_ = np.linalg.lstsq(a, u_opt, rcond=None)
    trace = [float(np.linalg.norm(u_opt - a @ w) ** 2)]
    for _ in range(iters):
        cand = np.exp(1j * np.angle(u_opt @ np.conj(w.T)))
        obj_cand = float(np.linalg.norm(u_opt - cand @ w) ** 2)
        if obj_cand <= trace[-1]:
            a = cand
            trace.append(obj_cand)
        else:
            trace.append(trace[-1])
        w, *_ = np.linalg.lstsq(a, u_opt, rcond=None)
        trace.append(float(np.linalg.norm(u_opt - a @ w) ** 2))
    phases = quantize_matrix_phases(a, q_bits)
    analog = AnalogPrecoder(FC, phases, np.ones((n_t, n_rf)), q_bits)
    design = normalize_power(HbfDesign(analog, w, p_max))
    return design, trace


def _check_one_hot(s: np.ndarray) -> None:
    if not (np.all((s == 0) | (s == 1)) and np.all(s.sum(axis=1) == 1)):
        raise StructureError("connection matrix must have exactly one 1 per row")


def _subarray_altmin(u_opt: np.ndarray, s: np.ndarray, structure: str,
                     q_bits: int, iters: int, p_max: float):
    """Alternating minimization restricted to the support of ``s``.

    For a subarray analog matrix the per-antenna phase extraction step is
    the exact minimizer of the objective given W, so no safeguard is
    needed for monotonicity.
    """
    _check_one_hot(s)
    n_t, n_u = u_opt.shape
    chains = np.argmax(s, axis=1)
    left, _, _ = np.linalg.svd(u_opt, full_matrices=True)
    theta = np.angle(left[:, 0])
    a = np.exp(1j * theta)[:, None] * s
    w, *_ = np.linalg.lstsq(a, u_opt, rcond=None)
    trace = [float(np.linalg.norm(u_opt - a @ w) ** 2)]
    for _ in range(iters):
        b = u_opt @ np.conj(w.T)
        theta = np.angle(b[np.arange(n_t), chains])
        a = np.exp(1j * theta)[:, None] * s
        trace.append(float(np.linalg.norm(u_opt - a @ w) ** 2))
        w, *_ = np.linalg.lstsq(a, u_opt, rcond=None)
        trace.append(float(np.linalg.norm(u_opt - a @ w) ** 2))
    phases = quantize_phase(_phases_to_unit(theta), q_bits)
    analog = AnalogPrecoder(structure, phases, s.copy(), q_bits)
    design = normalize_power(HbfDesign(analog, w, p_max))
    return design, trace


def fsa_altmin(u_opt: np.ndarray, s_fsa: np.ndarray, q_bits: int,
               iters: int = 20, p_max: float = 1.0):
    """Fixed-subarray alternating minimization over the given connection
    pattern.  Returns ``(HbfDesign, objective_trace)``."""
    if iters < 1:
        raise ParameterError("iters must be >= 1")
    return _subarray_altmin(u_opt, s_fsa, FSA, q_bits, iters, p_max)


# ----------------------------------------------------------------------
# dynamic subarray greedy search
# ----------------------------------------------------------------------

def _best_subarray_design(h, u_opt, s, q_bits, inner_iters, sigma2, p_max):
    """Refine phases on support ``s`` by alternating minimization, then take
    the better of the least-squares and zero-forcing digital precoders by
    exact sum-rate."""
    design, _ = _subarray_altmin(u_opt, s, DSA, q_bits, inner_iters, p_max)
    a = realize_analog(design.analog)
    rate = sum_rate(h, a, design.w, sigma2)
    w_zf = zf_digital(h, a)
    if np.sum(np.abs(a @ w_zf) ** 2) > 0:
        alt = normalize_power(replace(design, w=w_zf))
        alt_rate = sum_rate(h, a, alt.w, sigma2)
        if alt_rate > rate:
            return alt, alt_rate
    return design, rate


def dsa_greedy(h: np.ndarray, n_rf: int, sigma2: float, p_max: float = 1.0,
               q_bits: int = 4, passes: int = 2, inner_iters: int = 3):
    """Greedy coordinate ascent over antenna-to-chain assignments.

    Starts from the fixed 'Squared' pattern, and for every antenna in turn
    tries each alternative RF chain, rescoring the refined design by exact
    sum-rate.  Moves are accepted only on strict improvement, so the
    sum-rate trace is non-decreasing and the result is never worse than
    the fixed-subarray starting point.

    Returns ``(HbfDesign, accepted_rate_trace)``.
    """
    if passes < 1:
        raise ParameterError("passes must be >= 1")
    n_u, n_t = h.shape
    u_opt = fdp_zf(h, sigma2, p_max).u
    s = squared_connection(n_t, n_rf)
    best_design, best_rate = _best_subarray_design(
        h, u_opt, s, q_bits, inner_iters, sigma2, p_max)
    trace = [best_rate]
    for _ in range(passes):
        for n in range(n_t):
            current = int(np.argmax(s[n]))
            for m in range(n_rf):
                if m == current:
                    continue
                s_try = s.copy()
                s_try[n] = 0.0
                s_try[n, m] = 1.0
                cand, rate = _best_subarray_design(
                    h, u_opt, s_try, q_bits, inner_iters, sigma2, p_max)
                if rate > best_rate:
                    s = s_try
                    current = m
                    best_design, best_rate = cand, rate
                    trace.append(best_rate)
    return best_design, trace


def random_precoder(structure: str, n_t: int, n_rf: int, n_u: int,
                    q_bits: int, seed: int, p_max: float = 1.0) -> HbfDesign:
    """Uniform random feasible design: grid phases, a valid connection
    matrix, complex Gaussian digital precoder, power normalized."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xbeef)))
    levels = 2 ** q_bits
    if structure == FC:
        phases = TWO_PI * rng.integers(1, levels + 1, size=(n_t, n_rf)) / levels
        s = np.ones((n_t, n_rf))
    else:
        phases = TWO_PI * rng.integers(1, levels + 1, size=n_t) / levels
        if structure == FSA:
            s = squared_connection(n_t, n_rf)
        elif structure == DSA:
            s = np.zeros((n_t, n_rf))
            s[np.arange(n_t), rng.integers(0, n_rf, size=n_t)] = 1.0
        else:
            raise StructureError(f"unknown structure {structure!r}")
    w = (rng.standard_normal((n_rf, n_u)) + 1j * rng.standard_normal((n_rf, n_u))) / np.sqrt(2.0)
    return normalize_power(HbfDesign(AnalogPrecoder(structure, phases, s, q_bits), w, p_max))
