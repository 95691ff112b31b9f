"""Beamformer data model, constraints, quantization, and exact sum-rate.

This module is the ground-truth scorer: everything else (baselines, the
trained network, the CLI) is ultimately judged by :func:`sum_rate` on
designs that pass :func:`validate_analog` and the power constraint.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from .errors import (DegenerateInputError, DimensionError, GuardError,
                     ParameterError, StructureError)

__all__ = [
    "FC", "FSA", "DSA", "STRUCTURES",
    "AnalogPrecoder", "HbfDesign",
    "squared_connection", "quantize_phase", "phase_grid",
    "realize_analog", "sinr", "sum_rate",
    "normalize_power", "design_power", "harden_connections",
    "validate_analog", "validate_design",
    "zf_digital", "brute_force_optimum", "BRUTE_FORCE_GUARD",
]

TWO_PI = 2.0 * np.pi

FC = "fc"
FSA = "fsa"
DSA = "dsa"
STRUCTURES = (FC, FSA, DSA)

BRUTE_FORCE_GUARD = 2 ** 20


@dataclass
class AnalogPrecoder:
    """Phase-shifter network description.

    ``phases`` is an (N_T, N_RF) matrix for the fully-connected structure
    and a length-N_T vector for subarrays.  ``s`` is the binary connection
    matrix (all-ones for FC).  ``q_bits`` of ``None`` means continuous
    phase shifters; otherwise every phase must sit on the 2^q grid.
    """
    structure: str
    phases: np.ndarray
    s: np.ndarray
    q_bits: int | None

    @property
    def n_t(self) -> int:
        return self.s.shape[0]

    @property
    def n_rf(self) -> int:
        return self.s.shape[1]


@dataclass
class HbfDesign:
    """A hybrid beamformer: analog precoder, digital precoder, power budget."""
    analog: AnalogPrecoder
    w: np.ndarray          # (N_RF, N_U) complex
    p_max: float = 1.0


def squared_connection(n_t: int, n_rf: int) -> np.ndarray:
    """The fixed 'Squared' subarray pattern: contiguous equal antenna blocks
    per RF chain.  Requires n_rf to divide n_t."""
    if n_t % n_rf != 0:
        raise ParameterError(f"squared connection needs n_rf | n_t, got {n_t}/{n_rf}")
    s = np.zeros((n_t, n_rf))
    block = n_t // n_rf
    for m in range(n_rf):
        s[m * block:(m + 1) * block, m] = 1.0
    return s


def phase_grid(q_bits: int) -> np.ndarray:
    """The 2^q realizable phases 2*pi*k/2^q for k = 1..2^q (in (0, 2*pi])."""
    levels = 2 ** q_bits
    return TWO_PI * np.arange(1, levels + 1) / levels


def quantize_phase(t, q_bits: int):
    """Map t in [0, 1] to the phase grid: 2*pi*ceil(t*2^q)/2^q.

    Quantization error relative to the target phase 2*pi*t is at most
    2*pi/2^q.  Scalar or array input.
    """
    if q_bits < 1:
        raise ParameterError("q_bits must be >= 1")
    arr = np.asarray(t, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ParameterError("quantize_phase input must lie in [0, 1]")
    levels = float(2 ** q_bits)
    out = TWO_PI * np.ceil(arr * levels) / levels
    return out if out.ndim else float(out)


def _phase_matrix(analog: AnalogPrecoder) -> np.ndarray:
    ph = np.asarray(analog.phases, dtype=np.float64)
    if analog.structure == FC:
        if ph.shape != analog.s.shape:
            raise DimensionError(f"FC phases must be (n_t, n_rf), got {ph.shape}")
        return ph
    if ph.shape != (analog.n_t,):
        raise DimensionError(f"subarray phases must be (n_t,), got {ph.shape}")
    return np.broadcast_to(ph[:, None], analog.s.shape)


def validate_analog(analog: AnalogPrecoder) -> None:
    """Raise StructureError unless the precoder satisfies its structure:
    binary S, exactly one connection per antenna for subarrays (all-ones
    for FC), and grid-exact phases when quantized."""
    if analog.structure not in STRUCTURES:
        raise StructureError(f"unknown structure {analog.structure!r}")
    s = np.asarray(analog.s)
    if s.ndim != 2:
        raise StructureError("connection matrix must be 2-D")
    if not np.all((s == 0.0) | (s == 1.0)):
        raise StructureError("connection matrix must be binary")
    if analog.structure == FC:
        if not np.all(s == 1.0):
            raise StructureError("FC structure requires an all-ones connection matrix")
    else:
        rows = s.sum(axis=1)
        if not np.all(rows == 1.0):
            raise StructureError("each antenna must connect to exactly one RF chain")
    ph = _phase_matrix(analog)
    if analog.q_bits is not None:
        levels = float(2 ** analog.q_bits)
        k = np.round(ph * levels / TWO_PI)
        if not np.array_equal(TWO_PI * k / levels, ph):
            raise StructureError(f"phases are not on the {analog.q_bits}-bit grid")


def realize_analog(analog: AnalogPrecoder, per_chain_scaling: bool = False) -> np.ndarray:
    """The complex (N_T, N_RF) analog matrix: unit-modulus phase entries
    masked by the connection matrix.

    With ``per_chain_scaling`` (an optional DSA mode), column m is scaled by
    1/sqrt(#antennas on chain m) so each RF chain radiates fixed power split
    equally over its antennas.  Off by default; the global digital power
    normalization is always applied afterwards regardless.
    """
    validate_analog(analog)
    a = np.exp(1j * _phase_matrix(analog)) * analog.s
    if per_chain_scaling:
        counts = analog.s.sum(axis=0)
        scale = np.where(counts > 0, 1.0 / np.sqrt(np.maximum(counts, 1.0)), 0.0)
        a = a * scale[None, :]
    return a


def sinr(h: np.ndarray, a: np.ndarray, w: np.ndarray, u: int, sigma2: float) -> float:
    """SINR of user ``u``: |h_u^H A w_u|^2 / (sum_{j!=u} |h_u^H A w_j|^2 + sigma2)."""
    if sigma2 <= 0:
        raise ParameterError("sigma2 must be positive")
    g = np.conj(h[u]) @ a @ w          # (N_U,) entries h_u^H A w_j
    p = np.abs(g) ** 2
    signal = p[u]
    interference = p.sum() - p[u]
    return float(signal / (interference + sigma2))


def sum_rate(h: np.ndarray, a: np.ndarray, w: np.ndarray, sigma2: float) -> float:
    """Sum over users of log2(1 + SINR), in bit/s/Hz."""
    if sigma2 <= 0:
        raise ParameterError("sigma2 must be positive")
    g = np.conj(h) @ a @ w             # (N_U, N_U)
    p = np.abs(g) ** 2
    signal = np.diag(p)
    interference = p.sum(axis=1) - signal
    return float(np.log2(1.0 + signal / (interference + sigma2)).sum())


def design_power(design: HbfDesign, per_chain_scaling: bool = False) -> float:
    a = realize_analog(design.analog, per_chain_scaling)
    return float(np.sum(np.abs(a @ design.w) ** 2))


def normalize_power(design: HbfDesign, per_chain_scaling: bool = False) -> HbfDesign:
    """Scale the digital precoder so the transmit power equals p_max exactly."""
    rho = design_power(design, per_chain_scaling)
    if rho <= 0.0:
        raise DegenerateInputError("cannot normalize an all-zero precoder")
    return replace(design, w=design.w * np.sqrt(design.p_max / rho))


def harden_connections(p: np.ndarray) -> np.ndarray:
    """One-hot rows at the per-row argmax (lowest index wins ties)."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ParameterError("connection probabilities must be non-negative")
    if np.any(p.sum(axis=1) == 0):
        raise DegenerateInputError("a connection row is all zeros")
    s = np.zeros_like(p)
    s[np.arange(p.shape[0]), np.argmax(p, axis=1)] = 1.0
    return s


def validate_design(design: HbfDesign, per_chain_scaling: bool = False,
                    power_slack: float = 1e-9) -> None:
    validate_analog(design.analog)
    if design.w.shape[0] != design.analog.n_rf:
        raise DimensionError("digital precoder rows must match RF chain count")
    rho = design_power(design, per_chain_scaling)
    if rho > design.p_max * (1.0 + power_slack):
        raise StructureError(f"power constraint violated: {rho} > {design.p_max}")


# ----------------------------------------------------------------------
# exhaustive oracle
# ----------------------------------------------------------------------

def zf_digital(h: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Zero-forcing digital precoder on the effective channel conj(H) A."""
    return np.linalg.pinv(np.conj(h) @ a)


def _rates_for_phases(h, s, thetas, sigma2, p_max):
    """Vectorized sum-rates over a (P, n_t) batch of subarray phase vectors."""
    a = np.exp(1j * thetas)[:, :, None] * s[None, :, :]       # (P, n_t, n_rf)
    heff = np.einsum("un,pnk->puk", np.conj(h), a)
    w = np.linalg.pinv(heff)                                   # (P, n_rf, n_u)
    return _rates_for_aw(h, a, w, sigma2, p_max)


def _rates_for_aw(h, a, w, sigma2, p_max):
    aw = np.einsum("pnk,pku->pnu", a, w)
    rho = np.sum(np.abs(aw) ** 2, axis=(1, 2))
    ok = rho > 0
    scale = np.zeros_like(rho)
    scale[ok] = np.sqrt(p_max / rho[ok])
    w = w * scale[:, None, None]
    g = np.einsum("un,pnk,pkv->puv", np.conj(h), a, w)
    p = np.abs(g) ** 2
    sig = np.einsum("puu->pu", p)
    intf = p.sum(axis=2) - sig
    rates = np.log2(1.0 + sig / (intf + sigma2)).sum(axis=1)
    rates[~ok] = 0.0
    return rates, w


def _phase_combos(n_vars: int, q_bits: int) -> np.ndarray:
    grid = phase_grid(q_bits)
    mesh = np.meshgrid(*([grid] * n_vars), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)       # lex order


def brute_force_optimum(h: np.ndarray, structure: str, n_rf: int, q_bits: int,
                        sigma2: float, p_max: float = 1.0):
    """Enumerate every feasible quantized analog precoder (and, for DSA,
    every connection matrix), design the digital part by zero-forcing on
    the effective channel plus power normalization, and return the best
    ``(HbfDesign, sum_rate)``.

    The search space is capped at 2^20 analog candidates; larger spaces
    raise :class:`GuardError`.  Ties resolve to the first candidate in
    lexicographic enumeration order.
    """
    if structure not in STRUCTURES:
        raise StructureError(f"unknown structure {structure!r}")
    n_u, n_t = h.shape
    levels = 2 ** q_bits

    if structure == FC:
        n_candidates = levels ** (n_t * n_rf)
    elif structure == FSA:
        n_candidates = levels ** n_t
    else:
        n_candidates = (levels ** n_t) * (n_rf ** n_t)
    if n_candidates > BRUTE_FORCE_GUARD:
        raise GuardError(f"{n_candidates} candidates exceed the 2^20 enumeration guard")

    best_rate = -1.0
    best_design = None

    if structure == FC:
        combos = _phase_combos(n_t * n_rf, q_bits)
        s = np.ones((n_t, n_rf))
        for lo in range(0, combos.shape[0], 4096):
            chunk = combos[lo:lo + 4096].reshape(-1, n_t, n_rf)
            a = np.exp(1j * chunk)
            heff = np.einsum("un,pnk->puk", np.conj(h), a)
            w = np.linalg.pinv(heff)
            rates, w_norm = _rates_for_aw(h, a, w, sigma2, p_max)
            i = int(np.argmax(rates))
            if rates[i] > best_rate:
                best_rate = float(rates[i])
                best_design = HbfDesign(
                    AnalogPrecoder(FC, chunk[i].copy(), s, q_bits), w_norm[i].copy(), p_max)
        return best_design, best_rate

    s_list = ([squared_connection(n_t, n_rf)] if structure == FSA else
              [_assignment_matrix(assign, n_rf)
               for assign in itertools.product(range(n_rf), repeat=n_t)])
    combos = _phase_combos(n_t, q_bits)
    for s in s_list:
        rates, w_norm = _rates_for_phases(h, s, combos, sigma2, p_max)
        i = int(np.argmax(rates))
        if rates[i] > best_rate:
            best_rate = float(rates[i])
            best_design = HbfDesign(
                AnalogPrecoder(structure, combos[i].copy(), s, q_bits),
                w_norm[i].copy(), p_max)
    return best_design, best_rate


def _assignment_matrix(assign, n_rf: int) -> np.ndarray:
    s = np.zeros((len(assign), n_rf))
    s[np.arange(len(assign)), list(assign)] = 1.0
    return s
