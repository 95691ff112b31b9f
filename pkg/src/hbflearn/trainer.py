"""Unsupervised training loop, evaluation protocol, and sweeps.

Training is fully determined by (dataset, config): the master seed derives
independent streams for model initialization, the train/eval split, epoch
shuffling, per-batch pilot noise, and per-step Gumbel noise.  The network
never sees a clean channel; the loss is computed against the true channel,
which plays the role of a measurement available only during training.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import constant
from .channel import ChannelBatch, add_pilot_noise
from .errors import ConfigError, NumericError, ParameterError, TrainingAborted
from .network import (DifferentiableDesign, HbfNet, NetConfig, csi_to_input,
                      differentiable_sum_rate_loss, sample_gumbel)
from .optim import make_optimizer
from .precoding import (DSA, FC, AnalogPrecoder, HbfDesign, STRUCTURES,
                        normalize_power, realize_analog, sum_rate)
from .errors import DegenerateInputError

__all__ = ["TrainConfig", "EpochRecord", "TrainResult",
           "train", "evaluate", "extract_designs", "sweep",
           "metrics_to_csv", "SWEEP_AXES"]

# Seed-stream salts (keep stable: they define reproducibility).
_SALT_SPLIT = 101
_SALT_SHUFFLE = 102
_SALT_PILOT = 103
_SALT_GUMBEL = 104
_SALT_EVAL_PILOT = 105

SWEEP_AXES = ("tau", "qbits", "sigma2", "structure")


@dataclass(frozen=True)
class TrainConfig:
    """Everything that determines a training run besides the dataset."""
    n_t: int = 16
    n_rf: int = 4
    n_u: int = 2
    structure: str = FC
    q_bits: int | None = 4          # None = continuous phase shifters
    tau: float = 1.5
    epochs: int = 50
    batch_size: int = 250
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    optimizer: str = "adam"
    sigma2: float = 0.1             # downlink noise power (W)
    pilot_noise: float | None = None  # None = reuse sigma2
    p_max: float = 1.0
    train_split: float = 0.85
    seed: int = 0

    def validate(self):
        if not (0.0 < self.train_split < 1.0):
            raise ConfigError("train_split must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.sigma2 <= 0:
            raise ConfigError("sigma2 must be positive")
        if self.pilot_noise is not None and self.pilot_noise < 0:
            raise ConfigError("pilot_noise must be >= 0")
        if self.structure not in STRUCTURES:
            raise ConfigError(f"unknown structure {self.structure!r}")

    @property
    def pilot_noise_power(self) -> float:
        return self.sigma2 if self.pilot_noise is None else self.pilot_noise

    def net_config(self) -> NetConfig:
        return NetConfig(n_t=self.n_t, n_rf=self.n_rf, n_u=self.n_u,
                         structure=self.structure, q_bits=self.q_bits, tau=self.tau)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_sumrate: float
    eval_sumrate: float
    seconds: float


@dataclass
class TrainResult:
    model: HbfNet
    metrics: list
    train_indices: np.ndarray
    eval_indices: np.ndarray
    config: TrainConfig = None


def _check_dims(batch: ChannelBatch, config: TrainConfig):
    if batch.n_tx != config.n_t or batch.n_users != config.n_u:
        raise ConfigError(
            f"dataset dims ({batch.n_users} users, {batch.n_tx} antennas) do not match "
            f"config ({config.n_u}, {config.n_t})")


def split_indices(count: int, config: TrainConfig):
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, _SALT_SPLIT)))
    perm = rng.permutation(count)
    n_train = int(round(config.train_split * count))
    n_train = min(max(n_train, 1), count - 1)
    return perm[:n_train], perm[n_train:]


def train(batch: ChannelBatch, config: TrainConfig) -> TrainResult:
    """Train a network on the dataset; returns the model plus per-epoch
    metrics and the (disjoint) train/eval index sets.

    A non-finite loss aborts immediately with a diagnostic payload rather
    than training through the damage.
    """
    config.validate()
    _check_dims(batch, config)
    train_idx, eval_idx = split_indices(batch.count, config)
    model = HbfNet(config.net_config(), seed=config.seed)
    params = model.parameters()
    opt = make_optimizer(config.optimizer, params, lr=config.learning_rate,
                         weight_decay=config.weight_decay)
    pilot_power = config.pilot_noise_power

    metrics: list[EpochRecord] = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng(
            np.random.SeedSequence((config.seed, _SALT_SHUFFLE, epoch)))
        order = train_idx[rng.permutation(train_idx.size)]
        loss_sum = 0.0
        rate_sum = 0.0
        for bidx, lo in enumerate(range(0, order.size, config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            h = batch.h[idx]
            h_hat = add_pilot_noise(h, pilot_power,
                                    seed=(config.seed, _SALT_PILOT, epoch, bidx))
            x = constant(csi_to_input(h_hat))
            gumbel = None
            if config.structure == DSA:
                grng = np.random.default_rng(
                    np.random.SeedSequence((config.seed, _SALT_GUMBEL, epoch, bidx)))
                gumbel = sample_gumbel(grng, (idx.size, config.n_t, config.n_rf))
            try:
                design = model.forward_design(x, training=True, gumbel_noise=gumbel)
                rates, loss = differentiable_sum_rate_loss(h, design, config.sigma2,
                                                           config.p_max)
                opt.zero_grad()
                ad.backward(loss, params)
            except NumericError as e:
                raise TrainingAborted(
                    f"non-finite value during epoch {epoch}, batch {bidx}: {e}",
                    diagnostics={
                        "epoch": epoch, "batch": bidx,
                        "param_norms": {name: float(np.linalg.norm(p.data))
                                        for name, p in model.named_parameters()},
                    }) from e
            opt.step()
            loss_sum += loss.item() * idx.size
            rate_sum += float(rates.data.sum())
        eval_rates = evaluate(model, batch, config, indices=eval_idx)
        metrics.append(EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / order.size,
            train_sumrate=rate_sum / order.size,
            eval_sumrate=float(eval_rates.mean()),
            seconds=time.perf_counter() - t0,
        ))
    return TrainResult(model=model, metrics=metrics,
                       train_indices=train_idx, eval_indices=eval_idx, config=config)


def _eval_csi(batch: ChannelBatch, indices, pilot_power: float, seed: int) -> np.ndarray:
    """Noisy CSI for evaluation with per-sample noise seeds, so a sample's
    input is the same whether it is evaluated alone or in a batch."""
    out = np.empty((indices.size, batch.n_tx, batch.n_users), dtype=np.complex128)
    for k, i in enumerate(indices):
        out[k] = add_pilot_noise(batch.h[int(i)], pilot_power,
                                 seed=(seed, _SALT_EVAL_PILOT, int(i)))
    return out


def extract_designs(model: HbfNet, h_hat: np.ndarray, q_bits=...) -> list[HbfDesign]:
    """Run the network in evaluation mode (inference batch norm, hardened
    connections, quantized phases) and materialize one normalized
    :class:`HbfDesign` per sample."""
    cfg = model.config
    q = cfg.q_bits if q_bits is ... else q_bits
    x = constant(csi_to_input(h_hat))
    design = model.forward_design(x, training=False, hard=True, q_bits=q)
    return _designs_from_nodes(design, cfg, q)


def _designs_from_nodes(design: DifferentiableDesign, cfg, q) -> list[HbfDesign]:
    theta = design.theta.data
    w = design.w_re.data + 1j * design.w_im.data
    s = design.s.data
    out = []
    for i in range(theta.shape[0]):
        phases = theta[i] if cfg.structure == FC else theta[i].reshape(-1)
        analog = AnalogPrecoder(cfg.structure, phases, s[i], q)
        d = HbfDesign(analog, w[i], 1.0)
        out.append(d)
    return out


def evaluate(model: HbfNet, batch: ChannelBatch, config: TrainConfig,
             indices=None, q_bits=..., pilot_noise: float | None = None) -> np.ndarray:
    """Per-sample sum-rates of the hardened, quantized, power-normalized
    designs against the true channels.

    ``q_bits`` overrides the configured quantization at evaluation time
    (e.g. to re-evaluate a continuous-phase model under a quantizer);
    ``pilot_noise`` overrides the CSI noise power.
    """
    config.validate()
    _check_dims(batch, config)
    if indices is None:
        indices = np.arange(batch.count)
    indices = np.asarray(indices)
    power = config.pilot_noise_power if pilot_noise is None else pilot_noise
    h_hat = _eval_csi(batch, indices, power, config.seed)
    designs = extract_designs(model, h_hat, q_bits=q_bits)
    rates = np.empty(indices.size)
    for k, d in enumerate(designs):
        d = replace(d, p_max=config.p_max)
        try:
            d = normalize_power(d)
            rates[k] = sum_rate(batch.h[int(indices[k])], realize_analog(d.analog),
                                d.w, config.sigma2)
        except DegenerateInputError:
            rates[k] = 0.0
    return rates


def metrics_to_csv(metrics: list) -> str:
    lines = ["epoch,train_loss,train_sumrate,eval_sumrate,seconds"]
    for m in metrics:
        lines.append(f"{m.epoch},{m.train_loss!r},{m.train_sumrate!r},"
                     f"{m.eval_sumrate!r},{m.seconds:.3f}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------
# sweeps
# ----------------------------------------------------------------------

def _apply_axis(config: TrainConfig, axis: str, value):
    if axis == "tau":
        return replace(config, tau=float(value))
    if axis == "qbits":
        q = None if value in (None, "continuous") else int(value)
        return replace(config, q_bits=q)
    if axis == "sigma2":
        return replace(config, sigma2=float(value))
    if axis == "structure":
        return replace(config, structure=str(value))
    raise ParameterError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def sweep(axis: str, values, base_config: TrainConfig, batch: ChannelBatch):
    """One train+evaluate per axis value on a shared dataset and seed.

    Returns a list of row dicts with the axis value, final-epoch training
    sum-rate, evaluation sum-rate, and two reference columns (fully digital
    ZF and the random feasible baseline) computed on the evaluation split.
    """
    from .baselines import fdp_sum_rate, fdp_zf, random_precoder

    if not values:
        raise ParameterError("sweep needs at least one value")
    rows = []
    for value in values:
        cfg = _apply_axis(base_config, axis, value)
        result = train(batch, cfg)
        eval_idx = result.eval_indices
        eval_rates = evaluate(result.model, batch, cfg, indices=eval_idx)
        fdp_rates = []
        rnd_rates = []
        q_eff = cfg.q_bits if cfg.q_bits is not None else 6
        for i in eval_idx:
            h = batch.h[int(i)]
            fdp_rates.append(fdp_sum_rate(h, fdp_zf(h, cfg.sigma2, cfg.p_max), cfg.sigma2))
            rnd = random_precoder(cfg.structure, cfg.n_t, cfg.n_rf, cfg.n_u,
                                  q_eff, seed=int(i), p_max=cfg.p_max)
            rnd_rates.append(sum_rate(h, realize_analog(rnd.analog), rnd.w, cfg.sigma2))
        rows.append({
            "value": value,
            "train_sumrate": result.metrics[-1].train_sumrate if result.metrics else float("nan"),
            "eval_sumrate": float(eval_rates.mean()),
            "fdp_sumrate": float(np.mean(fdp_rates)),
            "random_sumrate": float(np.mean(rnd_rates)),
        })
    return rows
