"""Command-line interface: dataset generation, training, evaluation,
classical baselines, and hyperparameter sweeps.

Exit codes: 0 success, 2 usage/config error, 3 numeric abort during
training, 4 I/O failure.  All outputs are written atomically (temp file +
rename) and every command is deterministic given its flags and seeds.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import struct
import sys

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

_MODEL_MAGIC = b"HBFM"
_MODEL_VERSION = 1

# Keys allowed in an experiment config file: every TrainConfig field plus
# dataset/channel/output settings.
_TRAIN_KEYS = ("n_t", "n_rf", "n_u", "structure", "q_bits", "tau", "epochs",
               "batch_size", "learning_rate", "weight_decay", "optimizer",
               "sigma2", "pilot_noise", "p_max", "train_split", "seed")
_EXTRA_KEYS = ("dataset", "out_model", "out_metrics",
               "channel_clusters", "channel_rays_per_cluster",
               "channel_angle_spread_deg")
_ALL_KEYS = _TRAIN_KEYS + _EXTRA_KEYS


def _apply_thread_cap():
    cap = os.environ.get("HBF_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def _atomic_write_text(path: str, text: str):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def _atomic_write_bytes(path: str, blob: bytes):
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


# ----------------------------------------------------------------------
# experiment config files
# ----------------------------------------------------------------------

def load_config_file(path: str) -> dict:
    from .errors import ConfigError

    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    for key in doc:
        if key not in _ALL_KEYS:
            raise ConfigError(f"{path}: unknown config key {key!r}")
    return doc


def make_train_config(doc: dict):
    from .errors import ConfigError
    from .trainer import TrainConfig

    kwargs = {}
    for key in _TRAIN_KEYS:
        if key in doc:
            kwargs[key] = doc[key]
    if kwargs.get("q_bits") == "continuous":
        kwargs["q_bits"] = None
    try:
        cfg = TrainConfig(**kwargs)
    except TypeError as e:
        raise ConfigError(f"bad config field: {e}") from e
    cfg.validate()
    return cfg


def config_to_doc(cfg) -> dict:
    from dataclasses import asdict
    return asdict(cfg)


def _canonical_config_bytes(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _parse_overrides(pairs):
    from .errors import ConfigError

    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        if key not in _ALL_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw          # bare strings like structure=fc
    return out


# ----------------------------------------------------------------------
# model files (HBFM)
#
#   magic "HBFM" | version u32 | sha256(config json) 32 bytes
#   | config_len u32 | config json utf-8
#   | entry_count u32 | entries: name_len u16, name, ndim u8,
#     dims u32 * ndim, f32 little-endian data
#
# Entries cover all parameters plus batch-norm running statistics, so a
# loaded model reproduces forward outputs to f32 precision.
# ----------------------------------------------------------------------

def save_model(path: str, model, train_config) -> None:
    import numpy as np

    doc = config_to_doc(train_config)
    cfg_bytes = _canonical_config_bytes(doc)
    parts = [_MODEL_MAGIC, struct.pack("<I", _MODEL_VERSION),
             hashlib.sha256(cfg_bytes).digest(),
             struct.pack("<I", len(cfg_bytes)), cfg_bytes]
    items = model.state_items()
    parts.append(struct.pack("<I", len(items)))
    for name, arr in items:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    _atomic_write_bytes(path, b"".join(parts))


def load_model(path: str):
    """Read an HBFM file; returns ``(model, train_config)``."""
    import numpy as np

    from .errors import FormatError
    from .network import HbfNet

    with open(path, "rb") as f:
        raw = f.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise FormatError(f"{path}: truncated model file")
        out = raw[off:off + n]
        off += n
        return out

    if take(4) != _MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {_MODEL_MAGIC!r}")
    (version,) = struct.unpack("<I", take(4))
    if version != _MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model version {version}")
    digest = take(32)
    (cfg_len,) = struct.unpack("<I", take(4))
    cfg_bytes = take(cfg_len)
    if hashlib.sha256(cfg_bytes).digest() != digest:
        raise FormatError(f"{path}: config digest mismatch")
    doc = json.loads(cfg_bytes.decode("utf-8"))
    cfg = make_train_config(doc)

    (count,) = struct.unpack("<I", take(4))
    items = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n_vals = 1
        for d in dims:
            n_vals *= d
        data = np.frombuffer(take(4 * n_vals), dtype="<f4").astype(np.float64)
        items[name] = data.reshape(dims)
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes after model payload")

    model = HbfNet(cfg.net_config(), seed=cfg.seed)
    model.load_state(items)
    return model, cfg


# ----------------------------------------------------------------------
# result CSV helpers
# ----------------------------------------------------------------------

def rates_csv(rates) -> str:
    import numpy as np

    lines = ["sample_index,sumrate_bps_hz"]
    for i, r in enumerate(rates):
        lines.append(f"{i},{float(r)!r}")
    lines.append(f"mean,{float(np.mean(rates))!r}")
    lines.append(f"std,{float(np.std(rates))!r}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .channel import ChannelModelParams, generate_batch, write_dataset

    if args.count < 1:
        print("error: --count must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    params = ChannelModelParams(n_clusters=args.clusters,
                                rays_per_cluster=args.rays,
                                angle_spread_deg=args.angle_spread,
                                seed=args.seed)
    params.validate()
    batch = generate_batch(params, args.nt, args.nu, args.count)
    write_dataset(args.out, batch)
    print(f"wrote {args.count} channels (N_U={args.nu}, N_T={args.nt}, "
          f"seed={args.seed}) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .channel import read_dataset
    from .errors import ConfigError
    from .trainer import metrics_to_csv, train

    doc = load_config_file(args.config)
    doc.update(_parse_overrides(args.set))
    if args.dataset:
        doc["dataset"] = args.dataset
    if args.out_model:
        doc["out_model"] = args.out_model
    if args.metrics:
        doc["out_metrics"] = args.metrics
    for key in ("dataset", "out_model", "out_metrics"):
        if not doc.get(key):
            raise ConfigError(f"missing required config value {key!r}")
    cfg = make_train_config(doc)

    batch = read_dataset(doc["dataset"])
    result = train(batch, cfg)
    save_model(doc["out_model"], result.model, cfg)
    _atomic_write_text(doc["out_metrics"], metrics_to_csv(result.metrics))
    # Echo the effective config next to the model output for provenance.
    echo = os.path.splitext(doc["out_model"])[0] + ".config.json"
    _atomic_write_text(echo, json.dumps(doc, sort_keys=True, indent=2) + "\n")
    final = result.metrics[-1] if result.metrics else None
    if final:
        print(f"trained {cfg.structure} for {cfg.epochs} epochs: "
              f"eval sum-rate {final.eval_sumrate:.4f} bit/s/Hz")
    print(f"model -> {doc['out_model']}")
    print(f"metrics -> {doc['out_metrics']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .channel import read_dataset
    from .errors import ConfigError
    from .trainer import evaluate

    model, cfg = load_model(args.model)
    batch = read_dataset(args.data)
    if batch.n_tx != cfg.n_t or batch.n_users != cfg.n_u:
        raise ConfigError(
            f"dataset dims (N_U={batch.n_users}, N_T={batch.n_tx}) do not match "
            f"model (N_U={cfg.n_u}, N_T={cfg.n_t})")
    q_bits = ...
    if args.qbits is not None:
        q_bits = None if args.qbits == "continuous" else int(args.qbits)
    rates = evaluate(model, batch, cfg, q_bits=q_bits, pilot_noise=args.pilot_noise)
    _atomic_write_text(args.out, rates_csv(rates))
    print(f"evaluated {batch.count} samples: mean {rates.mean():.4f} bit/s/Hz -> {args.out}")
    return EXIT_OK


_BASELINES = ("zf-fdp", "omp", "pe-altmin-ls", "fsa-altmin", "dsa-greedy", "random")


def cmd_baseline(args) -> int:
    import numpy as np

    from .baselines import (dsa_greedy, fdp_sum_rate, fdp_zf, fsa_altmin,
                            omp_hbf, pe_altmin_fc, random_precoder,
                            steering_codebook)
    from .channel import read_dataset
    from .precoding import realize_analog, squared_connection, sum_rate

    if args.method not in _BASELINES:
        print(f"error: unknown method {args.method!r}; valid methods: "
              f"{', '.join(_BASELINES)}", file=sys.stderr)
        return EXIT_USAGE
    batch = read_dataset(args.data)
    n_u, n_t = batch.n_users, batch.n_tx
    sigma2, p_max, q = args.sigma2, args.pmax, args.qbits
    n_rf = args.nrf
    codebook = steering_codebook(n_t) if args.method == "omp" else None
    s_fsa = squared_connection(n_t, n_rf) if args.method == "fsa-altmin" else None

    rates = np.empty(batch.count)
    for i in range(batch.count):
        h = batch.h[i]
        if args.method == "zf-fdp":
            rates[i] = fdp_sum_rate(h, fdp_zf(h, sigma2, p_max), sigma2)
            continue
        if args.method == "random":
            d = random_precoder(args.structure, n_t, n_rf, n_u, q, seed=args.seed + i,
                                p_max=p_max)
        elif args.method == "dsa-greedy":
            d, _ = dsa_greedy(h, n_rf, sigma2, p_max, q, passes=args.passes)
        else:
            u_opt = fdp_zf(h, sigma2, p_max).u
            if args.method == "omp":
                d, _ = omp_hbf(u_opt, codebook, n_rf, q, p_max)
            elif args.method == "pe-altmin-ls":
                d, _ = pe_altmin_fc(u_opt, n_rf, q, iters=args.iters, p_max=p_max)
            else:
                d, _ = fsa_altmin(u_opt, s_fsa, q, iters=args.iters, p_max=p_max)
        rates[i] = sum_rate(h, realize_analog(d.analog), d.w, sigma2)
    _atomic_write_text(args.out, rates_csv(rates))
    print(f"{args.method}: mean {rates.mean():.4f} bit/s/Hz over "
          f"{batch.count} samples -> {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .channel import read_dataset
    from .errors import ConfigError
    from .trainer import SWEEP_AXES, sweep

    if args.axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {args.axis!r}; expected one of {SWEEP_AXES}")
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        print("error: --values must list at least one value", file=sys.stderr)
        return EXIT_USAGE
    if args.axis in ("tau", "sigma2"):
        values = [float(v) for v in values]
    elif args.axis == "qbits":
        values = [v if v == "continuous" else int(v) for v in values]

    doc = load_config_file(args.config)
    doc.update(_parse_overrides(args.set))
    if args.dataset:
        doc["dataset"] = args.dataset
    if not doc.get("dataset"):
        raise ConfigError("missing required config value 'dataset'")
    cfg = make_train_config(doc)
    batch = read_dataset(doc["dataset"])

    rows = sweep(args.axis, values, cfg, batch)
    lines = ["axis,value,train_sumrate,eval_sumrate,fdp_sumrate,random_sumrate"]
    for row in rows:
        lines.append(f"{args.axis},{row['value']},{row['train_sumrate']!r},"
                     f"{row['eval_sumrate']!r},{row['fdp_sumrate']!r},"
                     f"{row['random_sumrate']!r}")
    _atomic_write_text(args.out, "\n".join(lines) + "\n")
    print(f"swept {args.axis} over {values} -> {args.out}")
    return EXIT_OK


# ----------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hbflearn",
                                description="Hybrid beamforming: unsupervised "
                                            "training and classical baselines.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic channel dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--nt", type=int, default=16)
    g.add_argument("--nu", type=int, default=2)
    g.add_argument("--clusters", type=int, default=4)
    g.add_argument("--rays", type=int, default=5)
    g.add_argument("--angle-spread", type=float, default=7.5)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a network from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--dataset", help="override the config's dataset path")
    t.add_argument("--out-model", help="override the config's model output path")
    t.add_argument("--metrics", help="override the config's metrics CSV path")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained model on a dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--qbits", help="override quantization bits (int or 'continuous')")
    e.add_argument("--pilot-noise", type=float, help="override CSI noise power")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("baseline", help="run a classical precoding baseline")
    b.add_argument("--method", required=True,
                   help=f"one of: {', '.join(_BASELINES)}")
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--nrf", type=int, default=4)
    b.add_argument("--qbits", type=int, default=4)
    b.add_argument("--sigma2", type=float, default=0.1)
    b.add_argument("--pmax", type=float, default=1.0)
    b.add_argument("--iters", type=int, default=20)
    b.add_argument("--passes", type=int, default=2)
    b.add_argument("--structure", default="fc",
                   help="structure for the random baseline")
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_baseline)

    s = sub.add_parser("sweep", help="train+evaluate over an axis of values")
    s.add_argument("--axis", required=True, help="tau | qbits | sigma2 | structure")
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--config", required=True)
    s.add_argument("--dataset", help="override the config's dataset path")
    s.add_argument("--out", required=True)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)

    from .errors import (ConfigError, FormatError, HbfError, ParameterError,
                         TrainingAborted)

    try:
        return args.func(args)
    except TrainingAborted as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        if e.diagnostics:
            print(f"diagnostics: {json.dumps(e.diagnostics, default=str)}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ParameterError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except HbfError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
