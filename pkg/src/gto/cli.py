"""Command-line entry point: gen-data, train, rollout, bench-flops, inspect."""

import argparse
import logging
import os
import sys

import numpy as np

from . import autodiff as ad
from .datagen import KINDS, SyntheticProblem, build_dataset, load_dataset, to_sample
from .errors import ConfigError, NumericError, ParseError, UsageError, ValidationError
from .fileformat import MeshFieldFile, read_meshfield, write_meshfield
from .model import (GTOModel, ModelConfig, count_flops, load_checkpoint, mp_scheme_reduction,
                    save_checkpoint, write_tensor_records)
from .training import (AdamW, TrainConfig, evaluate_steady, evaluate_transient, train_steady,
                       train_transient, write_history_csv)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
KIND_ALIASES = {"diffusion": "graph_diffusion", "darcy": "steady_darcy_like"}

# Reference mesh used by ``bench-flops --reference``.
REFERENCE_NODES = 1885
REFERENCE_EDGES_PER_NODE = 3
REFERENCE_STEPS = 5


def _seed_default():
    env = os.environ.get("GTO_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"GTO_SEED must be an integer, got {env!r}")


def _defaults(command):
    seed = _seed_default()
    common = {"out": "out", "seed": seed, "workers": 1, "precision": "float32"}
    model = {"L": 4, "C": 128, "M": 0, "H": 4, "delta": 4, "rho": 1.0, "edge_scheme": "auto",
             "onehot": False}
    table = {
        "gen-data": {"kind": "diffusion", "n": 64, "n_nodes": 300, "steps": 30, "kappa": 1.0,
                     "dt": 0.1, "max_freq": 0.0, "train_fraction": 0.8},
        "train": dict(model, manifest=None, epochs=100, lr=0.0, weight_decay=-1.0, rollout_steps=5,
                      batch_size=8, resume=None),
        "rollout": {"checkpoint": None, "sample": None, "T": 10},
        "bench-flops": dict(model, N=[1000, 3000, 10000, 30000, 100000], edges_per_node=3.0,
                            steps=1, c_in=3, c_out=3, global_dim=0, reference=False),
        "inspect": {"checkpoint": None, "sample": None},
    }
    return dict(common, **table[command])


def _parse_value(key, text, default):
    if isinstance(default, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, list):
        return [int(float(x)) for x in text.replace(",", " ").split()]
    return text.strip()


def read_config_file(path, defaults):
    """Parse ``key=value`` lines (``#`` comments allowed); unknown keys are rejected."""
    out = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        key, _, val = line.partition("=")
        key = key.strip().replace("-", "_")
        if key not in defaults:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}")
        try:
            out[key] = _parse_value(key, val, defaults[key])
        except ValueError as exc:
            raise ConfigError(f"{path}:{n}: bad value for {key}: {exc}")
    return out


def resolve_config(command, args):
    """Merge defaults < config file < explicit flags."""
    cfg = _defaults(command)
    if args.config:
        cfg.update(read_config_file(args.config, cfg))
    for k in cfg:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def _print_config(command, cfg):
    print(f"# resolved config for {command}")
    for k in sorted(cfg):
        print(f"#   {k}={cfg[k]}")


def _model_flags(p):
    p.add_argument("--L", type=int)
    p.add_argument("--C", type=int)
    p.add_argument("--M", type=int, help="query count (0 means M = C)")
    p.add_argument("--H", type=int)
    p.add_argument("--delta", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--edge-scheme", dest="edge_scheme", choices=["auto", "flux", "bidirectional"])
    p.add_argument("--onehot", action="store_const", const=True, help="one-hot node types")


def build_parser():
    parser = argparse.ArgumentParser(prog="gto", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value file; flags override it")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--precision", choices=["float32", "float64"])

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(p)
    p.add_argument("--kind", choices=sorted(set(KIND_ALIASES) | set(KINDS)))
    p.add_argument("--n", type=int)
    p.add_argument("--n-nodes", dest="n_nodes", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--kappa", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--max-freq", dest="max_freq", type=float,
                   help="field wave-number cap in units of pi (0 picks the kind default)")
    p.add_argument("--train-fraction", dest="train_fraction", type=float)

    p = sub.add_parser("train", help="train a model on a dataset manifest")
    common(p)
    _model_flags(p)
    p.add_argument("--manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="base learning rate (0 picks the mode default)")
    p.add_argument("--weight-decay", dest="weight_decay", type=float,
                   help="decoupled weight decay (negative picks the mode default)")
    p.add_argument("--rollout-steps", dest="rollout_steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("rollout", help="autoregressive prediction from a checkpoint")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--sample")
    p.add_argument("--T", type=int)

    p = sub.add_parser("bench-flops", help="analytic FLOPs table and linear fit")
    common(p)
    _model_flags(p)
    p.add_argument("--N", type=int, nargs="+")
    p.add_argument("--edges-per-node", dest="edges_per_node", type=float,
                   help="undirected edges per node")
    p.add_argument("--steps", type=int)
    p.add_argument("--c-in", dest="c_in", type=int)
    p.add_argument("--c-out", dest="c_out", type=int)
    p.add_argument("--global-dim", dest="global_dim", type=int)
    p.add_argument("--reference", action="store_const", const=True,
                   help="also report the edge-sampling ratio and message-passing saving")

    p = sub.add_parser("inspect", help="dump attention maps and query correlations")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--sample")
    return parser


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg):
    kind = KIND_ALIASES.get(cfg["kind"], cfg["kind"])
    if cfg["n"] < 2:
        raise ConfigError("--n must be at least 2")
    problem = SyntheticProblem(kind=kind, n_nodes=cfg["n_nodes"], n_steps=cfg["steps"],
                               kappa=cfg["kappa"], dt=cfg["dt"], max_freq=cfg["max_freq"] or None)
    info = build_dataset(problem, cfg["n"], cfg["out"], cfg["seed"], cfg["train_fraction"])
    print(f"manifest: {info.manifest}")
    print(f"train samples: {len(info.train)}  test samples: {len(info.test)}")
    return EXIT_OK


def _model_config(cfg, kind):
    transient = kind == "graph_diffusion"
    return ModelConfig(L=cfg["L"], C=cfg["C"], M=cfg["M"] or None, H=cfg["H"], delta=cfg["delta"],
                       rho=cfg["rho"], mode="transient" if transient else "steady", d=2,
                       c_in=1, c_out=1, global_dim=1 if transient else 0,
                       node_type_onehot=bool(cfg["onehot"]), edge_scheme=cfg["edge_scheme"],
                       seed=cfg["seed"])


def cmd_train(cfg):
    if not cfg["manifest"]:
        raise ConfigError("--manifest is required")
    data = load_dataset(cfg["manifest"])
    optimizer = AdamW()
    if cfg["resume"]:
        model = load_checkpoint(cfg["resume"], optimizer)
        print(f"resumed from {cfg['resume']} at optimizer step {optimizer.step}")
    else:
        model = GTOModel(_model_config(cfg, data.kind), data.stats)
    if (model.config.mode == "transient") != (data.kind == "graph_diffusion"):
        raise UsageError("checkpoint mode does not match the dataset kind")
    tc = TrainConfig(epochs=cfg["epochs"], base_lr=cfg["lr"] or None,
                     weight_decay=None if cfg["weight_decay"] < 0 else cfg["weight_decay"],
                     rollout_steps=cfg["rollout_steps"], batch_size=cfg["batch_size"],
                     seed=cfg["seed"])
    os.makedirs(cfg["out"], exist_ok=True)
    ckpt = os.path.join(cfg["out"], "checkpoint.gto")
    trainer = train_transient if model.config.mode == "transient" else train_steady
    try:
        res = trainer(data.train, model, tc, val_samples=data.test, optimizer=optimizer,
                      checkpoint_path=ckpt)
    except NumericError as exc:
        write_history_csv(os.path.join(cfg["out"], "history.csv"), getattr(exc, "history", []))
        print(f"numeric failure: {exc}; last good checkpoint: {ckpt}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(ckpt, model, res.optimizer)
    write_history_csv(os.path.join(cfg["out"], "history.csv"), res.history)
    final = res.history[-1]["val_epsilon"] if res.history else float("nan")
    print(f"checkpoint: {ckpt}")
    print(f"optimizer step: {res.optimizer.step}")
    print(f"final val epsilon: {final!r}")
    return EXIT_OK


def cmd_rollout(cfg):
    if not cfg["checkpoint"] or not cfg["sample"]:
        raise ConfigError("--checkpoint and --sample are required")
    if cfg["T"] < 0:
        raise ConfigError("--T must be non-negative")
    model = load_checkpoint(cfg["checkpoint"])
    if model.config.mode != "transient":
        raise UsageError("rollout needs a transient checkpoint")
    mf = read_meshfield(cfg["sample"])
    sample = to_sample(mf, "graph_diffusion")
    T = cfg["T"]
    dt = float(sample.conds[1, -1] - sample.conds[0, -1]) if sample.num_steps >= 1 else 1.0

    def cond(t):
        if t - 1 <= sample.num_steps:
            return sample.conds[t - 1]
        row = sample.conds[-1].copy()
        row[-1] += dt * (t - 1 - sample.num_steps)
        return row

    states = [sample.states[0]]
    if T > 0:
        states += model.rollout(mf.mesh, sample.states[0], cond, T, bc=sample.bc)
    glob = np.stack([cond(t + 1) for t in range(T + 1)])
    os.makedirs(cfg["out"], exist_ok=True)
    out_path = os.path.join(cfg["out"], "rollout.gtmf")
    write_meshfield(out_path, MeshFieldFile(mf.mesh, np.stack(states), glob))
    eps_path = os.path.join(cfg["out"], "rollout_eps.csv")
    with open(eps_path, "w") as fh:
        fh.write("step,rel_l2\n")
        for t in range(1, min(T, sample.num_steps) + 1):
            truth = sample.states[t]
            err = np.linalg.norm(states[t] - truth) / (np.linalg.norm(truth) + 1e-12)
            fh.write(f"{t},{err!r}\n")
            print(f"step {t:4d}  rel_l2 {err:.6f}")
    print(f"predictions: {out_path}")
    return EXIT_OK


def linear_fit(x, y):
    """Least-squares slope, intercept and coefficient of determination."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    A = np.stack([x, np.ones_like(x)], axis=1)
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + icpt)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(icpt), float(r2)


def reference_edge_sampling(config):
    """FLOPs ratio of full two-sided edges to the one-sided set, and the relative saving."""
    undirected = REFERENCE_EDGES_PER_NODE * REFERENCE_NODES
    full = count_flops(config, REFERENCE_NODES, 2 * undirected, REFERENCE_STEPS)
    half = count_flops(config, REFERENCE_NODES, undirected, REFERENCE_STEPS)
    return full / half, mp_scheme_reduction(config, REFERENCE_NODES, undirected, REFERENCE_STEPS)


def cmd_bench_flops(cfg):
    config = ModelConfig(L=cfg["L"], C=cfg["C"], M=cfg["M"] or None, H=cfg["H"], delta=cfg["delta"],
                         c_in=cfg["c_in"], c_out=cfg["c_out"], global_dim=cfg["global_dim"],
                         mode="transient" if cfg["c_in"] == cfg["c_out"] else "steady")
    rows = []
    print(f"{'N':>10} {'edges':>10} {'GFLOPs':>12}")
    for n in cfg["N"]:
        e = int(round(cfg["edges_per_node"] * n))
        f = count_flops(config, n, e, cfg["steps"])
        rows.append((n, f))
        print(f"{n:>10d} {e:>10d} {f / 1e9:>12.4f}")
    if len(rows) >= 2:
        slope, icpt, r2 = linear_fit([r[0] for r in rows], [r[1] for r in rows])
        print(f"slope {slope:.6g} FLOPs/node  intercept {icpt:.6g}  R^2 {r2:.8f}")
    if cfg["reference"]:
        ratio, saving = reference_edge_sampling(config)
        print(f"edge sampling 100%/50% FLOPs ratio {ratio:.4f} (reference 1.4875)")
        print(f"one-sided message passing saving {100 * saving:.2f}% (reference 32.7%)")
    return EXIT_OK


def query_correlation(Q):
    """Pearson correlation between query rows and the mean absolute off-diagonal entry."""
    Q = np.asarray(Q, dtype=np.float64)
    if Q.shape[0] == 1:
        return np.ones((1, 1)), 0.0
    corr = np.corrcoef(Q)
    off = corr[~np.eye(len(corr), dtype=bool)]
    return corr, float(np.mean(np.abs(off)))


def cmd_inspect(cfg):
    if not cfg["checkpoint"] or not cfg["sample"]:
        raise ConfigError("--checkpoint and --sample are required")
    model = load_checkpoint(cfg["checkpoint"])
    mf = read_meshfield(cfg["sample"])
    kind = "graph_diffusion" if model.config.mode == "transient" else "steady_darcy_like"
    if mf.channels != (1 if kind == "graph_diffusion" else 2):
        raise UsageError("sample does not match the checkpoint's mode")
    sample = to_sample(mf, kind)
    from .encoder import FieldFrame
    if kind == "graph_diffusion":
        frame = FieldFrame(sample.states[0], sample.conds[0, :-1], sample.conds[0, -1], mf.mesh)
    else:
        frame = FieldFrame(sample.inputs, sample.cond[:-1], sample.cond[-1], mf.mesh)
    maps = model.attention_maps(mf.mesh, frame)
    os.makedirs(cfg["out"], exist_ok=True)
    records, lines = [], []
    for l, layer in enumerate(maps):
        for h, m in enumerate(layer):
            records.append((f"layer{l}.head{h}.query_to_node", m["query_to_node"]))
    for l, blk in enumerate(model.blocks):
        corr, off = query_correlation(blk.queries.data)
        records.append((f"layer{l}.query_correlation", corr))
        lines.append(f"layer {l}: M={corr.shape[0]} mean |off-diagonal| correlation {off:.6f}")
    path = os.path.join(cfg["out"], "inspect.bin")
    with open(path, "wb") as fh:
        write_tensor_records(fh, records)
    with open(os.path.join(cfg["out"], "inspect.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"dump: {path}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "rollout": cmd_rollout,
            "bench-flops": cmd_bench_flops, "inspect": cmd_inspect}


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
        _print_config(args.command, cfg)
        ad.set_precision(cfg["precision"])
        if cfg["workers"] < 1:
            raise ConfigError("--workers must be at least 1")
        return COMMANDS[args.command](cfg)
    except (ConfigError, UsageError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ParseError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        ad.set_precision("float32")


if __name__ == "__main__":
    sys.exit(main())
