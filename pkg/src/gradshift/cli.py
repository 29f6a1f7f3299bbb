"""Experiment driver: config parsing, schedule runs with deterministic
artifacts (metrics.csv, report.json, checkpoints), and theory/transport
subcommands emitting JSON.

Outputs are byte-reproducible per config: metrics rows are merged in run-id
order, floats print with 9 significant digits, and files land via
write-to-temp-then-rename.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import hashlib
import io
import json
import os
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import domains as dom
from . import models as md
from . import objectives as ob
from . import theory as th
from . import transport as tp

CHECKPOINT_MAGIC = b"GSHIFT01"
CHECKPOINT_VERSION = 1
METRICS_HEADER = ("run_id,seed,schedule,t,epoch,class_loss,alignment,gp,"
                  "target_acc,wall_ms")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config file: line-oriented `key = value` with flat [tables]

def parse_config_text(text: str) -> dict:
    """Parse the key = value subset: quoted strings, ints, floats, booleans,
    flat tables, arrays of scalars. Comments start with #."""
    out: dict = {}
    table = out
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"line {ln}: malformed table header {raw!r}")
            name = line[1:-1].strip()
            if not name or "." in name:
                raise ConfigError(f"line {ln}: only flat tables are supported")
            table = out.setdefault(name, {})
            if not isinstance(table, dict):
                raise ConfigError(f"line {ln}: duplicate key {name!r}")
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected key = value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if not key or not val:
            raise ConfigError(f"line {ln}: expected key = value, got {raw!r}")
        if key in table:
            raise ConfigError(f"line {ln}: duplicate key {key!r}")
        table[key] = _parse_value(val, ln)
    return out


def _parse_value(val: str, ln: int):
    if val.startswith("["):
        if not val.endswith("]"):
            raise ConfigError(f"line {ln}: unterminated array")
        inner = val[1:-1].strip()
        if not inner:
            return []
        return [_parse_scalar(p.strip(), ln) for p in inner.split(",")]
    return _parse_scalar(val, ln)


def _parse_scalar(val: str, ln: int):
    if val.startswith('"') and val.endswith('"') and len(val) >= 2:
        return val[1:-1]
    if val == "true":
        return True
    if val == "false":
        return False
    try:
        return int(val)
    except ValueError:
        pass
    try:
        return float(val)
    except ValueError:
        raise ConfigError(f"line {ln}: cannot parse value {val!r}") from None


_TOP_KEYS = {"output_dir", "seeds", "schedules", "holdout"}
_GENERATOR_KEYS = {"kind", "T", "n", "seed", "total_degrees", "noise_sigma",
                   "shift_per_step", "sigma", "class_means", "path"}
_TRAIN_KEYS = {"lambda", "gp_factor", "k_critic", "lr_model", "lr_critic",
               "batch_size", "epochs_per_domain", "optimizer",
               "labeled_target", "loss", "loss_bound"}
_MODEL_KEYS = {"feature_dim", "hidden", "critic_hidden", "summarizer_hidden",
               "summarizer_layers"}


@dataclass
class ExperimentConfig:
    output_dir: str
    seeds: list[int]
    schedules: list[str]
    holdout: float
    generator: dict
    train: dict
    model: dict
    digest: bytes = b""

    @property
    def loss_spec(self) -> ob.LossSpec:
        return ob.LossSpec(self.train.get("loss", "cross_entropy_bounded"),
                           bound=float(self.train.get("loss_bound", 5.0)))

    def train_config(self, seed: int) -> ob.TrainConfig:
        t = self.train
        return ob.TrainConfig(
            lam=float(t.get("lambda", 1.0)),
            gp_factor=float(t.get("gp_factor", 5.0)),
            k_critic=int(t.get("k_critic", 5)),
            lr_model=float(t.get("lr_model", 1e-3)),
            lr_critic=float(t.get("lr_critic", 5e-4)),
            batch_size=int(t.get("batch_size", 64)),
            epochs_per_domain=int(t.get("epochs_per_domain", 40)),
            seed=seed,
            optimizer=t.get("optimizer", "adam"))

    def model_spec(self) -> ob.ModelSpec:
        m = self.model
        return ob.ModelSpec(
            feature_dim=int(m.get("feature_dim", 8)),
            hidden=int(m.get("hidden", 16)),
            critic_hidden=int(m.get("critic_hidden", 16)),
            summarizer_hidden=int(m.get("summarizer_hidden", 32)),
            summarizer_layers=int(m.get("summarizer_layers", 1)))

    def sequence_for(self, run_seed: int) -> dom.DomainSequence:
        g = dict(self.generator)
        kind = g.pop("kind")
        base_seed = int(g.pop("seed", 0))
        data_seed = dc.substream(base_seed, "data", run_seed)
        if kind == "rotating_moons":
            return dom.make_rotating_moons(
                int(g.pop("T")), int(g.pop("n")),
                total_degrees=float(g.pop("total_degrees", 120.0)),
                noise_sigma=float(g.pop("noise_sigma", 0.1)), seed=data_seed)
        if kind == "shifting_gaussians":
            means = g.pop("class_means", [-2.0, 2.0])
            means = [[float(v)] for v in means]
            return dom.make_shifting_gaussians(
                int(g.pop("T")), int(g.pop("n")),
                shift_per_step=float(g.pop("shift_per_step", 0.3)),
                class_means=means, sigma=float(g.pop("sigma", 0.5)),
                seed=data_seed)
        if kind == "file":
            return dom.load_sequence(g.pop("path"))
        raise ConfigError(f"generator.kind: unknown kind {kind!r}")


def validate_config(data: dict, digest: bytes) -> ExperimentConfig:
    def reject_unknown(table: dict, allowed: set, where: str):
        unknown = set(table) - allowed
        if unknown:
            raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")

    tables = {k: v for k, v in data.items() if isinstance(v, dict)}
    top = {k: v for k, v in data.items() if not isinstance(v, dict)}
    reject_unknown(top, _TOP_KEYS, "top level")
    unknown_tables = set(tables) - {"generator", "train", "model"}
    if unknown_tables:
        raise ConfigError(f"unknown table(s) {sorted(unknown_tables)}")
    if "generator" not in tables:
        raise ConfigError("missing [generator] table")
    reject_unknown(tables["generator"], _GENERATOR_KEYS, "[generator]")
    reject_unknown(tables.get("train", {}), _TRAIN_KEYS, "[train]")
    reject_unknown(tables.get("model", {}), _MODEL_KEYS, "[model]")
    if "output_dir" not in top:
        raise ConfigError("output_dir: required")
    seeds = top.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or \
            not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds: must be a non-empty array of integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds: duplicates not allowed")
    schedules = top.get("schedules", ["gradual"])
    if not isinstance(schedules, list) or not schedules:
        raise ConfigError("schedules: must be a non-empty array")
    for s in schedules:
        if s not in ob.SCHEDULES:
            raise ConfigError(f"schedules: unknown schedule {s!r} "
                              f"(expected one of {list(ob.SCHEDULES)})")
    if len(set(schedules)) != len(schedules):
        raise ConfigError("schedules: duplicates not allowed")
    holdout = float(top.get("holdout", 0.25))
    if not 0 < holdout < 1:
        raise ConfigError("holdout: must be in (0, 1)")
    gen = tables["generator"]
    if "kind" not in gen:
        raise ConfigError("generator.kind: required")
    if gen["kind"] not in ("rotating_moons", "shifting_gaussians", "file"):
        raise ConfigError(f"generator.kind: unknown kind {gen['kind']!r}")
    if gen["kind"] != "file":
        for req in ("T", "n"):
            if req not in gen:
                raise ConfigError(f"generator.{req}: required")
    elif "path" not in gen:
        raise ConfigError("generator.path: required for kind=file")
    cfg = ExperimentConfig(
        output_dir=top["output_dir"], seeds=list(seeds),
        schedules=list(schedules), holdout=holdout, generator=dict(gen),
        train=dict(tables.get("train", {})), model=dict(tables.get("model", {})),
        digest=digest)
    cfg.train_config(0)
    cfg.model_spec()
    return cfg


def load_config(path) -> ExperimentConfig:
    raw = Path(path).read_bytes()
    data = parse_config_text(raw.decode("utf-8"))
    return validate_config(data, hashlib.sha256(raw).digest())


# ---------------------------------------------------------------------------
# checkpoint binary format

class CheckpointError(Exception):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


class DigestMismatch(CheckpointError):
    pass


class ShapeMismatch(CheckpointError):
    pass


class UnsupportedVersion(CheckpointError):
    pass


@dataclass
class Checkpoint:
    arrays: list[np.ndarray]
    domain_index: int
    epoch: int
    config_digest: bytes
    version: int = CHECKPOINT_VERSION


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    # training position rides as the first payload array
    arrays = [np.array([float(ckpt.domain_index), float(ckpt.epoch)])]
    arrays += [np.asarray(a, dtype=np.float64) for a in ckpt.arrays]
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", ckpt.version, len(arrays)))
    for a in arrays:
        if a.ndim == 2:
            buf.write(struct.pack("<II", a.shape[0], a.shape[1]))
        elif a.ndim == 1:
            buf.write(struct.pack("<II", a.shape[0], 0))
        else:
            raise ValueError(f"checkpoint arrays must be 1-D or 2-D, got {a.shape}")
    for a in arrays:
        buf.write(a.astype("<f8").tobytes(order="C"))
    if len(ckpt.config_digest) != 32:
        raise ValueError("config digest must be 32 bytes")
    buf.write(ckpt.config_digest)
    _atomic_write_bytes(Path(path), buf.getvalue())


def load_checkpoint(path, expect_digest: bytes | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 8:
        raise TruncatedCheckpoint(f"{path}: truncated header")
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersion(f"{path}: version {version} not supported")
    ofs = 16
    shapes = []
    for _ in range(count):
        if ofs + 8 > len(raw):
            raise TruncatedCheckpoint(f"{path}: truncated shape table")
        d0, d1 = struct.unpack_from("<II", raw, ofs)
        ofs += 8
        shapes.append((d0, d1))
    arrays = []
    for d0, d1 in shapes:
        size = d0 * (d1 if d1 else 1)
        nbytes = size * 8
        if ofs + nbytes > len(raw):
            raise TruncatedCheckpoint(f"{path}: truncated payload")
        a = np.frombuffer(raw, dtype="<f8", count=size, offset=ofs).copy()
        ofs += nbytes
        arrays.append(a.reshape((d0, d1)) if d1 else a)
    if ofs + 32 > len(raw):
        raise TruncatedCheckpoint(f"{path}: truncated payload")
    digest = raw[ofs:ofs + 32]
    if ofs + 32 != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after digest")
    if expect_digest is not None and digest != expect_digest:
        raise DigestMismatch(f"{path}: checkpoint was produced by a different "
                             "config")
    if not arrays or arrays[0].shape != (2,):
        raise ShapeMismatch(f"{path}: missing training-position record")
    pos = arrays[0]
    return Checkpoint(arrays[1:], int(pos[0]), int(pos[1]), digest, version)


def model_to_arrays(model: ob.AdaptationModel) -> list[np.ndarray]:
    arrays = model.g.arrays() + model.h.arrays() + model.critic.arrays()
    if model.summarizer is not None:
        arrays += model.summarizer.arrays()
        arrays += list(model.summary_state.hidden)
        arrays.append(np.array([float(model.summary_state.count)]))
    return arrays


def arrays_to_model(template: ob.AdaptationModel, arrays: list[np.ndarray]):
    """Fill a freshly built model's parameters from checkpoint arrays."""
    slots = model_to_arrays(template)
    if len(slots) != len(arrays):
        raise ShapeMismatch(f"expected {len(slots)} arrays, got {len(arrays)}")
    for slot, a in zip(slots, arrays):
        if slot.shape != a.shape:
            raise ShapeMismatch(f"array shape {a.shape} does not match "
                                f"model slot {slot.shape}")
        slot[...] = a
    if template.summarizer is not None:
        template.summary_state.count = int(arrays[-1][0])
    return template


# ---------------------------------------------------------------------------
# experiment runs

def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def _atomic_write_text(path: Path, text: str) -> None:
    _atomic_write_bytes(path, text.encode("utf-8"))


def _fmt(x: float) -> str:
    return "%.9g" % (float(x) + 0.0)


class _Halted(Exception):
    pass


def _run_one(cfg: ExperimentConfig, schedule: str, seed: int,
             halt_after: int | None):
    """Execute one (schedule, seed) run with stage-boundary state saving.

    Returns (rows, halted) where rows are metrics-CSV field tuples.
    """
    run_id = f"{schedule}-s{seed}"
    outdir = Path(cfg.output_dir)
    state_ckpt = outdir / "state" / f"{run_id}.ckpt"
    state_rows = outdir / "state" / f"{run_id}.rows.csv"
    seq = cfg.sequence_for(seed)
    tcfg = cfg.train_config(seed)
    spec = cfg.model_spec()
    if schedule == "gradual_temporal":
        spec = ob.ModelSpec(**{**spec.__dict__, "summarizer": True})
    loss_spec = cfg.loss_spec
    labeled_target = bool(cfg.train.get("labeled_target", True))

    start_model = None
    start_stage = 0
    rows: list[tuple] = []
    if state_ckpt.exists():
        ck = load_checkpoint(state_ckpt, expect_digest=cfg.digest)
        template = ob.build_model(spec, seq.d, seq.k,
                                  dc.substream(tcfg.seed, "init"))
        start_model = arrays_to_model(template, ck.arrays)
        start_stage = ck.domain_index + 1
        with open(state_rows, newline="", encoding="utf-8") as fh:
            rows = [tuple(r) for r in csv.reader(fh)]

    def on_stage(idx, model, metrics):
        rows.append((run_id, str(seed), schedule, str(metrics.t),
                     str(metrics.epoch), _fmt(metrics.class_loss),
                     _fmt(metrics.alignment), _fmt(metrics.gp),
                     _fmt(metrics.target_acc), "0"))
        if halt_after is not None and idx >= halt_after and \
                schedule in ("gradual", "gradual_temporal"):
            ckpt = Checkpoint(model_to_arrays(model), idx, tcfg.epochs_per_domain,
                              cfg.digest)
            save_checkpoint(state_ckpt, ckpt)
            buf = io.StringIO()
            csv.writer(buf, lineterminator="\n").writerows(rows)
            _atomic_write_text(state_rows, buf.getvalue())
            raise _Halted()

    try:
        model, _ = ob.train_schedule(
            schedule, seq, tcfg, spec, holdout=cfg.holdout,
            labeled_target=labeled_target, loss_spec=loss_spec,
            start_model=start_model, start_stage=start_stage,
            stage_callback=on_stage)
    except _Halted:
        return rows, True
    except ob.TrainingDiverged as e:
        raise ob.TrainingDiverged(f"run {run_id}: {e}") from e
    ckpt = Checkpoint(model_to_arrays(model), seq.T - 1, 0, cfg.digest)
    save_checkpoint(outdir / "checkpoints" / f"{run_id}.ckpt", ckpt)
    for p in (state_ckpt, state_rows):
        if p.exists():
            p.unlink()
    return rows, False


def _pool_worker(args):
    config_path, schedule, seed, halt_after = args
    cfg = load_config(config_path)
    return _run_one(cfg, schedule, seed, halt_after)


def run_experiment(config_path, halt_after: int | None = None) -> int:
    """Execute every (schedule, seed) combination and write artifacts.

    Returns the process exit code (0 ok, 2 config error, 3 divergence)."""
    try:
        cfg = load_config(config_path)
    except (ConfigError, FileNotFoundError, UnicodeDecodeError) as e:
        print(json.dumps({"error": str(e)}, sort_keys=True))
        return EXIT_CONFIG
    outdir = Path(cfg.output_dir)
    runs = [(schedule, seed) for schedule in cfg.schedules for seed in cfg.seeds]
    threads = os.environ.get("GRADSHIFT_THREADS")
    workers = int(threads) if threads else (os.cpu_count() or 1)
    workers = max(1, min(workers, len(runs)))
    results: dict[tuple, tuple] = {}
    try:
        if workers == 1 or halt_after is not None:
            for schedule, seed in runs:
                results[(schedule, seed)] = _run_one(cfg, schedule, seed,
                                                     halt_after)
        else:
            with concurrent.futures.ProcessPoolExecutor(workers) as pool:
                futs = {pool.submit(_pool_worker,
                                    (str(config_path), schedule, seed, None)):
                        (schedule, seed) for schedule, seed in runs}
                for fut in concurrent.futures.as_completed(futs):
                    results[futs[fut]] = fut.result()
    except ob.TrainingDiverged as e:
        print(json.dumps({"error": f"training diverged: {e}"}, sort_keys=True))
        return EXIT_DIVERGED
    except CheckpointError as e:
        print(json.dumps({"error": str(e)}, sort_keys=True))
        return EXIT_CONFIG

    halted = any(h for _, h in results.values())
    if halted:
        print(json.dumps({"halted": True, "output_dir": str(outdir)},
                         sort_keys=True))
        return EXIT_OK

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER.split(","))
    for schedule, seed in runs:
        w.writerows(results[(schedule, seed)][0])
    _atomic_write_text(outdir / "metrics.csv", buf.getvalue())

    report: dict = {"config_digest": cfg.digest.hex(), "schedules": {}}
    for schedule in cfg.schedules:
        finals = []
        for seed in cfg.seeds:
            rows = results[(schedule, seed)][0]
            finals.append(float(rows[-1][8]))
        report["schedules"][schedule] = {
            "mean_target_acc": float(np.mean(finals)),
            "std_target_acc": float(np.std(finals)),
            "runs": len(finals),
            "final_target_acc": finals,
        }
    _atomic_write_text(outdir / "report.json",
                       json.dumps(report, sort_keys=True, indent=1) + "\n")
    print(json.dumps({"output_dir": str(outdir), "runs": len(runs)},
                     sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# subcommands

def _load_points(path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(v) for v in line.split(",")])
            except ValueError:
                raise ConfigError(f"{path}:{ln}: cannot parse point row") from None
    if not rows:
        raise ConfigError(f"{path}: no points")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ConfigError(f"{path}: inconsistent row widths {sorted(widths)}")
    return np.asarray(rows, dtype=np.float64)


def cmd_w1(args) -> int:
    a = _load_points(args.file_a)
    b = _load_points(args.file_b)
    resampled = False
    if a.shape[0] != b.shape[0]:
        a, b = tp.resample_to_equal(a, b, args.seed)
        resampled = True
    if args.method == "exact":
        res = tp.w1_exact(a, b, include_coupling=False)
    elif args.method == "sorted_1d":
        if a.shape[1] != 1:
            raise ConfigError("sorted_1d requires 1-D points")
        res = tp.w1_sorted_1d(a, b)
    else:
        eps = args.epsilon
        if eps is None:
            eps = 0.01 * float(tp.cost_matrix(a, b).mean())
        res = tp.sinkhorn(a, b, eps, max_iters=args.max_iters, tol=args.tol)
    out = {"distance": res.distance, "method": res.method,
           "iterations": res.iterations, "converged": res.converged,
           "n": int(a.shape[0]), "resampled": resampled}
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def _bound_inputs(args) -> th.BoundInputs:
    return th.BoundInputs(T=args.T, n=args.n, M=args.M, rho=args.rho,
                          drift=args.Delta, delta=args.delta, vc=args.vc,
                          rseq=args.rseq, rseq_c=args.rseq_c,
                          c_online=args.c_online)


def cmd_bound(args) -> int:
    rep = th.evaluate_bound(_bound_inputs(args))
    out = {"inputs": _bound_echo(args), "e1": rep.e1, "e2": rep.e2,
           "e3": rep.e3, "total": rep.total, "parts": rep.parts}
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def _bound_echo(args) -> dict:
    out = {"n": args.n, "M": args.M, "rho": args.rho,
           "Delta": args.Delta, "delta": args.delta, "vc": args.vc,
           "rseq": args.rseq, "rseq_c": args.rseq_c, "c_online": args.c_online}
    if hasattr(args, "T"):
        out["T"] = args.T
    return out


def cmd_sweep(args) -> int:
    inp = th.BoundInputs(T=args.T_min, n=args.n, M=args.M, rho=args.rho,
                         drift=args.Delta, delta=args.delta, vc=args.vc,
                         rseq=args.rseq, rseq_c=args.rseq_c,
                         c_online=args.c_online)
    res = th.sweep_horizon(inp, range(args.T_min, args.T_max + 1, args.T_step))
    out = {"inputs": {**_bound_echo(args), "T_min": args.T_min,
                      "T_max": args.T_max, "T_step": args.T_step},
           "argmin_T": res.argmin_T,
           "rows": [{"T": t, "e1": e1, "e2": e2, "e3": e3, "total": tot}
                    for t, e1, e2, e3, tot in res.rows]}
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_disc(args) -> int:
    seq = dom.make_shifting_gaussians(
        args.T, args.n, shift_per_step=args.shift,
        class_means=[[-2.0], [2.0]], sigma=args.sigma, seed=args.seed)
    spec = ob.ModelSpec(feature_dim=args.feature_dim, hidden=args.hidden)
    pool = th.make_hypothesis_pool(seq, args.pool_random, args.pool_snapshots,
                                   seed=args.seed, spec=spec)
    loss = ob.LossSpec("cross_entropy_bounded", bound=args.M, rho=args.rho)
    disc = th.estimate_discrepancy(seq, pool, loss)
    out = {"inputs": {"T": args.T, "n": args.n, "shift": args.shift,
                      "sigma": args.sigma, "seed": args.seed,
                      "pool_random": args.pool_random,
                      "pool_snapshots": args.pool_snapshots,
                      "M": args.M, "rho": args.rho},
           "disc": disc, "pool_size": len(pool),
           "t_rho_delta": args.T * args.rho * args.shift}
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_seqrad(args) -> int:
    if args.preset == "two_constants":
        table = np.array([[1.0] * args.zsize, [-1.0] * args.zsize])
    else:
        table = dc.rng_normal(args.seed, (args.fsize, args.zsize))
    inst = th.FiniteInstance(table, args.T)
    value = th.seq_rademacher_exact(inst)
    out = {"inputs": {"fsize": int(table.shape[0]), "zsize": args.zsize,
                      "T": args.T, "seed": args.seed,
                      "preset": args.preset},
           "tree_count": inst.tree_count(), "value": value}
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_lemma1(args) -> int:
    rep = th.check_lemma1(
        th.gaussian_sampler(0.0, args.sigma),
        th.gaussian_sampler(args.shift, args.sigma),
        true_w1=args.shift, loss=th.clamp_loss(-args.clamp, args.clamp),
        rho=args.rho, trials=args.trials, n=args.n, seed=args.seed)
    out = {"inputs": {"shift": args.shift, "sigma": args.sigma,
                      "trials": args.trials, "n": args.n, "seed": args.seed,
                      "rho": args.rho, "clamp": args.clamp},
           "bound": rep.bound, "max_gap": rep.max_gap,
           "violations": rep.violations, "violation_rate": rep.violation_rate}
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point

class _JsonArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        print(json.dumps({"error": message}, sort_keys=True))
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _JsonArgumentParser(prog="gradshift",
                            description="gradual domain adaptation laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config")
    run.add_argument("--halt-after", type=int, default=None,
                     help="stop each multi-stage run after this stage index "
                          "(state is saved; rerun to resume)")

    w1 = sub.add_parser("w1", help="Wasserstein-1 between two point files")
    w1.add_argument("file_a")
    w1.add_argument("file_b")
    w1.add_argument("--method", choices=["exact", "sorted_1d", "sinkhorn"],
                    default="exact")
    w1.add_argument("--epsilon", type=float, default=None)
    w1.add_argument("--max-iters", type=int, default=5000)
    w1.add_argument("--tol", type=float, default=1e-6)
    w1.add_argument("--seed", type=int, default=0)

    def add_bound_flags(sp, with_T=True):
        if with_T:
            sp.add_argument("--T", type=int, required=True)
        sp.add_argument("--n", type=int, required=True)
        sp.add_argument("--M", type=float, default=1.0)
        sp.add_argument("--rho", type=float, default=1.0)
        sp.add_argument("--Delta", type=float, default=0.0)
        sp.add_argument("--delta", type=float, default=0.1)
        sp.add_argument("--vc", type=float, default=10.0)
        sp.add_argument("--rseq", type=float, default=None)
        sp.add_argument("--rseq-c", type=float, default=1.0)
        sp.add_argument("--c-online", type=float, default=1.0)

    bound = sub.add_parser("bound", help="evaluate the excess-risk bound terms")
    add_bound_flags(bound)

    sweep = sub.add_parser("sweep", help="bound terms across horizons")
    add_bound_flags(sweep, with_T=False)
    sweep.add_argument("--T-min", type=int, default=2)
    sweep.add_argument("--T-max", type=int, required=True)
    sweep.add_argument("--T-step", type=int, default=1)

    disc = sub.add_parser("disc", help="discrepancy estimate on drifting "
                                       "gaussians")
    disc.add_argument("--T", type=int, default=5)
    disc.add_argument("--n", type=int, default=2000)
    disc.add_argument("--shift", type=float, default=0.3)
    disc.add_argument("--sigma", type=float, default=0.5)
    disc.add_argument("--seed", type=int, default=0)
    disc.add_argument("--pool-random", type=int, default=64)
    disc.add_argument("--pool-snapshots", type=int, default=8)
    disc.add_argument("--M", type=float, default=5.0)
    disc.add_argument("--rho", type=float, default=1.0)
    disc.add_argument("--feature-dim", type=int, default=4)
    disc.add_argument("--hidden", type=int, default=8)

    seqrad = sub.add_parser("seqrad", help="exact sequential complexity on a "
                                           "finite instance")
    seqrad.add_argument("--T", type=int, default=2)
    seqrad.add_argument("--zsize", type=int, default=2)
    seqrad.add_argument("--fsize", type=int, default=3)
    seqrad.add_argument("--seed", type=int, default=0)
    seqrad.add_argument("--preset", choices=["two_constants"], default=None)

    lem = sub.add_parser("lemma1", help="two-domain loss-gap bound check")
    lem.add_argument("--shift", type=float, default=0.3)
    lem.add_argument("--sigma", type=float, default=1.0)
    lem.add_argument("--trials", type=int, default=1000)
    lem.add_argument("--n", type=int, default=2000)
    lem.add_argument("--seed", type=int, default=0)
    lem.add_argument("--rho", type=float, default=1.0)
    lem.add_argument("--clamp", type=float, default=5.0)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if args.command == "run":
            return run_experiment(args.config, halt_after=args.halt_after)
        handler = {"w1": cmd_w1, "bound": cmd_bound, "sweep": cmd_sweep,
                   "disc": cmd_disc, "seqrad": cmd_seqrad,
                   "lemma1": cmd_lemma1}[args.command]
        return handler(args)
    except ob.TrainingDiverged as e:
        print(json.dumps({"error": f"training diverged: {e}"}, sort_keys=True))
        return EXIT_DIVERGED
    except (ConfigError, ValueError, FileNotFoundError) as e:
        print(json.dumps({"error": str(e)}, sort_keys=True))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
