"""Command-line front end.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 numerical
divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import exact, taskgen, verify
from ._validation import DivergenceError, InstanceMismatchError, WrongKindError, check_policy
from .objectives import DEFAULT_BETA
from .train import METHODS, TrainConfig, check_kind, train, win_rate

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

METRICS_HEADER = ["step", "loss", "kl", "expected_reward", "aux_margin", "aux_weight_mean"]
FRONTIER_HEADER = ["method", "beta", "kl", "expected_reward"]
WINRATE_HEADER = ["temperature", "wins_a", "trials", "win_rate", "ci_lo", "ci_hi"]
SWEEP_HEADER = ["method", "beta", "alpha", "kl", "expected_reward", "final_loss"]

Z95 = 1.959963984540054


class UsageError(Exception):
    pass


def substream_seed(seed: int, name: str) -> int:
    """Independent integer seed for the named component of a run."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# -- configuration -----------------------------------------------------------


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _floats(text) -> list[float]:
    if text is None or text == "":
        return []
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).replace(";", ",").split(",") if v.strip()]


def _words(text) -> list[str]:
    if text is None:
        return []
    return [v.strip() for v in str(text).split(",") if v.strip()]


@dataclass
class ExperimentConfig:
    values: dict

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "ExperimentConfig":
        values = {}
        if getattr(args, "config", None):
            values.update(read_config(args.config))
        for key, val in vars(args).items():
            if key in ("config", "command", "func") or val is None:
                continue
            values[key] = val
        return cls(values)

    def get(self, key, default=None):
        return self.values.get(key, default)

    def path(self, key, required=True) -> Path | None:
        val = self.values.get(key)
        if val is None:
            if required:
                raise UsageError(f"missing required setting {key!r}")
            return None
        p = Path(val)
        if not p.exists():
            raise UsageError(f"{key}: file {p} does not exist")
        return p

    def train_config(self, **override) -> TrainConfig:
        v = dict(self.values)
        v.update(override)
        seed = int(v.get("seed", 0))
        lr = v.get("lr")
        batch = v.get("batch_size")
        try:
            return TrainConfig(
                method=str(v.get("method", "dpo")),
                beta=float(v.get("beta", DEFAULT_BETA)),
                alpha=float(v.get("alpha", 1.0)),
                lr=None if lr in (None, "auto") else float(lr),
                steps=int(v.get("steps", 2000)),
                warmup_steps=int(v.get("warmup_steps", 0)),
                seed=substream_seed(seed, "train"),
                mode=str(v.get("mode", "soft")),
                eval_every=int(v.get("eval_every", 100)),
                optimizer=v.get("optimizer"),
                batch_size=None if batch in (None, "none") else int(batch),
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from exc


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.get("out", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_world(cfg: ExperimentConfig, mode: str):
    inst = taskgen.load_instance(cfg.path("instance"))
    ds_path = cfg.path("dataset", required=False)
    if ds_path is not None:
        try:
            data = taskgen.load_dataset(ds_path, inst)
        except InstanceMismatchError as exc:
            raise UsageError(str(exc)) from exc
    elif mode == "soft":
        data = taskgen.enumerate_soft_dataset(inst)
    else:
        raise UsageError("sampled mode needs a --dataset file")
    return inst, data


# -- policy files ------------------------------------------------------------


def save_policy(path: Path, probs, logits, inst, tcfg: TrainConfig) -> None:
    payload = {
        "n_prompts": inst.n_prompts,
        "completions_per_prompt": inst.completions_per_prompt,
        "instance_digest": inst.digest,
        "method": tcfg.method,
        "beta": tcfg.beta,
        "probs": np.asarray(probs).tolist(),
        "logits": np.asarray(logits).tolist(),
    }
    path.write_text(json.dumps(payload) + "\n")


def load_policy(path) -> np.ndarray:
    payload = json.loads(Path(path).read_text())
    return check_policy(np.array(payload["probs"], dtype=np.float64))


# -- run execution (shared by frontier and sweep) ----------------------------


def _run_job(job):
    """Worker entry point: ``job`` is (tag, instance JSON, dataset JSONL, config dict)."""
    tag, inst_json, data_jsonl, cfg_dict = job
    inst = taskgen.instance_from_json(inst_json)
    data = taskgen.dataset_from_jsonl(data_jsonl, inst)
    tcfg = TrainConfig(**cfg_dict)
    trace = train(inst, data, tcfg)
    return tag, tcfg.beta, tcfg.alpha, trace.final.kl, trace.final.expected_reward, trace.final.loss


def _workers() -> int:
    cap = os.environ.get("PREFOPT_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise UsageError("PREFOPT_THREADS must be an integer")
    return n


def _run_jobs(jobs) -> list:
    n = _workers()
    if n <= 1 or len(jobs) <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(_run_job, jobs))


def _sweep_jobs(cfg: ExperimentConfig, inst, data, require_betas: bool):
    methods = _words(cfg.get("methods")) or [str(cfg.get("method", "dpo"))]
    betas = _floats(cfg.get("beta_sweep"))
    alphas = _floats(cfg.get("alpha_sweep")) or [float(cfg.get("alpha", 1.0))]
    if require_betas and not betas:
        raise UsageError("beta_sweep must be non-empty")
    betas = betas or [float(cfg.get("beta", DEFAULT_BETA))]
    inst_json, data_jsonl = inst.to_json(), data.to_jsonl()
    jobs = []
    for method in methods:
        if method not in METHODS:
            raise UsageError(f"unknown method {method!r}")
        try:
            check_kind(method, data)
        except WrongKindError as exc:
            raise UsageError(str(exc)) from exc
        if method == "unlikelihood":
            grid = [(float(cfg.get("beta", DEFAULT_BETA)), a, f"unlikelihood:alpha={a!r}") for a in alphas]
        elif method in ("sft", "preferred_ft"):
            grid = [(float(cfg.get("beta", DEFAULT_BETA)), 1.0, method)]
        else:
            grid = [(b, float(cfg.get("alpha", 1.0)), method) for b in betas]
        for beta, alpha, tag in grid:
            tcfg = cfg.train_config(method=method, beta=beta, alpha=alpha)
            jobs.append((tag, inst_json, data_jsonl, tcfg.to_dict()))
    return jobs, betas


# -- commands ----------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = ExperimentConfig.from_args(args)
    prompts, completions = int(cfg.get("prompts", 4)), int(cfg.get("completions", 4))
    if prompts < 1 or completions < 2:
        raise UsageError("need --prompts >= 1 and --completions >= 2")
    seed = int(cfg.get("seed", 0))
    inst = taskgen.gen_instance(
        prompts, completions,
        float(cfg.get("reward_scale", 1.0)), float(cfg.get("ref_concentration", 1.0)),
        substream_seed(seed, "instance"),
    )
    kind = cfg.get("kind", "pairs")
    ds_seed = substream_seed(seed, "dataset")
    try:
        if kind == "pairs":
            data = taskgen.sample_pairs(inst, inst.pi_ref, int(cfg.get("pairs", 1000)), ds_seed)
        elif kind == "rankings":
            data = taskgen.sample_rankings(
                inst, inst.pi_ref, int(cfg.get("rankings", 1000)), int(cfg.get("K", 3)), ds_seed
            )
        elif kind == "soft":
            data = taskgen.enumerate_soft_dataset(inst)
        else:
            raise UsageError(f"unknown dataset kind {kind!r}")
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(cfg)
    taskgen.save_instance(inst, out / "instance.json")
    taskgen.save_dataset(data, out / "dataset.jsonl")
    print(f"instance {inst.digest}")
    print(f"dataset {_file_digest(out / 'dataset.jsonl')}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = ExperimentConfig.from_args(args)
    tcfg = cfg.train_config()
    inst, data = _load_world(cfg, tcfg.mode)
    try:
        check_kind(tcfg.method, data)
    except WrongKindError as exc:
        raise UsageError(str(exc)) from exc
    trace = train(inst, data, tcfg)
    out = _out_dir(cfg)
    rows = [
        [fmt(r.step), fmt(r.loss), fmt(r.kl), fmt(r.expected_reward),
         fmt(r.aux.get("margin", math.nan)), fmt(r.aux.get("weight_mean", math.nan))]
        for r in trace.records
    ]
    _write_csv(out / "metrics.csv", METRICS_HEADER, rows)
    save_policy(out / "policy.json", trace.probs, trace.policy.logits, inst, tcfg)
    print(f"final kl={trace.final.kl!r} expected_reward={trace.final.expected_reward!r}")
    return EXIT_OK


def cmd_frontier(args) -> int:
    cfg = ExperimentConfig.from_args(args)
    mode = str(cfg.get("mode", "soft"))
    inst, data = _load_world(cfg, mode)
    jobs, betas = _sweep_jobs(cfg, inst, data, require_betas=True)
    results = _run_jobs(jobs)
    rows = [["exact", fmt(p.beta), fmt(p.kl), fmt(p.expected_reward)] for p in exact.exact_frontier(inst, betas)]
    rows += [[tag, fmt(beta), fmt(kl), fmt(rew)] for tag, beta, _, kl, rew, _ in results]
    out = _out_dir(cfg)
    _write_csv(out / "frontier.csv", FRONTIER_HEADER, rows)
    print(f"wrote {len(rows)} frontier rows to {out / 'frontier.csv'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = ExperimentConfig.from_args(args)
    mode = str(cfg.get("mode", "soft"))
    inst, data = _load_world(cfg, mode)
    if cfg.get("beta_sweep") is not None and not _floats(cfg.get("beta_sweep")):
        raise UsageError("beta_sweep must be non-empty")
    jobs, _ = _sweep_jobs(cfg, inst, data, require_betas=False)
    results = _run_jobs(jobs)
    rows = [
        [tag, fmt(beta), fmt(alpha), fmt(kl), fmt(rew), fmt(loss)]
        for tag, beta, alpha, kl, rew, loss in results
    ]
    out = _out_dir(cfg)
    _write_csv(out / "sweep.csv", SWEEP_HEADER, rows)
    print(f"wrote {len(rows)} runs to {out / 'sweep.csv'}")
    return EXIT_OK


def wilson_interval(wins: float, n: int, z: float = Z95) -> tuple[float, float]:
    p = wins / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


def cmd_eval(args) -> int:
    cfg = ExperimentConfig.from_args(args)
    inst = taskgen.load_instance(cfg.path("instance"))
    pi_a = load_policy(cfg.path("policy_a"))
    pi_b = load_policy(cfg.path("policy_b"))
    if pi_a.shape != inst.shape or pi_b.shape != inst.shape:
        raise UsageError(f"policy shapes {pi_a.shape}/{pi_b.shape} do not match instance {inst.shape}")
    temps = _floats(cfg.get("temperature_sweep")) or [0.0, 0.25, 0.5, 0.75, 1.0]
    trials = int(cfg.get("trials", 10000))
    if trials < 1:
        raise UsageError("trials must be >= 1")
    rng = np.random.default_rng(substream_seed(int(cfg.get("seed", 0)), "eval"))
    rows = []
    for t in temps:
        if t < 0:
            raise UsageError("temperatures must be nonnegative")
        if t == 0:
            # greedy decoding: enumerate prompts, no sampling noise
            rate = win_rate(pi_a, pi_b, inst, 0.0, 1, rng, exact=True)
            n, lo, hi = inst.n_prompts, rate, rate
        else:
            rate = win_rate(pi_a, pi_b, inst, t, trials, rng)
            n = trials
            lo, hi = wilson_interval(rate * n, n)
        rows.append([fmt(t), fmt(rate * n), fmt(n), fmt(rate), fmt(lo), fmt(hi)])
    out = _out_dir(cfg)
    _write_csv(out / "winrate.csv", WINRATE_HEADER, rows)
    print(f"wrote {len(rows)} win-rate rows to {out / 'winrate.csv'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    report = verify.run_suite(int(args.instances), int(args.seed), args.break_mode)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.ok else EXIT_VERIFY


# -- parser ------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value configuration file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")


def _training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--instance")
    p.add_argument("--dataset")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--beta", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lr", help="step size, or 'auto'")
    p.add_argument("--steps", type=int)
    p.add_argument("--warmup-steps", dest="warmup_steps", type=int)
    p.add_argument("--mode", choices=("sampled", "soft"))
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--optimizer", choices=("gd", "rmsprop", "natural"))
    p.add_argument("--batch-size", dest="batch_size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prefopt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate an instance and a preference dataset")
    _common(p)
    p.add_argument("--prompts", type=int)
    p.add_argument("--completions", type=int)
    p.add_argument("--kind", choices=taskgen.KINDS)
    p.add_argument("--pairs", type=int, help="number of sampled pairs")
    p.add_argument("--rankings", type=int, help="number of sampled rankings")
    p.add_argument("-K", "--K", dest="K", type=int, help="ranking length")
    p.add_argument("--reward-scale", dest="reward_scale", type=float)
    p.add_argument("--ref-concentration", dest="ref_concentration", type=float)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one policy and write metrics.csv + policy.json")
    _common(p)
    _training(p)
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (
        ("frontier", cmd_frontier, "reward-KL frontier over a beta sweep"),
        ("sweep", cmd_sweep, "run a grid of methods and hyperparameters on a worker pool"),
    ):
        p = sub.add_parser(name, help=help_)
        _common(p)
        _training(p)
        p.add_argument("--methods", help="comma-separated method list")
        p.add_argument("--beta-sweep", dest="beta_sweep")
        p.add_argument("--alpha-sweep", dest="alpha_sweep")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="win rates of policy A against policy B")
    _common(p)
    p.add_argument("--instance")
    p.add_argument("--policy-a", dest="policy_a")
    p.add_argument("--policy-b", dest="policy_b")
    p.add_argument("--temperature-sweep", dest="temperature_sweep")
    p.add_argument("--trials", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run the property suite on random instances")
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--break", dest="break_mode", choices=("shift",), help="inject a known bug (harness check)")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"prefopt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"prefopt {args.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"prefopt {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
