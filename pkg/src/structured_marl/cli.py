"""Command line entry point: deps, train, verify, variance-lab."""

from __future__ import annotations

import argparse
import hashlib
import json
import multiprocessing as mp
import os
import platform
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .coupling import graphs_from_arg, validate
from .dependency import analyze, strongly_connected_components
from .environments import BUILTINS, RNG_NAME, builtin_config
from .mastac import RunRecord, TrainConfig, Trainer, final_fraction_stats, parse_variant

CSV_HEADER = "run_id,variant,seed,epoch,episode_return,smoothed_return"


def _num(x: float) -> str:
    return repr(float(x))


def parse_seeds(text: str) -> list[int]:
    """'0..14', '0,3,5' or '7'."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise ValueError(f"no seeds in {text!r}")
    return sorted(set(out))


# ---------------------------------------------------------------- experiments


@dataclass
class ExperimentSpec:
    env: str
    variant: str = "exact"
    seeds: list = field(default_factory=lambda: [0])
    epochs: Optional[int] = None
    out: Optional[str] = None
    graphs: Optional[str] = None
    stop_at: Optional[int] = None

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        self.variant = str(parse_variant(self.variant))


def load_experiment(spec: ExperimentSpec):
    """(label, graphs, env, cfg) for a builtin name or a JSON experiment file.

    The file holds ``builtin`` plus optional ``graphs``, ``env`` (physics
    overrides) and ``train`` (TrainConfig overrides).
    """
    if spec.env in BUILTINS:
        label, d, base = spec.env, {}, None
    else:
        path = Path(spec.env)
        d = json.loads(path.read_text())
        label, base = path.stem, path.parent
        if d.get("builtin") not in BUILTINS:
            raise ValueError(f"{path}: 'builtin' must be one of {BUILTINS}")
    graphs, env, cfg = builtin_config(d.get("builtin", spec.env), d.get("env"), d.get("train"))
    graph_arg = spec.graphs or d.get("graphs")
    if graph_arg:
        if base is not None and not spec.graphs and not Path(graph_arg).is_absolute() \
                and (base / graph_arg).exists():
            graph_arg = str(base / graph_arg)
        graphs = graphs_from_arg(graph_arg)
        env = type(env)(graphs, env.params)
    overrides = {"variant": spec.variant, "seeds": tuple(spec.seeds)}
    if spec.epochs is not None:
        overrides["epochs"] = spec.epochs
    return label, graphs, env, replace(cfg, **overrides)


def _run_seed(args) -> RunRecord:
    cfg, env, graphs, seed, stop_at = args
    trainer = Trainer(cfg, env, graphs, seed)
    try:
        return trainer.run(stop_at)
    except (ArithmeticError, RuntimeError, ValueError) as e:
        rec = getattr(trainer, "record", None) or RunRecord(seed, cfg.variant)
        rec.failed, rec.error = True, f"{type(e).__name__}: {e}"
        return rec


def max_workers(n_jobs: int) -> int:
    cap = os.environ.get("STRUCTURED_MARL_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, n_jobs))


def run_seeds(cfg: TrainConfig, env, graphs, seeds: Sequence[int],
              stop_at: Optional[int] = None) -> list[RunRecord]:
    """Seed-level parallel runs; results always come back ordered by seed."""
    jobs = [(cfg, env, graphs, s, stop_at) for s in sorted(seeds)]
    workers = max_workers(len(jobs))
    if workers == 1:
        return [_run_seed(j) for j in jobs]
    with mp.get_context("fork").Pool(workers) as pool:
        return pool.map(_run_seed, jobs)


@dataclass
class ResultBundle:
    label: str
    cfg: TrainConfig
    records: list
    graphs_dict: dict
    stop_at: Optional[int] = None

    @property
    def ok(self) -> list[RunRecord]:
        return [r for r in self.records if not r.failed]

    @property
    def failed_seeds(self) -> list[int]:
        return [r.seed for r in self.records if r.failed]

    def aggregate(self) -> dict:
        """Mean/std per epoch over the seeds that finished."""
        ok = self.ok
        if not ok:
            return {"episode_return": (np.array([]), np.array([])),
                    "smoothed_return": (np.array([]), np.array([]))}
        k = min(len(r.episode_return) for r in ok)
        out = {}
        for key in ("episode_return", "smoothed_return"):
            a = np.array([getattr(r, key)[:k] for r in ok])
            out[key] = (a.mean(axis=0), a.std(axis=0))
        return out

    def final20(self) -> tuple[float, float]:
        return final_fraction_stats(self.ok, self.cfg.episode_length, 0.2)

    def config_hash(self) -> str:
        blob = json.dumps({"label": self.label, "cfg": self.cfg.to_dict(),
                           "graphs": self.graphs_dict,
                           "stop_at": self.stop_at}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def run_id(self, seed: int) -> str:
        return f"{self.label}-{self.cfg.variant}-s{seed}"

    def seed_csv(self, rec: RunRecord) -> str:
        rid = self.run_id(rec.seed)
        lines = [CSV_HEADER]
        for k, (e, s) in enumerate(zip(rec.episode_return, rec.smoothed_return)):
            lines.append(f"{rid},{rec.variant},{rec.seed},{k},{_num(e)},{_num(s)}")
        return "\n".join(lines) + "\n"

    def aggregate_csv(self) -> str:
        agg = self.aggregate()
        (em, es), (sm, ss) = agg["episode_return"], agg["smoothed_return"]
        lines = ["epoch,episode,mean_episode_return,std_episode_return,"
                 "mean_smoothed_return,std_smoothed_return,n_seeds,n_failed"]
        n_ok, n_bad = len(self.ok), len(self.failed_seeds)
        L = self.cfg.episode_length
        for k in range(len(em)):
            lines.append(f"{k},{k // L},{_num(em[k])},{_num(es[k])},{_num(sm[k])},{_num(ss[k])},"
                         f"{n_ok},{n_bad}")
        return "\n".join(lines) + "\n"

    def metadata(self) -> dict:
        mean, std = self.final20()
        return {
            "label": self.label,
            "config_hash": self.config_hash(),
            "config": self.cfg.to_dict(),
            "stop_at": self.stop_at,
            "graphs": self.graphs_dict,
            "rng": RNG_NAME,
            "versions": {"structured_marl": __version__, "numpy": np.__version__,
                         "python": platform.python_version()},
            "seeds": [r.seed for r in self.records],
            "failed_seeds": {str(r.seed): r.error for r in self.records if r.failed},
            "epochs_recorded": {str(r.seed): len(r.episode_return) for r in self.records},
            "max_abs_reward": {str(r.seed): r.max_abs_reward for r in self.records},
            "final20": {"mean": mean, "std": std},
        }

    def write(self, out: str | Path) -> dict:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        for rec in self.records:
            (out / f"seed_{rec.seed}.csv").write_text(self.seed_csv(rec))
        (out / "aggregate.csv").write_text(self.aggregate_csv())
        (out / "curve.svg").write_text(svg_chart(self.aggregate()["smoothed_return"],
                                                 f"{self.label} {self.cfg.variant}"))
        meta = self.metadata()
        (out / "metadata.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
        return meta


def cmd_train(spec: ExperimentSpec) -> ResultBundle:
    label, graphs, env, cfg = load_experiment(spec)
    records = run_seeds(cfg, env, graphs, spec.seeds, spec.stop_at)
    bundle = ResultBundle(label, cfg, records, graphs.to_dict(), spec.stop_at)
    if spec.out:
        bundle.write(spec.out)
    return bundle


# ---------------------------------------------------------------- svg


def svg_chart(series, title: str = "", width: int = 640, height: int = 360) -> str:
    """Mean line with a +-std band as a bare polyline chart."""
    mean, std = (np.asarray(a, dtype=float) for a in series)
    pad_l, pad_r, pad_t, pad_b = 60, 20, 30, 40
    w, h = width - pad_l - pad_r, height - pad_t - pad_b
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13" '
             f'font-family="sans-serif">{title}</text>']
    if len(mean):
        lo, hi = float(np.min(mean - std)), float(np.max(mean + std))
        if hi - lo < 1e-12:
            lo, hi = lo - 1.0, hi + 1.0
        n = len(mean)
        px = lambda k: pad_l + (w * k / max(n - 1, 1))
        py = lambda v: pad_t + h * (hi - v) / (hi - lo)
        step = max(1, n // 400)
        ks = list(range(0, n, step))
        if ks[-1] != n - 1:
            ks.append(n - 1)
        upper = " ".join(f"{px(k):.2f},{py(mean[k] + std[k]):.2f}" for k in ks)
        lower = " ".join(f"{px(k):.2f},{py(mean[k] - std[k]):.2f}" for k in reversed(ks))
        line = " ".join(f"{px(k):.2f},{py(mean[k]):.2f}" for k in ks)
        parts.append(f'<polygon points="{upper} {lower}" fill="#1f77b4" fill-opacity="0.2" '
                     f'stroke="none"/>')
        parts.append(f'<polyline points="{line}" fill="none" stroke="#1f77b4" '
                     f'stroke-width="1.5"/>')
        for frac in (0.0, 0.5, 1.0):
            v = lo + frac * (hi - lo)
            parts.append(f'<text x="{pad_l - 6}" y="{py(v) + 4:.2f}" text-anchor="end" '
                         f'font-size="10" font-family="sans-serif">{v:.3g}</text>')
            k = int(round(frac * (n - 1)))
            parts.append(f'<text x="{px(k):.2f}" y="{height - pad_b + 16}" text-anchor="middle" '
                         f'font-size="10" font-family="sans-serif">{k}</text>')
    parts.append(f'<line x1="{pad_l}" y1="{pad_t + h}" x2="{pad_l + w}" y2="{pad_t + h}" '
                 f'stroke="black"/>')
    parts.append(f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{pad_t + h}" stroke="black"/>')
    parts.append(f'<text x="{pad_l + w / 2:.1f}" y="{height - 6}" text-anchor="middle" '
                 f'font-size="11" font-family="sans-serif">epoch</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------- other commands


def cmd_deps(graph_arg: str, kappa: Optional[int] = None,
             horizon: Optional[int] = None) -> dict:
    g = graphs_from_arg(graph_arg)
    rep = analyze(g, kappa, horizon)
    comps = strongly_connected_components(rep.vd.edges, g.n_agents)
    return {"n_agents": g.n_agents, "horizon": horizon, "records": rep.records(),
            "components": [sorted(c) for c in comps]}


def cmd_verify(suite: str, mutate: bool = False, seed: int = 0,
               cases: Optional[int] = None) -> dict:
    from .analysis import SUITES

    if suite not in SUITES:
        raise KeyError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    kw = {"seed": seed}
    if cases is not None and suite in ("theorem1", "theorem2", "dependency-oracles"):
        kw["cases"] = cases
    if mutate:
        if suite != "theorem1":
            raise ValueError("--mutate only applies to the theorem1 suite")
        kw["mutate"] = True
    return SUITES[suite](**kw).to_dict()


def cmd_variance_lab(config: dict) -> dict:
    """Variance comparison on a tabular instance described by ``config``.

    Keys: instance (centered|offset), seed, offset, agent, gamma, noise
    [mu_Q, sigma_Q, mu_Qhat, sigma_Qhat], n_samples, sample_seed.
    """
    from .analysis import brute_force_q, pg_estimators, variance_instance
    from .coupling import derive_index_sets
    from .dependency import gradient_dependency, qhat_sets, value_dependency

    game, policy = variance_instance(config.get("instance", "centered"),
                                     int(config.get("seed", 0)),
                                     float(config.get("offset", 3.0)))
    vd = value_dependency(derive_index_sets(game.graphs))
    gd = gradient_dependency(vd)
    oracle = brute_force_q(game, policy, None, float(config.get("gamma", 0.9)))
    rep = pg_estimators(game, policy, oracle, int(config.get("agent", 1)), gd, qhat_sets(vd, gd),
                        tuple(config.get("noise", (0.0, 1.0, 0.0, 0.5))),
                        int(config.get("n_samples", 100_000)),
                        np.random.default_rng(int(config.get("sample_seed", 1))))
    out = rep.to_dict()
    out["instance"] = config.get("instance", "centered")
    return out


def _emit(obj, out: Optional[str]):
    text = json.dumps(obj, indent=1, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="structured-marl")
    sub = p.add_subparsers(dest="cmd", required=True)

    d = sub.add_parser("deps", help="dependency sets for a coupling graph file or fixture")
    d.add_argument("--graphs", required=True)
    d.add_argument("--kappa", type=int)
    d.add_argument("--horizon", type=int, help="finite horizon; default is the fixed point")
    d.add_argument("--out")

    t = sub.add_parser("train", help="train one variant over several seeds")
    t.add_argument("--env", required=True, help=f"one of {', '.join(BUILTINS)} or a JSON file")
    t.add_argument("--variant", default="exact")
    t.add_argument("--kappa", type=int, help="shorthand for --variant kappa:K")
    t.add_argument("--graphs")
    t.add_argument("--seeds", default="0")
    t.add_argument("--epochs", type=int)
    t.add_argument("--stop-at", type=int, help="stop early without changing the schedule")
    t.add_argument("--out", required=True)

    v = sub.add_parser("verify", help="run a verification suite")
    v.add_argument("--suite", required=True)
    v.add_argument("--mutate", action="store_true")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--cases", type=int)
    v.add_argument("--out")

    lab = sub.add_parser("variance-lab", help="estimator variance comparison")
    lab.add_argument("--config", help="JSON file; defaults are used when omitted")
    lab.add_argument("--out")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.cmd == "deps":
            path = Path(args.graphs)
            if path.exists():
                findings = validate(json.loads(path.read_text()))
                if findings:
                    raise ValueError("; ".join(findings))
            _emit(cmd_deps(args.graphs, args.kappa, args.horizon), args.out)
        elif args.cmd == "train":
            variant = f"kappa:{args.kappa}" if args.kappa is not None else args.variant
            spec = ExperimentSpec(args.env, variant, parse_seeds(args.seeds), args.epochs,
                                  args.out, args.graphs, args.stop_at)
            bundle = cmd_train(spec)
            mean, std = bundle.final20()
            print(f"{bundle.label} {bundle.cfg.variant}: final-20% {mean:.4f} +- {std:.4f} "
                  f"over {len(bundle.ok)} seeds")
            for seed in bundle.failed_seeds:
                print(f"seed {seed} failed", file=sys.stderr)
            return 0 if bundle.ok else 1
        elif args.cmd == "verify":
            res = cmd_verify(args.suite, args.mutate, args.seed, args.cases)
            _emit(res, args.out)
            if args.mutate:
                return 0
            return 0 if res["passed"] else 1
        elif args.cmd == "variance-lab":
            cfg = json.loads(Path(args.config).read_text()) if args.config else {}
            _emit(cmd_variance_lab(cfg), args.out)
    except (KeyError, ValueError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
