"""Command line: ``rlsac {train,eval,bench,gen}``.

Every flag mirrors a ``RunConfig`` field (``outlier_rate`` -> ``--outlier-rate``).
A ``key = value`` file given with ``--config`` is applied first, explicit
flags override it, and ``--dump-config`` prints the merged result.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import agent as ag
from . import bench
from .env import EpisodeConfig, SceneDegenerateError
from .scenes import F_TASK, LINE_TASK, TASKS, SceneData, derive_seed, make_scene, save_scene

log = logging.getLogger("rlsac")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

# seed streams, so training, evaluation and generated scenes never coincide
TRAIN_STREAM, EVAL_STREAM, GEN_STREAM = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    task: str = LINE_TASK
    seed: int = 0
    outlier_rate: float = 0.5
    rates: str = "0.1,0.2,0.3,0.4,0.5,0.6,0.7"
    n_points: int | None = None  # task default: 100 lines, 150 correspondences
    inlier_noise: float = 0.1
    pixel_noise: float = 0.5
    count: int = 10
    scenes: int = 1000
    eval_scenes: int = 1000
    # episodes
    kappa: int = 2
    sigma_no_improve: int = 3
    psi: int = 15
    epsilon: float | None = None
    # training
    epochs: int = 100
    gamma: float = 0.95
    polyak: float = 0.005
    lr: float = 3e-4
    batch_size: int = 64
    alpha: float = 0.2
    updates_per_step: float = 1.0
    warmup: int = 500
    buffer_capacity: int = 100_000
    train_sampling: str = "probabilistic"
    # network
    k_neighbors: int = 15
    edgeconv_layers: int = 2
    hidden_width: int = 64
    head_width: int = 64
    # evaluation
    episodes: int = 10
    steps: int | None = None  # task default: 14 lines (150 hypotheses), 15 fundamental (160)
    eval_sampling: str = "max"
    timing: bool = False
    # paths
    out: str | None = None
    model: str | None = None
    shared_model: str | None = None
    model_template: str | None = None  # e.g. models/line2d_r{rate}_s0.txt
    results: str | None = None
    summary: str | None = None
    log: str | None = None
    plot_data: str | None = None
    step_log: str | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise UsageError(f"--task must be one of {TASKS}, got {self.task!r}")
        if not 0.0 <= self.outlier_rate < 1.0:
            raise UsageError("--outlier-rate must lie in [0, 1)")
        for name in ("train_sampling", "eval_sampling"):
            if getattr(self, name) not in ag.SELECTORS:
                raise UsageError(f"--{name.replace('_', '-')} must be one of {sorted(ag.SELECTORS)}")

    @property
    def points(self) -> int:
        return self.n_points or (100 if self.task == LINE_TASK else 150)

    @property
    def eval_steps(self) -> int:
        return self.steps if self.steps is not None else (14 if self.task == LINE_TASK else 15)

    def rate_list(self) -> list[float]:
        try:
            return [float(r) for r in self.rates.split(",") if r.strip()]
        except ValueError as exc:
            raise UsageError(f"--rates: {exc}") from exc

    def episode_config(self) -> EpisodeConfig:
        return EpisodeConfig(self.kappa, self.sigma_no_improve, self.psi, self.epsilon, train_mode=True)

    def policy_config(self) -> ag.PolicyConfig:
        return ag.PolicyConfig(self.k_neighbors, self.edgeconv_layers, self.hidden_width, self.head_width)

    def train_config(self) -> ag.TrainConfig:
        return ag.TrainConfig(gamma=self.gamma, polyak=self.polyak, learning_rate=self.lr,
                              batch_size=self.batch_size, alpha=self.alpha,
                              updates_per_step=self.updates_per_step, warmup=self.warmup,
                              epochs=self.epochs, scenes_per_epoch=self.scenes,
                              buffer_capacity=self.buffer_capacity, sampling_mode=self.train_sampling)

    def eval_config(self) -> bench.EvalConfig:
        return bench.EvalConfig(self.episodes, self.eval_steps, self.eval_sampling, self.epsilon,
                                self.seed, self.timing)


# -- config plumbing ---------------------------------------------------------------------

def _field_type(f: dataclasses.Field):
    return type(f.default) if f.default is not None else (
        float if "float" in str(f.type) else int if "int" in str(f.type) else str)


def _convert(f: dataclasses.Field, text: str):
    if text.lower() == "none":
        if f.default is not None:
            raise UsageError(f"{f.name} cannot be none")
        return None
    kind = _field_type(f)
    if kind is bool:
        if text.lower() not in ("true", "false", "1", "0"):
            raise UsageError(f"{f.name}: expected true/false, got {text!r}")
        return text.lower() in ("true", "1")
    try:
        return kind(text)
    except ValueError as exc:
        raise UsageError(f"{f.name}: cannot parse {text!r}") from exc


FIELDS = {f.name: f for f in fields(RunConfig)}


def read_config_file(path) -> dict:
    out = {}
    lines = Path(path).read_text().splitlines()
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in FIELDS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _convert(FIELDS[key], val)
    return out


def _config_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {_config_value(getattr(cfg, f.name))}\n" for f in fields(cfg))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rlsac", description="Learned minimal-set sampling for robust estimation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_text in (("train", "train a policy on generated scenes"),
                            ("eval", "evaluate a model against budget-matched RANSAC"),
                            ("bench", "sweep outlier rates"),
                            ("gen", "write seeded scene files")):
        p = sub.add_parser(name, help=help_text, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="key = value file applied before the flags")
        p.add_argument("--dump-config", action="store_true", help="print the merged config and exit")
        p.add_argument("-v", "--verbose", action="store_true")
        for f in fields(RunConfig):
            flag = "--" + f.name.replace("_", "-")
            p.add_argument(flag, dest=f.name, metavar=f.name.upper(), type=str)
    return parser


def resolve_config(ns: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(ns, "config", None):
        values.update(read_config_file(ns.config))
    for name, f in FIELDS.items():
        if name in ns:
            values[name] = _convert(f, getattr(ns, name))
    return RunConfig(**values)


# -- io helpers ------------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def write_csv(path, header: Sequence[str], rows) -> None:
    p = Path(path)
    if p.parent and not p.parent.exists():
        p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


RESULT_COLUMNS = ("scene_id", "method", "outlier_rate", "error_deg", "best_inlier_ratio",
                  "hypotheses_used", "wall_ms")
POSE_COLUMNS = ("rotation_deg", "translation_deg")
SUMMARY_COLUMNS = ("method", "outlier_rate", "maa", "median_deg", "n_scenes")
POSE_SUMMARY_COLUMNS = ("maa_rotation", "maa_translation", "median_rotation_deg", "median_translation_deg")


def write_results(path, task: str, results: Sequence[bench.RunResult]) -> None:
    header = RESULT_COLUMNS + (POSE_COLUMNS if task == F_TASK else ())
    rows = ([getattr(r, c) for c in header] for r in results)
    write_csv(path, header, rows)


def write_summary(path, task: str, summaries: Sequence[bench.Summary], transfer: dict | None = None) -> None:
    header = SUMMARY_COLUMNS + (POSE_SUMMARY_COLUMNS if task == F_TASK else ())
    if transfer is not None:
        header = header + ("transfer",)
    rows = []
    for s in summaries:
        row = [s.method, s.outlier_rate, s.maa, s.median_deg, s.n_scenes]
        row += [s.extra[c] for c in POSE_SUMMARY_COLUMNS] if task == F_TASK else []
        if transfer is not None:
            row.append(transfer.get(s.method, False))
        rows.append(row)
    write_csv(path, header, rows)


def scene_set(cfg: RunConfig, stream: int, count: int, rate: float) -> list[SceneData]:
    base = derive_seed(cfg.seed, stream)
    return [make_scene(cfg.task, rate, cfg.points, derive_seed(base, i), inlier_noise=cfg.inlier_noise,
                       pixel_noise_sigma=cfg.pixel_noise) for i in range(count)]


def _load_checked(path, task: str) -> ag.LoadedModel:
    model = ag.load_model(path)
    if model.task != task:
        raise UsageError(f"model {path} was trained for task {model.task!r}, not {task!r}")
    return model


# -- commands --------------------------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> int:
    if not cfg.out:
        raise UsageError("train needs --out")
    scenes = scene_set(cfg, TRAIN_STREAM, cfg.scenes, cfg.outlier_rate)
    in_channels = scenes[0].c + 3 if scenes else (2 if cfg.task == LINE_TASK else 3) + 3
    agent = ag.SACAgent(in_channels, cfg.policy_config(), cfg.train_config(), seed=cfg.seed)
    logs = ag.train(scenes, agent, cfg.episode_config(), seed=cfg.seed)
    Path(cfg.out).parent.mkdir(parents=True, exist_ok=True)
    ag.save_model(agent, cfg.task, cfg.out)
    log_path = cfg.log or str(Path(cfg.out).with_suffix(".log.csv"))
    write_csv(log_path, ag.LOG_COLUMNS, ([getattr(r, c) for c in ag.LOG_COLUMNS] for r in logs))
    if logs:
        last = logs[-1]
        print(f"epoch {last.epoch}: mean_reward={last.mean_reward:.4f} critic_loss={last.critic_loss:.4g} "
              f"actor_loss={last.actor_loss:.4g} buffer={last.buffer_size}")
    else:
        print("no epochs run; model holds the initial parameters")
    print(f"model -> {cfg.out}; log -> {log_path}")
    return EXIT_OK


def _step_rows(results: Sequence[bench.RunResult]):
    for r in results:
        for rec in r.step_log:
            yield (r.scene_id, rec["episode"], rec["step"], " ".join(map(str, rec["action"])),
                   rec["reward"], rec["inlier_count"], rec["done_reason"])


def cmd_eval(cfg: RunConfig) -> int:
    if not cfg.model:
        raise UsageError("eval needs --model")
    model = _load_checked(cfg.model, cfg.task)
    scenes = scene_set(cfg, EVAL_STREAM, cfg.eval_scenes, cfg.outlier_rate)
    ecfg = cfg.eval_config()
    ecfg.record_steps = bool(cfg.step_log)
    results, summaries = bench.evaluate(scenes, ecfg, model.policy)
    out = Path(cfg.out or ".")
    write_results(cfg.results or out / "results.csv", cfg.task, results)
    write_summary(cfg.summary or out / "summary.csv", cfg.task, summaries)
    if cfg.step_log:
        write_csv(cfg.step_log, ("scene_id", "episode", "step", "action", "reward", "inlier_count",
                                 "done_reason"), _step_rows(results))
    for s in summaries:
        print(f"{s.method:>8s} rate={s.outlier_rate:.2f} mAA={s.maa:.4f} median={s.median_deg:.4f} "
              f"n={s.n_scenes}")
    return EXIT_OK


def cmd_bench(cfg: RunConfig) -> int:
    ecfg = cfg.eval_config()
    shared = _load_checked(cfg.shared_model, cfg.task) if cfg.shared_model else None
    results, summaries, transfer = [], [], {}
    for rate in cfg.rate_list():
        scenes = scene_set(cfg, EVAL_STREAM, cfg.eval_scenes, rate)
        policy = None
        if shared is not None:
            policy = shared.policy
            transfer["rlsac"] = True
        elif cfg.model_template:
            path = Path(cfg.model_template.format(rate=rate))
            if path.exists():
                policy = _load_checked(path, cfg.task).policy
            else:
                log.warning("no model at %s; rate %.2f gets the baseline only", path, rate)
        res, summ = bench.evaluate(scenes, ecfg, policy)
        results.extend(res)
        summaries.extend(summ)
        for s in summ:
            print(f"{s.method:>8s} rate={rate:.2f} mAA={s.maa:.4f} median={s.median_deg:.4f}")
    out = Path(cfg.out or ".")
    write_results(cfg.results or out / "bench_results.csv", cfg.task, results)
    write_summary(cfg.summary or out / "bench_summary.csv", cfg.task, summaries,
                  transfer={"rlsac": bool(transfer), "ransac": False})
    write_csv(cfg.plot_data or out / "plot_data.csv", ("rate", "method", "maa", "median"),
              ((s.outlier_rate, s.method, s.maa, s.median_deg) for s in summaries))
    return EXIT_OK


def cmd_gen(cfg: RunConfig) -> int:
    out = Path(cfg.out or "scenes")
    out.mkdir(parents=True, exist_ok=True)
    base = derive_seed(cfg.seed, GEN_STREAM)
    manifest = []
    for i in range(cfg.count):
        seed = derive_seed(base, i)
        scene = make_scene(cfg.task, cfg.outlier_rate, cfg.points, seed, inlier_noise=cfg.inlier_noise,
                           pixel_noise_sigma=cfg.pixel_noise)
        path = out / f"{cfg.task}_{i:05d}.scene"
        save_scene(scene, path)
        manifest.append((path.name, seed, int(scene.true_inlier_mask.sum()), scene.n))
    write_csv(out / "manifest.csv", ("file", "seed", "inliers", "n"), manifest)
    for name, seed, inl, n in manifest:
        print(f"{name} seed={seed} inliers={inl}/{n}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "bench": cmd_bench, "gen": cmd_gen}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        ns = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if getattr(ns, "verbose", False) else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(ns)
        if getattr(ns, "dump_config", False):
            sys.stdout.write(dump_config(cfg))
            return EXIT_OK
        return COMMANDS[ns.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ag.ModelFormatError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, TypeError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ag.TrainingDivergenceError, FloatingPointError, SceneDegenerateError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
