"""Train the models the acceptance suite evaluates and store them under models/.

Each model gets a ``.cfg`` (the resolved run configuration), the model file and
its per-epoch log. Existing models are skipped unless --force is given.

    python scripts/train_models.py            # everything (a few hours on one core)
    python scripts/train_models.py --only line2d_r0.7_s0
"""

import argparse
import contextlib
import io
import time
from pathlib import Path

from rlsac import cli

MODELS = Path(__file__).resolve().parents[1] / "models"

# reduced protocol: small networks, fewer scenes and epochs than the 100-epoch recipe
LINE_ARGS = ["--task", "line2d", "--scenes", "1000", "--epochs", "5", "--edgeconv-layers", "1",
             "--hidden-width", "16", "--head-width", "16", "--updates-per-step", "0.5", "--alpha", "0.2"]
F_ARGS = ["--task", "fundamental", "--scenes", "600", "--epochs", "4", "--edgeconv-layers", "1",
          "--hidden-width", "16", "--head-width", "16", "--updates-per-step", "0.5", "--alpha", "0.2"]

JOBS = {
    "line2d_r0.7_s0": [*LINE_ARGS, "--outlier-rate", "0.7", "--seed", "0"],
    "line2d_r0.5_s0": [*LINE_ARGS, "--outlier-rate", "0.5", "--seed", "0"],
    "fundamental_r0.4_s0": [*F_ARGS, "--outlier-rate", "0.4", "--seed", "0"],
    **{f"line2d_r{rate}_s{seed}": [*LINE_ARGS, "--outlier-rate", rate, "--seed", str(seed)]
       for rate, seed in (("0.6", 0), ("0.7", 1), ("0.6", 1), ("0.7", 2), ("0.6", 2))},
}


def write_config(name: str, args: list[str]) -> Path:
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        assert cli.main(["train", "--dump-config", *args]) == 0
    path = MODELS / f"{name}.cfg"
    path.write_text(f"# training run for {name}.txt (scripts/train_models.py)\n" + buf.getvalue())
    return path


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--only", nargs="*", help="job names to run")
    p.add_argument("--force", action="store_true")
    p.add_argument("--configs-only", action="store_true", help="write .cfg files and stop")
    args = p.parse_args()
    MODELS.mkdir(exist_ok=True)
    for name, job in JOBS.items():
        if args.only and name not in args.only:
            continue
        cfg = write_config(name, job)
        model = MODELS / f"{name}.txt"
        if args.configs_only or (model.exists() and not args.force):
            continue
        t0 = time.time()
        code = cli.main(["train", "--config", str(cfg), "--out", str(model)])
        print(f"{name}: exit {code} after {(time.time() - t0) / 60:.1f} min", flush=True)


if __name__ == "__main__":
    main()
