"""Max vs probabilistic minimal-set selection for one trained line model.

    python scripts/sampling_ablation.py models/line2d_r0.7_s0.txt --rate 0.7
"""

import argparse
from dataclasses import replace

from rlsac import agent as A
from rlsac import bench as B
from rlsac.scenes import derive_seed, gen_line_scene


def main():
    p = argparse.ArgumentParser()
    p.add_argument("model")
    p.add_argument("--rate", type=float, default=0.7)
    p.add_argument("--scenes", type=int, default=300)
    p.add_argument("--seed", type=int, default=12345)
    args = p.parse_args()
    policy = A.load_model(args.model).policy
    scenes = [gen_line_scene(args.rate, rng_seed=derive_seed(args.seed, i)) for i in range(args.scenes)]
    base = B.EvalConfig(episodes_per_scene=10, steps_per_episode=14, seed=args.seed)
    rows = [("ransac", B.run_method(scenes, "ransac", base))]
    for mode in ("max", "probabilistic"):
        rows.append((f"rlsac-{mode}", B.run_method(scenes, "rlsac", replace(base, sampling_mode=mode), policy)))
    for name, res in rows:
        s = B.summarize(res, "line2d")
        print(f"{name:20s} mAA {s.maa:.3f}  median {s.median_deg:.3f} deg")


if __name__ == "__main__":
    main()
