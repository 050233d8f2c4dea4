"""RANSAC on the line task across outlier rates at a 150-hypothesis budget.

    python scripts/ransac_baseline.py --scenes 1000 --inlier-noise 0.1
"""

import argparse

from rlsac import bench as B
from rlsac.scenes import derive_seed, gen_line_scene

REFERENCE = {0.1: (0.870, 0.049), 0.2: (0.863, 0.052), 0.3: (0.850, 0.056), 0.4: (0.829, 0.061),
             0.5: (0.796, 0.071), 0.6: (0.746, 0.087), 0.7: (0.608, 0.135)}


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--scenes", type=int, default=1000)
    p.add_argument("--inlier-noise", type=float, default=0.1)
    p.add_argument("--rates", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7")
    p.add_argument("--seed", type=int, default=7)
    args = p.parse_args()
    cfg = B.EvalConfig(episodes_per_scene=10, steps_per_episode=14, seed=args.seed)
    print(f"{'rate':>5} {'mAA':>7} {'ref':>6} {'median':>8} {'ref':>6}")
    for rate in map(float, args.rates.split(",")):
        scenes = [gen_line_scene(rate, rng_seed=derive_seed(args.seed, i), inlier_noise=args.inlier_noise)
                  for i in range(args.scenes)]
        s = B.summarize(B.run_method(scenes, "ransac", cfg), "line2d")
        ref_maa, ref_med = REFERENCE.get(rate, (float("nan"),) * 2)
        print(f"{rate:5.1f} {s.maa:7.3f} {ref_maa:6.3f} {s.median_deg:8.3f} {ref_med:6.3f}")


if __name__ == "__main__":
    main()
