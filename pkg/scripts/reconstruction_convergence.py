"""Invert-then-sample reconstruction error of the toy backend versus step count."""

import argparse

from refstyle import synthetic
from refstyle.codec import SpaceToDepth
from refstyle.denoiser import ToyUNetConfig, build_toy_unet
from refstyle.evaluate import relative_l2
from refstyle.pipeline import reconstruct
from refstyle.schedule import build_schedule, plan_timesteps


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--steps", default="5,10,15,30,60,100")
    args = ap.parse_args()

    codec = SpaceToDepth(8)
    sched = build_schedule()
    steps = [int(s) for s in args.steps.split(",")]
    print("seed," + ",".join(f"S={s}" for s in steps))
    for seed in range(args.seeds):
        backend = build_toy_unet(ToyUNetConfig(seed=seed))
        x = codec.encode(synthetic.content_image(seed))
        errs = [relative_l2(reconstruct(x, backend, plan_timesteps(sched, s)), x) for s in steps]
        print(f"{seed}," + ",".join(f"{e:.4f}" for e in errs))


if __name__ == "__main__":
    main()
