"""Fit the toy backend's output head to the denoising objective on synthetic
content images and save the weights. Optional: nothing else needs it."""

import argparse

from refstyle import synthetic
from refstyle.codec import SpaceToDepth
from refstyle.denoiser import ToyUNetConfig, build_toy_unet, fit_output_head, save_weights
from refstyle.schedule import build_schedule


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--images", type=int, default=16)
    ap.add_argument("--samples", type=int, default=8, help="noise draws per image")
    ap.add_argument("--out", default="toy_weights.msfw")
    args = ap.parse_args()

    codec = SpaceToDepth(8)
    sched = build_schedule()
    backend = build_toy_unet(ToyUNetConfig(seed=args.seed), sched)
    latents = [codec.encode(synthetic.content_image(1000 + i)) for i in range(args.images)]
    before, after = fit_output_head(backend, latents, sched, args.samples, seed=args.seed)
    print(f"denoising loss {before:.4f} -> {after:.4f}")
    save_weights(backend, args.out)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
