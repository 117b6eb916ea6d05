"""Content/style/output grid on the synthetic images, one row per beta."""

import argparse

import numpy as np

from refstyle import synthetic
from refstyle.codec import SpaceToDepth, write_png
from refstyle.denoiser import ToyUNetConfig, build_toy_unet, load_weights
from refstyle.pipeline import StylizeConfig, stylize


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--betas", default="0,0.2,0.5,0.8,1")
    ap.add_argument("--weights", help="toy weights written by fit_toy_head.py")
    ap.add_argument("--out", default="grid.png")
    args = ap.parse_args()

    backend = load_weights(args.weights) if args.weights else build_toy_unet(ToyUNetConfig(seed=args.seed))
    content, style = synthetic.content_image(args.seed), synthetic.style_image(args.seed)
    rows = []
    for beta in (float(b) for b in args.betas.split(",")):
        cfg = StylizeConfig(alpha=1.0 - beta, beta=beta, seed=args.seed)
        out = stylize(content, style, backend, cfg, codec=SpaceToDepth(8)).image
        rows.append(np.concatenate([content, style, out], axis=1))
    write_png(np.concatenate(rows, axis=0), args.out)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
