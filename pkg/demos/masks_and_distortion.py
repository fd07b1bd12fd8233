"""Show what the three mask flavors look like and how distortion is applied.

Samples element and block masks, prints their empirical drop fractions
against the configured rate, then walks one feature map through
init -> distort -> rescale so the arithmetic is visible.
"""

import argparse

import numpy as np

from disoutlab import (
    apply_distortion,
    init_distortion,
    sample_block_mask,
    sample_element_mask,
)


def render(grid) -> str:
    return "\n".join("".join("#" if v else "." for v in row) for row in grid)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--p", type=float, default=0.2)
    parser.add_argument("--block-size", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)

    element = sample_element_mask((2000, 4, 12, 12), args.p, rng)
    print(f"element mask: target p={args.p}, "
          f"empirical {element.mean():.4f} over {element.size} cells")

    block = sample_block_mask((2000, 4, 12, 12), args.p, args.block_size, rng)
    print(f"block mask (b={args.block_size}): target p={args.p}, "
          f"empirical {block.mean():.4f}")

    print("\none block-mask channel (#=dropped):")
    print(render(block[0, 0]))

    # Distortion replaces dropped activations by (value - epsilon), then
    # rescales by 1/(1-p) like inverted dropout.
    feats = rng.standard_normal((1, 6)).astype(np.float32)
    mask = sample_element_mask(feats.shape, 0.5, rng)
    eps = init_distortion(feats)
    out = apply_distortion(feats, mask, 0.5 * eps, 0.5)
    print("\nfeatures :", np.array2string(feats[0], precision=3))
    print("mask     :", mask[0].astype(int))
    print("distorted:", np.array2string(out[0], precision=3))
    kept = mask[0] == 0
    print(f"kept entries scale by 1/(1-p) = {1 / 0.5:.1f}: "
          f"{np.allclose(out[0][kept], feats[0][kept] * 2)}")


if __name__ == "__main__":
    main()
