"""Run a small regularizer-by-seed grid and print the summary table.

Drives the same orchestration as `disoutlab compare` through the Python
API: trains each (regularizer, seed) cell on the procedural digit
dataset and reports mean and standard deviation of test accuracy and of
the train-test gap.  A few minutes at the default sizes; shrink
--epochs / --n-train for a faster look.
"""

import argparse
import time

import numpy as np

from disoutlab import DataConfig, DistortionConfig, TrainConfig, train


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--epochs", type=int, default=6)
    parser.add_argument("--n-train", type=int, default=1500)
    parser.add_argument("--seeds", type=int, default=3)
    args = parser.parse_args()

    regularizers = ("none", "dropout", "disout-element")
    rows = []
    for reg in regularizers:
        accs, gaps = [], []
        for seed in range(args.seeds):
            cfg = TrainConfig(
                preset="mnist_cnn", epochs=args.epochs, batch_size=64,
                lr=0.05, momentum=0.9, seed=seed, regularizer=reg,
                distortion=DistortionConfig(p_target=0.1, gamma=1.0),
                data=DataConfig(source="digits", n_train=args.n_train,
                                n_val=500, seed=0))
            start = time.perf_counter()
            result = train(cfg)
            accs.append(result.final_val_acc)
            gaps.append(result.final_train_acc - result.final_val_acc)
            print(f"{reg:16s} seed {seed}: val {accs[-1]:.4f} "
                  f"gap {gaps[-1]:+.4f} ({time.perf_counter() - start:.0f}s)")
        rows.append((reg, np.mean(accs), np.std(accs),
                     np.mean(gaps), np.std(gaps)))

    print(f"\n{'regularizer':<16} {'test acc':>18} {'train-test gap':>18}")
    for reg, ma, sa, mg, sg in rows:
        print(f"{reg:<16} {ma:>9.4f} +/- {sa:.4f} {mg:>9.4f} +/- {sg:.4f}")


if __name__ == "__main__":
    main()
