"""Regenerate tests/fixtures/overfit: 20 items, 40 distinct (prefix, label) pairs."""
from pathlib import Path

import numpy as np

from disengnn.data import PreparedDataset, save_dataset

OUT = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "overfit"


def build(seed: int = 3, n_items: int = 20, n_pairs: int = 40) -> PreparedDataset:
    rng = np.random.default_rng(seed)
    pairs, seen = [], set()
    while len(pairs) < n_pairs:
        seq = tuple(int(x) for x in rng.integers(0, n_items, int(rng.integers(1, 5))))
        if seq in seen:
            continue
        seen.add(seq)
        pairs.append((list(seq), int(rng.integers(0, n_items))))
    vocab = [f"i{i:02d}" for i in range(n_items)]
    # train and test share the pairs: the point is memorisation
    return PreparedDataset(vocab, pairs, [], list(pairs), {"items": n_items, "train_pairs": n_pairs})


if __name__ == "__main__":
    save_dataset(build(), OUT)
    print(f"wrote {OUT}")
