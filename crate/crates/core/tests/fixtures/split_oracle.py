"""Independent reference for the molecule-level split.

Writes split_seed42_100.json: ids mol-000..mol-099, seed 42, fractions
0.8/0.1/0.1.
"""
import json
import math
import pathlib

MASK = (1 << 64) - 1


def splitmix64(state):
    while True:
        state = (state + 0x9E3779B97F4A7C15) & MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        yield z ^ (z >> 31)


def split(ids, seed, fractions):
    ids = sorted(set(ids))
    gen = splitmix64(seed)
    for i in range(len(ids) - 1, 0, -1):
        j = next(gen) % (i + 1)
        ids[i], ids[j] = ids[j], ids[i]
    n = len(ids)
    n_val = math.floor(fractions[1] * n + 1e-9)
    n_test = math.floor(fractions[2] * n + 1e-9)
    n_train = n - n_val - n_test
    return ids[:n_train], ids[n_train:n_train + n_val], ids[n_train + n_val:]


if __name__ == "__main__":
    train, val, test = split([f"mol-{k:03d}" for k in range(100)], 42, (0.8, 0.1, 0.1))
    out = pathlib.Path(__file__).with_name("split_seed42_100.json")
    out.write_text(json.dumps({"train": train, "val": val, "test": test}, indent=1) + "\n")
