"""Regenerates sgf_golden.json with numpy as an independent reference.

Run from this directory: python3 gen_sgf_golden.py
"""
import json
import math

import numpy as np

SEED = 17
D_E, D_C, D_PROJ = 3, 2, 4
F, B, R = 3, 4, 2


def weight(seed, i, j):
    return (((i * 2654435761 + j * 40503 + seed) % 65536) / 65536 - 0.5) * 0.2


def weights(rows, cols):
    return np.array([[weight(SEED, i, j) for j in range(cols)] for i in range(rows)])


def tensor(tag, rows, cols):
    return np.array(
        [[round(math.sin(1.7 * tag + 0.61 * i + 0.37 * j * (j + 1)), 6) for j in range(cols)] for i in range(rows)]
    )


e_f, e_b, e_r = tensor(1, F, D_E), tensor(2, B, D_E), tensor(3, R, D_E)
c_f, c_b, c_r = tensor(4, F, D_C), tensor(5, B, D_C), tensor(6, R, D_C)
w_q = weights(D_E + D_C, D_PROJ)
w_k = weights(D_E + D_C, D_PROJ)
w_o = weights(2 * D_E, D_E)

queries = np.concatenate([e_f, c_f], axis=1)
values = np.concatenate([e_b, e_r], axis=0)
keys = np.concatenate([values, np.concatenate([c_b, c_r], axis=0)], axis=1)
scores = (queries @ w_q) @ (keys @ w_k).T / math.sqrt(D_PROJ)
shifted = np.exp(scores - scores.max(axis=1, keepdims=True))
soft = shifted / shifted.sum(axis=1, keepdims=True)
weighted = soft @ values
modulated = np.concatenate([e_f, weighted], axis=1) @ w_o

golden = {
    "seed": SEED,
    "dims": {"d_e": D_E, "d_c": D_C, "d_proj": D_PROJ},
    "inputs": {k: v.tolist() for k, v in
               dict(e_f=e_f, e_b=e_b, e_r=e_r, c_f=c_f, c_b=c_b, c_r=c_r).items()},
    "expected": {
        "scores": scores.tolist(),
        "weights": soft.tolist(),
        "weighted": weighted.tolist(),
        "modulated": modulated.tolist(),
    },
}
with open("sgf_golden.json", "w") as fh:
    json.dump(golden, fh, indent=1)
    fh.write("\n")
