"""Train a small fully-connected ReLU classifier on a synthetic tabular
dataset and write it in the model/instance formats read by `axp`.

    python scripts/make_fixture.py --features 13 --layers 4 --width 16 \
        --seed 0 --out crates/core/fixtures/mlp13_l4
"""

import argparse
import json
import os

import numpy as np


def make_table(rng, n_rows, n_features):
    x = rng.uniform(0.0, 1.0, size=(n_rows, n_features))
    w = rng.normal(size=n_features)
    score = x @ w + 0.8 * np.sin(3.0 * x[:, 0]) * x[:, 1] - 0.5 * (x[:, 2] - 0.5) ** 2
    y = (score > np.median(score)).astype(int)
    return x, y


def train(rng, x, y, widths, classes, epochs, batch, lr):
    dims = [x.shape[1]] + widths + [classes]
    params = []
    for a, b in zip(dims[:-1], dims[1:]):
        params.append([rng.normal(scale=np.sqrt(2.0 / a), size=(b, a)), np.zeros(b)])
    onehot = np.eye(classes)[y]
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch):
            idx = order[start:start + batch]
            acts = [x[idx]]
            pres = []
            for k, (w, b) in enumerate(params):
                z = acts[-1] @ w.T + b
                pres.append(z)
                acts.append(np.maximum(z, 0.0) if k < len(params) - 1 else z)
            logits = acts[-1]
            p = np.exp(logits - logits.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            grad = (p - onehot[idx]) / len(idx)
            for k in range(len(params) - 1, -1, -1):
                w, b = params[k]
                gw = grad.T @ acts[k]
                gb = grad.sum(axis=0)
                if k > 0:
                    grad = (grad @ w) * (pres[k - 1] > 0)
                params[k][0] = w - lr * gw
                params[k][1] = b - lr * gb
    return params


def forward(params, x):
    h = x
    for k, (w, b) in enumerate(params):
        h = h @ w.T + b
        if k < len(params) - 1:
            h = np.maximum(h, 0.0)
    return h


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--features", type=int, default=13)
    ap.add_argument("--layers", type=int, default=4)
    ap.add_argument("--width", type=int, default=16)
    ap.add_argument("--rows", type=int, default=300)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--instances", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--name", default=None)
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    x, y = make_table(rng, args.rows, args.features)
    split = int(0.9 * len(x))
    widths = [args.width] * args.layers
    params = train(rng, x[:split], y[:split], widths, 2, args.epochs, 4, 0.01)
    acc = float((forward(params, x[split:]).argmax(axis=1) == y[split:]).mean())

    names = [f"f{i + 1}" for i in range(args.features)]
    name = args.name or os.path.basename(args.out)
    model = {
        "name": name,
        "features": [{"name": n, "lb": 0.0, "ub": 1.0} for n in names],
        "classes": ["neg", "pos"],
        "layers": [
            {
                "weights": [[float(v) for v in row] for row in w],
                "bias": [float(v) for v in b],
                "activation": "relu" if k < len(params) - 1 else "linear",
            }
            for k, (w, b) in enumerate(params)
        ],
    }
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    with open(args.out + ".json", "w") as f:
        json.dump(model, f, indent=1)
        f.write("\n")
    test = x[split:split + args.instances]
    with open(args.out + ".csv", "w") as f:
        f.write(",".join(names) + "\n")
        for row in test:
            f.write(",".join(repr(float(v)) for v in row) + "\n")
    print(f"{name}: test accuracy {acc:.3f}, {len(test)} instances")


if __name__ == "__main__":
    main()
