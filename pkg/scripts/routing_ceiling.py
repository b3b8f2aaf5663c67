"""How well can any linear router on the pooled vector pick the peak layer?

Fits a multinomial logistic regression (plain numpy, full-batch gradient
descent) from v = sum_i x_i to the peak layer of each token's dominant planted
feature and reports train and held-out accuracy. The router in route-hard is
exactly this function class, so the held-out number bounds its routing accuracy.
"""

import argparse

import numpy as np

from routesae.synthbench import SyntheticSpec, gen_dictionary, gen_samples


def fit_softmax(X, y, n_classes, l2=1e-4, steps=3000, lr=0.5):
    mu, sd = X.mean(0), X.std(0) + 1e-12
    Z = np.hstack([(X - mu) / sd, np.ones((len(X), 1))])
    W = np.zeros((Z.shape[1], n_classes))
    Y = np.eye(n_classes)[y]
    for _ in range(steps):
        logits = Z @ W
        logits -= logits.max(1, keepdims=True)
        P = np.exp(logits)
        P /= P.sum(1, keepdims=True)
        W -= lr * (Z.T @ (P - Y) / len(Z) + l2 * W)

    def predict(Xn):
        return (np.hstack([(Xn - mu) / sd, np.ones((len(Xn), 1))]) @ W).argmax(1)

    return predict


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-train", type=int, default=50_000)
    ap.add_argument("--n-eval", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    spec = SyntheticSpec(seed=args.seed)
    D, peaks = gen_dictionary(spec)
    x, gt = gen_samples(spec, args.n_train)
    xe, gte = gen_samples(spec, args.n_eval, start=args.n_train)
    scales = np.sqrt(spec.d) / np.linalg.norm(x, axis=2).mean(0)

    def pooled(a):
        return (a * scales[None, :, None]).sum(1)

    y, ye = peaks[gt.dominant], peaks[gte.dominant]
    predict = fit_softmax(pooled(x), y, spec.L)
    print(f"majority class       {np.bincount(ye, minlength=spec.L).max() / len(ye):.3f}")
    print(f"linear probe, train  {(predict(pooled(x)) == y).mean():.3f}")
    print(f"linear probe, held   {(predict(pooled(xe)) == ye).mean():.3f}")
    # oracle that sees the unpooled stack: layer with the largest norm
    print(f"argmax-norm layer    {(np.linalg.norm(xe * scales[None, :, None], axis=2).argmax(1) == ye).mean():.3f}")


if __name__ == "__main__":
    main()
