"""Train one architecture on the default planted-dictionary data and report
dictionary recovery, routing accuracy and the layer-selection histogram."""

import argparse
import time

import numpy as np

from routesae import synthbench, trainer
from routesae.models import ARCHITECTURES


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--arch", default="route-hard", choices=ARCHITECTURES)
    ap.add_argument("--steps", type=int, default=5000)
    ap.add_argument("--n-train", type=int, default=50_000)
    ap.add_argument("--n-eval", type=int, default=10_000)
    ap.add_argument("--M", type=int, default=128)
    ap.add_argument("--k", type=int, default=4)
    ap.add_argument("--lr", type=float, default=5e-4)
    ap.add_argument("--router-init-scale", type=float, default=0.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    spec = synthbench.SyntheticSpec(seed=args.seed)
    x, _ = synthbench.gen_samples(spec, args.n_train)
    scales = np.sqrt(spec.d) / np.linalg.norm(x, axis=2).mean(0)
    cfg = trainer.TrainConfig(architecture=args.arch, M=args.M, k=args.k, total_steps=args.steps,
                              base_lr=args.lr, seed=args.seed, router_init_scale=args.router_init_scale)
    t0 = time.perf_counter()
    ckpt, rows = trainer.train(cfg, x * scales[None, :, None])
    print(f"trained {args.arch} for {args.steps} steps in {time.perf_counter() - t0:.1f}s, "
          f"final loss {np.mean([r.loss for r in rows[-50:]]):.4f}")

    D, peaks = synthbench.gen_dictionary(spec)
    for i, W in enumerate(ckpt.model.decoder_columns()):
        rep = synthbench.recovery_report(D, W, 0.9)
        print(f"decoder {i}: matched fraction {rep.matched_fraction:.3f}, mean |cos| {rep.mean_cos:.3f}")

    xe, gte = synthbench.gen_samples(spec, args.n_eval, start=args.n_train)
    rec = ckpt.model.reconstruct(xe * scales[None, :, None], np.random.default_rng([args.seed, 3, 0]))
    if args.arch.startswith("route"):
        acc, hist = synthbench.routing_accuracy(gte, rec.layer, peaks, spec.L)
        print(f"routing accuracy {acc:.3f}; selection histogram {np.round(hist, 3).tolist()}")
        print(f"planted peak histogram {np.round(np.bincount(peaks[gte.dominant], minlength=spec.L) / len(gte), 3).tolist()}")
        if rec.probs is not None:
            print(f"mean router probabilities {np.round(rec.probs.mean(0), 3).tolist()}")


if __name__ == "__main__":
    main()
