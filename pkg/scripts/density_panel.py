"""Fit small flows to the built-in 2-D synthetic densities and report the
exact-likelihood diagnostics: held-out NLL against the mixture's Monte-Carlo
entropy, quadrature mass of exp(log_prob), and manifold coverage for the
bimodal two-moons set.

Run from the repo root:  python3 scripts/density_panel.py --steps 2000
"""
import argparse
import sys
import time
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from nfrl.autodiff import Adam, Tape
from nfrl.densities import TwoGaussMixture, two_moons
from nfrl.flow import ConditionContext, FlowConfig, FlowModel
from nfrl.objectives import MleBatch, mle_loss


def fit(model, data, steps, lr, lr_final, batch, seed):
    opt = Adam(model.store, lr)
    rng = np.random.default_rng(seed)
    for step in range(steps):
        opt.lr = lr + (lr_final - lr) * step / max(steps - 1, 1)
        idx = rng.integers(0, data.shape[0], size=batch)
        tape = Tape(model.store)
        mle_loss(model, MleBatch(data[idx], ConditionContext.unconditional(batch), 0.0),
                 tape, rng)
        opt.step(tape.grad)
    return model


def quadrature_mass(model, lo=-6.0, hi=6.0, n=400):
    xs = np.linspace(lo, hi, n)
    gx, gy = np.meshgrid(xs, xs)
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
    return float(np.sum(np.exp(model.log_prob_values(grid))) * (xs[1] - xs[0]) ** 2)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--moons-steps", type=int, default=5000)
    ap.add_argument("--blocks", type=int, default=4)
    ap.add_argument("--channels", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    t0 = time.time()

    # two-gauss: NLL has an exact target, the mixture entropy
    mix = TwoGaussMixture()
    rng = np.random.default_rng(args.seed)
    model = FlowModel(FlowConfig(event_dim=2, blocks=args.blocks,
                                 channels=args.channels, encoder_layers=1,
                                 rep_dim=4, seed=args.seed + 1))
    fit(model, mix.sample(rng, 20_000), args.steps, 4e-3, 5e-4, 384, args.seed + 2)
    ent = mix.mc_entropy(np.random.default_rng(args.seed + 3))
    nll = -float(np.mean(model.log_prob_values(
        mix.sample(np.random.default_rng(args.seed + 4), 100_000))))
    print(f"two-gauss  nll {nll:.4f}  entropy {ent:.4f}  gap {nll - ent:+.4f}  "
          f"mass {quadrature_mass(model):.4f}  [{time.time() - t0:.0f}s]")

    # two-moons: no closed-form entropy; report mass and manifold coverage
    moons = FlowModel(FlowConfig(event_dim=2, blocks=6, channels=64,
                                 encoder_layers=1, rep_dim=4, seed=args.seed + 5))
    data = two_moons(np.random.default_rng(args.seed + 6), 20_000, noise=0.06)
    fit(moons, data, args.moons_steps, 4e-3, 3e-4, 384, args.seed + 7)
    ref = two_moons(np.random.default_rng(args.seed + 8), 10_000, noise=0.0)
    x, _ = moons.sample_values(ConditionContext.unconditional(100_000),
                               np.random.default_rng(args.seed + 9))
    near = np.mean(cKDTree(ref).query(x, k=1)[0] <= 0.2)
    print(f"two-moons  mass {quadrature_mass(moons):.4f}  "
          f"coverage(0.2) {near:.4f}  [{time.time() - t0:.0f}s]")


if __name__ == "__main__":
    main()
