"""Lower and upper bounds on the KL reachable with d-dimensional logit factors.

Run with ``python demos/kl_bounds.py``.
"""
import numpy as np

from aotmem.bounds import circle_encoder, encoder_lower_bound, theorem2_bound
from aotmem.task import kl_divergence, make_noisy_lookup_task, make_task


def main():
    # one token per sequence, each mapped to itself: KL of the circle encoder against its scale
    N = 10
    task = make_task(N, 1, np.arange(N)[:, None], np.ones(N), np.eye(N), g=np.arange(N))
    for lam in (5, 20, 80, 160):
        print(f"circle encoder, lambda={lam:3d}: KL={kl_divergence(task, circle_encoder(task, lam).logits()):.3e}")

    # noisy lookup: optimized lower bound versus the explicit construction
    task = make_noisy_lookup_task(10, 1, 0.95, seed=0)
    for d in (1, 2, 4, 9):
        print(f"noisy lookup, d={d}: lower bound {encoder_lower_bound(task, d, restarts=2)[0].lower_bound:.4f}")
    rep, enc = theorem2_bound(task, 1024, shortcut=False)
    print(f"random sign unembedding, d=1024: C={rep.C_jl:.3f}, "
          f"KL {kl_divergence(task, enc.logits()):.4f} <= bound {rep.theorem2_full:.4f}")


if __name__ == "__main__":
    main()
