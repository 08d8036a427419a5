"""
Diffusion on one dimension
==========================

Noise a 1-D Gaussian forward, then run the reverse sampler with the exact
noise predictor for that Gaussian and check that the data distribution comes
back.  No training involved.
"""
import numpy as np

from pathgen.crossmodal import PatchSet
from pathgen.diffusion import build_schedule, forward_sample, sample

# %% the schedule
s = build_schedule(1000)
for t in (1, 10, 100, 500, 1000):
    print(f"t={t:4d}  beta={s.beta[t - 1]:.5f}  abar={s.alpha_bar[t - 1]:.4f}")

# %% forward noising: the data fades into N(0, 1)
mu, sd = 2.0, 0.5
rng = np.random.default_rng(0)
x0 = rng.normal(mu, sd, 10_000)
for t in (1, 100, 300, 1000):
    xt = forward_sample(x0, t, rng.normal(size=x0.shape), s)
    print(f"t={t:4d}  mean {xt.mean():+.3f}  sd {xt.std():.3f}")


# %% a noise predictor that knows the answer
# for Gaussian data the best eps estimate is linear in x_t
class Exact:
    dim = 1

    def predict(self, x_t, t, patches, mask=None):
        ab = s.alpha_bar[t - 1]
        return np.sqrt(1 - ab) * (x_t - np.sqrt(ab) * mu) / (ab * sd ** 2 + 1 - ab)


blank = PatchSet(np.zeros((1, 1)), [(0, 0)])
n = 5000
out = sample(Exact(), [blank] * n, s, list(range(n)))
print(f"sampled mean {out.mean():.3f} (want {mu}), sd {out.std():.3f} (want {sd})")

# %% same betas squeezed into 100 steps
# abar_T is still far from 0, so starting the sampler at N(0, 1) is wrong
# and the mean comes back short
s = build_schedule(100)
print("T=100 abar_T", round(s.alpha_bar[-1], 3))
out = sample(Exact(), [blank] * n, s, list(range(n)))
print(f"T=100: sampled mean {out.mean():.3f}, sd {out.std():.3f}")
