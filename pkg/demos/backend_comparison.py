"""Compare variational inclusion probabilities with a Gibbs chain on a small strong-signal study."""
import numpy as np

from effconn.gibbs import ChainConfig, fit_gibbs
from effconn.simulate import generate, oracle_config, replicate_rng
from effconn.vb import Hyperparameters, fit

data, truth, prior = generate(oracle_config(), replicate_rng(11, 0))
hyper = Hyperparameters(b0=0.01, b1=0.01, init_strategy="ridge", init_nu=0.9)

vb_fit = fit(data, prior, hyper=hyper, seed=0)
chain = fit_gibbs(data, prior, hyper=Hyperparameters(b0=0.01, b1=0.01),
                  config=ChainConfig(n_iters=8000, burn_in=2000, seed=0))

print("true edges      ", np.flatnonzero(truth.gamma[0]) + 1)
print("vb selection    ", np.flatnonzero(vb_fit.selected[0]) + 1)
print("gibbs selection ", np.flatnonzero(chain.selected[0]) + 1)
print(f"max |nu - MPP| = {np.max(np.abs(vb_fit.mpp - chain.mpp)):.3f}")
worst = max(chain.extras["geweke"].items(), key=lambda kv: abs(kv[1]))
print(f"largest Geweke |z|: {worst[0]} = {worst[1]:.2f}")
