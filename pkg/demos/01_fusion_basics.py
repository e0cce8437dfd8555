"""Fusion gate walkthrough: how a control code becomes adapter weights.

Run with ``python3 demos/01_fusion_basics.py``.  Nothing is trained here;
everything is computed on a freshly initialised toy model in a second or two.
"""

# %% imports
import numpy as np

from lifi import AdapterBank, AdapterFusion, FusionGate, ModelConfig, Transformer
from lifi.fusion import make_test_code, weights_at_temperature

np.set_printoptions(precision=3, suppress=True)

# %% a code is just a vector of logits; the gate softmaxes it at temperature T
code = np.array([2.5, -1.0, 0.3])
for T in (0.25, 1.0, 4.0, 16.0):
    print(f"T={T:<5} weights={weights_at_temperature(code, T)}")
# larger T flattens toward uniform, smaller T sharpens toward the argmax

# %% adding a constant to every entry changes nothing
print("shifted:", weights_at_temperature(code + 10.0, 1.0))

# %% at test time the code is alpha * e_target
for alpha in (0.5, 1, 2, 4, 8):
    w = weights_at_temperature(make_test_code(0, alpha, 4).values, 1.0)
    print(f"alpha={alpha:<4} target weight={w[0]:.3f}")
# with four attributes, alpha=4 at T=1 leaves about 5% of the mass on the others

# %% fresh adapters are invisible: up-projections start at zero
cfg = ModelConfig(n_layers=2, d_model=32, n_heads=4, vocab_size=20, n_ctx=16)
base = Transformer(cfg, seed=0)
fusion = AdapterFusion(AdapterBank(["pos", "neg"], cfg, r_ffn=4, seed=1), FusionGate(cfg.n_layers))
ids = np.random.default_rng(0).integers(0, cfg.vocab_size, size=(3, 10))
same = np.array_equal(base.logits(ids).data, base.logits(ids, code=[3.0, -2.0], fusion=fusion).data)
print("identical logits at init:", same)

# %% parameter overhead
from lifi.adapters import count_extra_params
extra = count_extra_params(fusion.bank, cfg)
print(f"base {base.num_params()} params, adapters+gates {extra} ({extra / base.num_params():.2%})")
