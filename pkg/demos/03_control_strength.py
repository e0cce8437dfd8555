"""Sweep the test-time control strength alpha on a finished run.

    python3 demos/03_control_strength.py runs/demo-sentiment

Loads the base LM, adapters and (cached) judge from a pipeline output
directory and prints correctness, relevance and perplexity per alpha, plus a
few sample continuations at the extremes.
"""

# %% load artifacts
import sys
from pathlib import Path

from lifi.artifacts import load_fusion, load_lm
from lifi.config import config_from_dict
from lifi.generation import alpha_sweep, sample_continuations
from lifi.pipeline import RunManifest, build_instruments, prepare_data

run = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo-sentiment")
manifest = RunManifest.load(run / "manifest.json")
cfg = config_from_dict(manifest.config, env={})
data = prepare_data(cfg)
base, vocab, _ = load_lm(run / "base.ckpt")
fusion, _ = load_fusion(run / "adapters.ckpt")
inst = build_instruments(data, cfg, run)

# %% the sweep
e = cfg.evaluation
table = alpha_sweep(base, fusion, vocab, data.attributes, data.prompts, inst.judge, inst.scoring_lm,
                    grid=e.alpha_grid, k=e.k, num=e.num, max_new_tokens=e.length, seed=1)
print(f"{'alpha':>6} {'correct':>8} {'relevant':>9} {'ppl':>6}  per attribute")
for row in table:
    print(f"{row['alpha']:>6g} {row['correctness']:>8.2f} {row['relevance']:>9.2f} {row['ppl']:>6.2f}  "
          f"{[round(x, 1) for x in row['per_attribute']]}")

# %% what the text looks like
prompt = data.prompts[0]
for alpha in (min(e.alpha_grid), max(e.alpha_grid)):
    for k, name in enumerate(data.attributes):
        c = sample_continuations(base, vocab, [prompt], target=k, alpha=alpha, fusion=fusion, num=1, seed=3)[0][0]
        print(f"alpha={alpha:<4g} {name:>8}: {prompt!r} -> {c.text!r}")
