"""Longer drafts are not free: the best draft length sits inside the swept range.

Each extra draft token costs T_SLM and raises the chance a distribution has to
come back down, while its expected contribution shrinks geometrically.
"""
from dssd.harness import ExperimentConfig, cmd_sweep_gamma

cfg = ExperimentConfig(modes=("dssd",), alphas=(0.5,), ntt_ms=(20.0,), bandwidth_mbps=(100.0,),
                       t_slm_ms=2.0, t_llm_ms=100.0, rounds=2000, n_contexts=16)
rows, best = cmd_sweep_gamma(cfg, (2, 4, 6, 8, 12, 16))
for r in rows:
    bar = "#" * int(40 * (r["speedup_measured"] - 1))
    print(f"gamma={r['gamma']:2d}  measured {r['speedup_measured']:.3f}  "
          f"predicted {r['speedup_predicted']:.3f}  {bar}")
(cols,) = best.values()
print(f"\nargmax gamma: measured {cols['speedup_measured'][0]}, "
      f"predicted {cols['speedup_predicted'][0]}")
