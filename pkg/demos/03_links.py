"""DSD against DSSD across the NTT x bandwidth grid.

DSD ships gamma full distributions up every round, so its communication time
scales with 1/bandwidth.  DSSD ships a few dozen bytes up and at most one
distribution down, and only when a draft token is rejected.
"""
from dssd.harness import ExperimentConfig, cmd_run

cfg = ExperimentConfig(modes=("dsd", "dssd"), gammas=(8,), alphas=(0.61,), rounds=500,
                       n_contexts=16)
rows = cmd_run(cfg)

print(f"{'ntt':>5} {'Mbps':>5} | {'DSD t_comm':>10} {'speedup':>7} | "
      f"{'DSSD t_comm':>11} {'speedup':>7} {'pred':>6}")
pairs = {}
for r in rows:
    pairs.setdefault((r["ntt_ms"], r["up_mbps"]), {})[r["mode"]] = r
for (ntt, bw), m in pairs.items():
    d, s = m["dsd"], m["dssd"]
    print(f"{ntt:5.0f} {bw:5.0f} | {d['t_comm_ms_measured']:10.2f} {d['speedup_measured']:7.3f} | "
          f"{s['t_comm_ms_measured']:11.2f} {s['speedup_measured']:7.3f} "
          f"{s['speedup_predicted']:6.3f}")
up = {r["mode"]: r["uplink_bytes_per_round"] for r in rows}
print(f"\nuplink per round: DSD {up['dsd']:.0f} bytes, DSSD {up['dssd']:.1f} bytes")
