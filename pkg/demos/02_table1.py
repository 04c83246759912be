"""Recover the hidden link behind the expected-communication-time table, then rebuild it."""
from dssd.core import VocabConfig
from dssd.harness import table1_report
from dssd.latency import fit_table1_link
from dssd.transport import LinkConfig

payload, ntt = fit_table1_link()
print(f"two-cell fit: full distribution downlink {payload:.4f} ms, NTT {ntt:.4f} ms")

# 8 ms is one 50,000-entry binary16 distribution over 100 Mbps
bits = VocabConfig(50_000, 16).dist_bits
print(f"{bits} bits at 100 Mbps = {LinkConfig(100, 100).tx_ms(bits, 'down')} ms\n")

text, ok, worst = table1_report("md")
print(text)
print(f"all 24 cells within 0.01 ms: {ok} (worst {worst:.4f} ms)")
