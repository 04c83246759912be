"""Run the device and edge in separate threads over a loopback socket.

Bandwidth and NTT are imposed by sleeping; model compute by sleeping for the
declared latencies.  The tokens match the simulated run with the same seed.
"""
from dssd.harness import ExperimentConfig, model_pair, prompt_fixture
from dssd.transport import LinkConfig, SocketOptions, run_session

cfg = ExperimentConfig(vocab_size=50_000, n_contexts=16)
Mq, Mp, alpha = model_pair(cfg, 0.61, seed=0)
prompt = prompt_fixture(0, 128, cfg.vocab_size)
link = LinkConfig(100, 100, 20)

sim = run_session("dssd", Mq, Mp, 8, link, cfg.vocab, 128, 0, prompt)
wall = run_session("dssd", Mq, Mp, 8, link, cfg.vocab, 128, 0, prompt, transport="socket",
                   socket_opts=SocketOptions())

print(f"constructed alpha {alpha:.4f}")
for tr in (sim, wall):
    print(f"{tr.clock:>7} clock: {len(tr.tokens)} tokens in {len(tr.rounds)} rounds, "
          f"{tr.total_ms:.0f} ms, {tr.throughput_tps:.1f} tok/s, "
          f"alpha measured {tr.alpha_measured:.3f}")
print("identical transcripts:", sim.tokens == wall.tokens)
