"""Split verification does not change what gets generated.

Draws random target/draft pairs and shows the first emitted token follows the
target distribution exactly, then shows the inverted min(1, q/p) rule does not.
"""
import numpy as np

from dssd import first_token_law
from dssd.harness import _inverted_ratio_law, cmd_verify_exactness

rng = np.random.default_rng(0)
P, Q = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
print("target P      ", np.round(P, 4))
print("draft Q       ", np.round(Q, 4))
print("law, p/q rule ", np.round(first_token_law(P, Q), 4))
print("law, q/p rule ", np.round(_inverted_ratio_law(P, Q), 4))
print()

for line in cmd_verify_exactness(vocab_size=8, trials=1000, samples=100_000).lines():
    print(line)
print()
for line in cmd_verify_exactness(vocab_size=8, trials=1000, samples=100_000,
                                 inverted_ratio=True).lines():
    print(line)
