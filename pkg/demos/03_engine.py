"""
A toy decoder end to end
========================

Random weights, a KV cache, greedy decoding, and the float vs q4 paths.
"""

# %%
import numpy as np

from slmsearch.archspace import ArchConfig
from slmsearch.engine import KVCache, decode_step, forward, greedy_generate, init_random_weights, prefill

cfg = ArchConfig(64, 176, 2, q_heads=4, kv_heads=2, vocab_size=256, context_len=256)
float_model = init_random_weights(cfg, seed=0, precision="float")
q4_model = init_random_weights(cfg, seed=0, precision="q4")

prompt = np.random.default_rng(1).integers(0, 256, 24)
print(greedy_generate(q4_model, prompt, 10))

# %% [markdown]
# Feeding the prompt in two pieces through one cache gives the same logits as
# a single prefill.

# %%
whole = prefill(float_model, prompt, KVCache(cfg))
cache = KVCache(cfg)
prefill(float_model, prompt[:10], cache)
pieces = prefill(float_model, prompt[10:], cache)
print(np.abs(whole - pieces).max(), cache.length)

# %%
# causality: changing the tail leaves earlier logits bit-identical
a = forward(float_model, prompt, KVCache(cfg), all_logits=True)
b_prompt = prompt.copy()
b_prompt[12:] = 0
b = forward(float_model, b_prompt, KVCache(cfg), all_logits=True)
print(np.array_equal(a[:12], b[:12]))

# %%
cache = KVCache(cfg)
logits = prefill(q4_model, prompt, cache)
for _ in range(3):
    logits = decode_step(q4_model, int(np.argmax(logits)), cache)
print("cache length after 3 decode steps:", cache.length)

# %% [markdown]
# ## How much does 4-bit storage move the output?
#
# At h=64 each 4x4 block holds few weights, so quantization noise is large
# relative to the signal.

# %%
for seed in range(3):
    f = prefill(init_random_weights(cfg, seed, "float"), prompt, KVCache(cfg))
    q = prefill(init_random_weights(cfg, seed, "q4"), prompt, KVCache(cfg))
    print(seed, round(float(f @ q / np.linalg.norm(f) / np.linalg.norm(q)), 4))
