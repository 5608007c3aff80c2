"""
Sizing a decoder under a parameter budget
=========================================

Count parameters exactly, then list every shape that lands near a budget.
"""

# %%
from slmsearch import ArchConfig, SearchSpace, count_params, enumerate_candidates

# tied embeddings, bias-free layers: vocab*h + L*(2h^2 + 2h*kv + 3hi + 2h) + h
small = ArchConfig(hidden_size=1024, intermediate_size=4864, num_layers=24)
large = ArchConfig(hidden_size=2560, intermediate_size=6816, num_layers=19)
print(f"{count_params(small):,}  {count_params(large):,}")

# %% [markdown]
# Grouped-query attention shrinks the k/v projections. With 4 kv heads instead
# of 16 the same width and depth costs fewer parameters.

# %%
mha = ArchConfig(768, 2046, 9, q_heads=16, kv_heads=16)
gqa = ArchConfig(768, 2046, 9, q_heads=16, kv_heads=4)
print(count_params(mha) - count_params(gqa), "parameters saved by 4 kv groups")

# %% [markdown]
# ## Enumerating a 1.6B window
#
# Hidden sizes step by 64, intermediate sizes by 32, depth 15 to 25.
# Every candidate is within 7% of the budget.

# %%
space = SearchSpace(budget=1_600_000_000, tolerance=0.07, head_options=[(16, 16)],
                    ratio_range=(2, 6))
candidates = enumerate_candidates(space)
print(len(candidates), "candidates")
for c in candidates[:5]:
    print(c.num_layers, c.hidden_size, c.intermediate_size, f"{count_params(c):,}")

# %%
# one intermediate size per (depth, width): the one closest to the budget
solved = enumerate_candidates(space, solve_intermediate=True)
deep = [c for c in solved if c.hidden_size == 2560]
for c in deep:
    print(c.num_layers, c.intermediate_size, f"{count_params(c) / 1e9:.3f}B")
