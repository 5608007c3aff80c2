"""
Benchmark and rank candidate shapes
===================================

The protocol: warmup, then repeats of (fresh cache, seeded prompt, prefill,
greedy decode). Prefill and decode are timed separately.
"""

# %%
from slmsearch import SearchSpace
from slmsearch.archspace import ArchConfig
from slmsearch.bench import BenchmarkPlan, Ranking, rank_timings, render_report, run_benchmark, run_search
from slmsearch.engine import init_random_weights

cfg = ArchConfig(256, 768, 4, q_heads=4, kv_heads=4, vocab_size=1024, context_len=512)
plan = BenchmarkPlan(prompt_lengths=(16, 64), gen_tokens=16, repeats=3, threads=4)
report = run_benchmark(init_random_weights(cfg, 0, "q4"), plan)
for row in report.summary():
    print(row["prompt_len"], round(row["prefill_tps_mean"], 1), round(row["decode_tps_mean"], 1))
print(report.environment["threads"], "worker threads in use")

# %% [markdown]
# ## A small search
#
# Three depths of one width near a budget. The ranking reads throughput at
# prompt length 64.

# %%
space = SearchSpace(budget=3_000_000, tolerance=0.5, hidden_grid=[256], intermediate_grid=[768],
                    layer_range=(2, 4), head_options=[(4, 4)], vocab_size=1024, context_len=512)
result, raw = run_search(space, plan, Ranking("prefill", prompt_len=64))
print(render_report(result, "md"))

# %%
# re-ranking needs no new measurements
print(render_report(rank_timings(raw, Ranking("decode", prompt_len=64)), "md"))
