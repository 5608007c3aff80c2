"""
4-bit block quantization and INT8 rotary tables
===============================================
"""

# %%
import numpy as np

from slmsearch.quantkit import (
    apply_rope,
    build_rope_tables,
    dequantize_q4,
    pack_q4_codes,
    q4_matvec,
    quantize_q4,
    quantize_rope,
)

rng = np.random.default_rng(0)
w = rng.normal(size=(8, 12))
t = quantize_q4(w)
print(t.block_scales.shape, t.codes.min(), t.codes.max())

# %% [markdown]
# Each 4x4 block keeps a float32 scale (absmax / 7) and codes in [-7, 7].
# Rounding to the nearest code bounds every element's error by absmax / 14.

# %%
err = np.abs(dequantize_q4(t) - w)
absmax = np.abs(w.reshape(2, 4, 3, 4)).max(axis=(1, 3))
bound = np.repeat(np.repeat(absmax, 4, 0), 4, 1) / 14
print("worst error / bound:", (err / bound).max())

# %%
# two codes per byte, so a 4x4 block packs into 8 bytes plus its scale
print(len(pack_q4_codes(t.codes)), "bytes of codes for", w.size, "weights")

x = rng.normal(size=12)
print(np.abs(q4_matvec(x, t) - dequantize_q4(t) @ x).max())

# %% [markdown]
# ## Rotary tables in INT8
#
# cos/sin tables are stored as floor(v / max * 127 + 0.5). Reconstruction
# error stays within max / 254.

# %%
tables = build_rope_tables(context_len=2048, head_dim=64)
q8 = quantize_rope(tables)
rec = q8.dequantize()
print(np.abs(rec.cos - tables.cos).max(), q8.cos_max / 254)
print(q8.cos_int8[0, :8])

# %%
q = rng.normal(size=(16, 64))
exact, _ = apply_rope(q, q, tables, 100)
approx, _ = apply_rope(q, q, q8, 100)
print("rotated with int8 tables, max deviation:", np.abs(exact - approx).max())
