"""
Temporal encoder, prompt sets and key selection
===============================================
"""

# %%
import torch
import torch.nn.functional as F
from pivot_vcil import Dims, TemporalEncoder, prompt_param_count
from pivot_vcil.temporal import count_parameters

f_tp = TemporalEncoder(512, depth=3, heads=2, positional=False)
print("temporal encoder parameters:", f"{count_parameters(f_tp):,}")
print("prompt parameters per task:", prompt_param_count(Dims.vit_b32()))

# %%
# two read-outs over the same layers
small = TemporalEncoder(16, depth=2, heads=2, max_len=12)
frames = torch.randn(8, 16)
print(small.forward_class(frames).shape, small.forward_prompted(torch.randn(3, 16), frames).shape)

# %%
# a pool of three tasks; every key row is a class text embedding of that task
from pivot_vcil.core import TaskSpec
from pivot_vcil.pivot import PromptPool, init_prompt_set, select_from_pool

dims = Dims(T=8, L=5, D_in=16, D_m=16)
text = F.normalize(torch.randn(6, 16), dim=1)
pool = PromptPool()
for t in range(3):
    ids = (2 * t, 2 * t + 1)
    ps = init_prompt_set(TaskSpec(t + 1, ids, ("a", "b")), dims, text[list(ids)], seed=t)
    ps.freeze()
    pool.append(ps)

# %%
queries = text + 0.2 * torch.randn(6, 16)
print("selected task per query:", select_from_pool(queries, pool).tolist())
