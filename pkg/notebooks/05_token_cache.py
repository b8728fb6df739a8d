"""
Token cache
===========

Frames go through the frozen input layer once; later runs read the tokens
back and check them against the encoder digest.
"""

# %%
import tempfile
from pathlib import Path

from pivot_vcil import SyntheticEncoderSuite
from pivot_vcil.encoders import SyntheticSpatialEncoder, StaleCacheError, build_cache, load_cache

suite = SyntheticEncoderSuite(4, L=5, D_in=16, D_m=16, T=4, seed=0)
videos = suite.make_split(range(4), 3, "train", cached=False)
print("raw frames:", videos[0].frames.shape)

# %%
root = Path(tempfile.mkdtemp())
info = build_cache(videos, root, suite.spatial)
print(info["header"]["count"], "videos,", (root / "tokens.bin").stat().st_size, "bytes")
back = load_cache(root, suite.spatial)
print("cached tokens:", back[0].cached_tokens.shape)

# %%
try:
    load_cache(root, SyntheticSpatialEncoder(suite.profile, seed=1))
except StaleCacheError as e:
    print("refused:", e)
