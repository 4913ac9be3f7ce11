"""
Local max pooling and retrieval metrics
=======================================

Descriptors from horizontal bands of a feature map, and CMC / mAP under the
usual junk and same-camera rules.
"""
import numpy as np
import torch

from translearn.evaluation import evaluate
from translearn.features import band_bounds, lmp

torch.manual_seed(0)

##############################################################################
# P bands over H rows; the first bands take the spare rows.

for h, p in [(8, 8), (8, 3), (7, 2)]:
    print(f"H={h} P={p}:", band_bounds(h, p))

##############################################################################
# P=1 average pooling is plain global average pooling; P=8 on a 2048-channel
# map gives a 16384-dim descriptor.

fmap = torch.randn(2, 2048, 8, 4)
print("GAP equal:", torch.equal(lmp(fmap, 1, "avg").vectors, fmap.mean(dim=(2, 3))))
print("P=8 max dim:", lmp(fmap, 8, "max").dim)

##############################################################################
# A hand-sized retrieval problem. The query (person 7, camera 1) sees a junk
# image, its own camera's copy, then the gallery proper: true matches land at
# ranks 1 and 3, so AP = (1/1 + 2/3) / 2 = 5/6.

q = np.array([[0.0]])
g = np.array([[0.5], [0.7], [1.0], [2.0], [3.0], [4.0], [5.0]])
g_pids = [-1, 7, 7, 3, 7, 3, 0]
g_cams = [2, 1, 2, 2, 2, 2, 2]
rep = evaluate([7], [1], q, g_pids, g_cams, g)
print(rep.to_table())
print("AP:", rep.map_score, "expected:", 5 / 6)

##############################################################################
# Multi-query: queries sharing (person, camera) are replaced by their mean.

q = np.array([[0.0], [2.0], [4.0]])
g = np.array([[1.0], [5.0]])
for protocol in ("sq", "mq"):
    r = evaluate([4, 4, 4], [1, 1, 1], q, [4, 0], [2, 2], g, protocol)
    print(protocol, "rank-1:", round(r.rank(1), 3))
