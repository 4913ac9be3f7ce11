"""
Losses and contrastive pairs
============================

The translator objectives are sums of small pieces. Here each piece is
evaluated on a handful of random images with small, untrained networks.
"""
import math

import torch

from translearn import losses
from translearn.losses import LossWeights
from translearn.networks import build_bundle
from translearn.pairs import build_pairs

torch.manual_seed(0)

##############################################################################
# Contrastive loss on unit-norm embeddings. Positive pairs pay the squared
# distance; negative pairs pay only when closer than the margin m (at most 2,
# the largest distance two unit vectors can have).

e = torch.tensor([0.6, 0.8])
print("positive, same point    :", float(losses.contrastive_loss(1, e, e, 2.0)))
print("negative, same point    :", float(losses.contrastive_loss(0, e, e, 2.0)))
print("negative, antipodal     :", float(losses.contrastive_loss(0, e, -e, 2.0)))
print("negative, m=1, d=sqrt(2):", float(losses.contrastive_loss(0, e, torch.tensor([0.8, -0.6]), 1.0)))

##############################################################################
# Cross-entropy with uniform logits is log K.

K = 10
print("uniform CE:", float(losses.cross_entropy(torch.zeros(3, K), torch.tensor([0, 4, 9]))), "log K:", math.log(K))

##############################################################################
# A small bundle at 64x32 (the smallest size the SiaNet accepts).

b = build_bundle((64, 32), num_classes=10, ngf=8, n_res_blocks=1, ndf=8, disc_layers=2,
                 residual_output=True, identity_init=True)
x_s = torch.rand(2, 3, 64, 32) * 2 - 1
x_t = torch.rand(2, 3, 64, 32) * 2 - 1

##############################################################################
# With identity-initialised generators, cycle and identity losses vanish.

with torch.no_grad():
    print("cycle:", float(losses.cycle_loss(b.G, b.F, x_s, x_t)),
          "identity:", float(losses.identity_loss(b.G, b.F, x_s, x_t)))

##############################################################################
# Pairs need no labels: (x_s, G(x_s)) and (x_t, F(x_t)) are positives,
# (G(x_s), x_t) and (F(x_t), x_s) negatives.

with torch.no_grad():
    pairs = build_pairs(x_s, x_t, b.G, b.F)
    for p in pairs:
        print(f"{p.kind.value:8s} label={p.label_i} origins={[o.value for o in p.origins]}")
    print("contrastive term:", float(losses.contrastive_term(b.M, pairs, 2.0)))

##############################################################################
# The three composite objectives share the CycleGAN terms.

labels = torch.tensor([1, 7])
w = LossWeights()
with torch.no_grad():
    for name, (rec, _) in [("cyclegan", losses.cyclegan_objective(b, x_s, x_t, w)),
                           ("spgan", losses.spgan_objective(b, x_s, x_t, w)),
                           ("espgan", losses.espgan_objective(b, x_s, labels, x_t, w))]:
        print(f"{name:8s}", {k: round(v, 4) for k, v in rec.values().items()})
