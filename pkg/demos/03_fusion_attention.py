"""
Attending over retrieved visual features
========================================

The fusion layer receives one visual feature row per detected object (plus a
global row) and a text representation. A gated attention net scores each row
against the text, softmax turns scores into weights alpha, and the attended
feature vector r_v is the weighted sum. Heads consume r_v; the text path is
additive, so zeroing the visual head recovers the text-only model exactly.
"""

import numpy as np

import visfuse.autodiff as ad
from visfuse.fusion import FusionParams, attend
from visfuse.synthworld import gen_imagebase

records, featsets = gen_imagebase(seed=5, m=4)
vf = featsets[0]
rows = np.vstack([vf.objects, vf.global_feat[None, :]])
print("caption:", records[0].caption)
print("feature rows:", rows.shape, "(objects + global)")

rng = np.random.default_rng(2)
fusion = FusionParams.create(feat_dim=rows.shape[1], text_dim=8, hidden=6, seed=2)
r_t = ad.constant(rng.normal(size=8))

alpha, r_v = attend(fusion, r_t, rows)
print("alpha:", np.round(alpha.data, 3), " sum:", float(alpha.data.sum()))
print("r_v head:", np.round(r_v.data[:6], 3))

# ---------------------------------------------------------------------------
# alpha is a probability vector and the pooling is permutation-equivariant:
# shuffling the rows shuffles alpha the same way and leaves r_v unchanged.

perm = rng.permutation(rows.shape[0])
alpha_p, r_v_p = attend(fusion, r_t, rows[perm])
print("permuted alpha matches:", np.allclose(alpha_p.data, alpha.data[perm]))
print("r_v invariant under row order:", np.allclose(r_v_p.data, r_v.data))

# ---------------------------------------------------------------------------
# More feature rows never lower the best attainable attention weight mass on
# the true object; retrieval decides WHICH image's rows arrive here.

small = rows[:2]
alpha_s, _ = attend(fusion, r_t, small)
print("2-row alpha:", np.round(alpha_s.data, 3))
