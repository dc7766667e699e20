"""
Directed attention on a toy clip
================================

Cosine attention keeps its sign and is not row-normalized, so a query frame
can point *towards* one frame and *away from* another.  With separate query
and key projections the frame-to-frame matrix is not symmetric; tying the two
projections makes it symmetric again.
"""
import numpy as np

from direcformer import DatasetSpec, DirecFormer, ModelConfig
from direcformer.synth import class_name, generate_clip

np.set_printoptions(precision=2, suppress=True, linewidth=110)

# one DirectedMotion clip: a small bright square sliding across 8 frames
clip = generate_clip(DatasetSpec(), clip_id=3)
print("label:", class_name(clip.label), "| pixels", clip.pixels.shape)

model = DirecFormer(ModelConfig(dtype="float64"), seed=0)
cls_logits, ord_logits, trace = model(clip.pixels[None])
print("class logits", cls_logits.shape, "order logits", ord_logits.shape)

# temporal trace: (batch, heads, sites, T query frames, 1 class key + T frame keys)
a = trace.temporal[0].data[0, 0, 5, :, 1:]
print("\nblock 0, head 0, site 5, frame-to-frame weights (signed):\n", a)
print("max |a - a^T| =", np.abs(a - a.T).max())

# tie the key projection to the query projection
for part in ("ln.gain", "ln.bias", "weight", "bias"):
    model.params[f"blocks.0.time.k.{part}"].data[...] = model.params[f"blocks.0.time.q.{part}"].data
_, _, trace = model(clip.pixels[None])
a = trace.temporal[0].data[0, 0, 5, :, 1:]
print("\nwith tied q/k projections, max |a - a^T| =", np.abs(a - a.T).max())
