"""
=========================================
Scoring a saliency map without a network
=========================================

Coherence (RMA, RRA) and incremental deletion (MoRF/LeRF curves, DS)
only need a saliency map, a mask and a black-box probability function.
This walkthrough uses a hand-made image and a stub classifier so every
number can be checked by eye.
"""

# %%
# A toy image and its mask
# ------------------------
#
# A 32x32 grey image with a bright square. The stub model's "lesion
# probability" is the mean intensity inside that square, so occluding the
# square is what hurts it.

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from fusionscope.xaimetrics import coherence, gaussian_blur, image_degradation, occlusion_counts

image = np.full((1, 32, 32), 0.2)
image[0, 10:18, 12:20] = 0.9
mask = np.zeros((32, 32), bool)
mask[10:18, 12:20] = True


def stub_model(batch):
    p = batch[:, 0, 10:18, 12:20].mean(axis=(1, 2))
    return np.stack([1 - p, p], axis=1)


# %%
# Two candidate explanations
# --------------------------
#
# ``good`` peaks on the square; ``diffuse`` is a smooth blob off to the side.

yy, xx = np.mgrid[0:32, 0:32]
good = np.exp(-((yy - 14) ** 2 + (xx - 16) ** 2) / 20.0)
diffuse = np.exp(-((yy - 24) ** 2 + (xx - 6) ** 2) / 80.0)

for name, sal in [("good", good), ("diffuse", diffuse)]:
    score = coherence(sal, mask)
    print(f"{name:8s} RMA {score.rma:.3f}  RRA {score.rra:.3f}")

# %%
# Deletion curves
# ---------------
#
# Pixels are replaced by a once-computed Gaussian blur of the image, 10% of
# the ranking per step. MoRF removes the most relevant pixels first, LeRF
# the least relevant. DS is the mean gap LeRF - MoRF.

print("pixels occluded per step:", occlusion_counts(32 * 32, 10))

fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
axes[0].imshow(gaussian_blur(image)[0], cmap="gray", vmin=0, vmax=1)
axes[0].set_title("fully blurred copy")
for ax, (name, sal) in zip(axes[1:], [("good", good), ("diffuse", diffuse)]):
    res = image_degradation(stub_model, image, sal, class_id=1, tie_policy="STABLE")
    steps = np.arange(1, 11) / 10
    ax.plot(steps, res.morf.values, "o-", label="MoRF")
    ax.plot(steps, res.lerf.values, "s-", label="LeRF")
    ax.set_title(f"{name}: DS = {res.ds:.3f}")
    ax.set_xlabel("fraction occluded")
    ax.legend()
fig.tight_layout()
fig.savefig("xai_metrics_curves.png", dpi=100)
print("saved xai_metrics_curves.png")
