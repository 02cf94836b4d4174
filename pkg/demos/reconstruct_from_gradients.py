"""
Reconstructing a training image from one shared gradient
========================================================

A client computes the gradient of a small fully connected classifier on a
single 8x8 image and sends it to the server. The server knows the model
and recovers the image by optimising a dummy input until its gradient
matches the shared one.
"""
import numpy as np

from gradleak import attacks, nn, updates
from gradleak.data import synth_dataset


def show(img, title):
    ramp = " .:-=+*#%@"
    print(title)
    for row in np.clip(img[0], 0, 1):
        print("  " + "".join(ramp[int(v * (len(ramp) - 1))] * 2 for v in row))


spec = nn.named_model("fc2", (1, 8, 8))
params = nn.init_params(spec, seed=0)
data = synth_dataset(16, 8, 8, seed=1)
x, y = data.images[3], int(data.labels[3])

###############################################################################
# The shared update: batch-mean gradient of one sample (FedSGD).
shared = updates.fed_sgd_update(spec, params, [(x, y)])

# For a single sample the output-bias gradient is softmax - onehot,
# so the label can be read off directly.
print("inferred label", attacks.infer_label(shared), "true label", y)

###############################################################################
# Gradient matching with Adam from a few random starts.
config = attacks.DraConfig(layer_subset=(0, 2), dist_kind="L2", steps=300, restarts=3, seed=0)
runs = attacks.run_dra(spec, params, shared, config, truth=(x, y))
for r in runs:
    print(f"restart {r.restart}: distance {r.trace[0]:.3g} -> {r.final_distance:.3g}, SSIM {r.ssim:.3f}")

best = max(runs, key=lambda r: r.ssim)
show(x, "original")
show(best.x_hat, "reconstruction")
