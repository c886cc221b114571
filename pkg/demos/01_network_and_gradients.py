"""Build the feature extractor, run it, and verify its gradients.

The network is three conv blocks (conv -> batch norm -> ReLU), a global
average pool over time, a hidden dense layer, and a dense+softmax classifier.
Everything is plain numpy; gradients are hand-derived reverse mode, checked
here against central finite differences.
"""
import numpy as np

from efdls import extractor, fbst, nncore

rng = np.random.default_rng(0)

# A full-width instance: kernel/channel sizes (9,128), (5,256), (3,128).
model = extractor.FeatureExtractor(num_classes=3, seed=1)
x = rng.standard_normal((4, 1, 60))  # batch of 4 univariate series, length 60

trace = model.forward(x, training=True)
print("block outputs:", trace.o1.shape, trace.o2.shape, trace.o3.shape)
print("hidden dense output:", trace.o4.shape)
print("class probabilities (each row sums to 1):")
print(np.round(trace.probs, 4))

# Hidden-layer weight shapes never depend on the series length or the number
# of classes, which is what makes cross-user weight matching possible.
bundle = extractor.extract_hidden_weights(model)
print(f"\nhidden-layer bundle: {len(bundle.arrays)} arrays, "
      f"{bundle.num_learnable_params()} learnable parameters")

# Gradient check on a skinny instance (exhaustive finite differences over
# every parameter would be slow at full width).
small = extractor.FeatureExtractor(num_classes=3, blocks=((3, 5), (5, 6), (3, 4)),
                                   hidden_dim=5, seed=2)
xs = rng.standard_normal((3, 1, 17))
labels = rng.integers(0, 3, size=3)
err = nncore.finite_diff_gradcheck(small, xs, fbst.SupervisedLoss(labels), epsilon=1e-5)
print(f"\ngradient check vs central differences: max relative error {err:.2e}")
assert err < 1e-4
