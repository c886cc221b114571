"""Server-side weight matching: who is whose partner?

The server collects every connected user's hidden-layer bundle, computes all
pairwise squared distances over learnable parameters, and gives each user the
bundle of its nearest other user (ties to the lowest index). Users with
similar weights, i.e. similar expertise, end up teaching each other.
"""
import numpy as np

from efdls import dbwm, extractor

rng = np.random.default_rng(7)

# Five users: three initialized near each other, two elsewhere.
def make_bundle(base_seed, nudge):
    model = extractor.FeatureExtractor(num_classes=2, blocks=((3, 4), (3, 6), (3, 4)),
                                       hidden_dim=4, seed=base_seed)
    bundle = extractor.extract_hidden_weights(model)
    for _, arr in bundle.learnable_items():
        arr += nudge * rng.standard_normal(arr.shape)
    return bundle

bundles = [make_bundle(0, 0.01), make_bundle(0, 0.01), make_bundle(0, 0.015),
           make_bundle(99, 0.01), make_bundle(99, 0.012)]
table = dbwm.WeightTable(entries=list(enumerate(bundles)), epoch=1)

d = dbwm.pairwise_distances(table)
print("pairwise squared distances (diagonal undefined):")
print(np.array2string(d.values, precision=2))

assignment = dbwm.match_partners(d)
print("\npartners:", {i: assignment.ids[i] for i in range(5)})
# the first three users pair among themselves, the last two with each other

dispatched = dbwm.dispatch_matched(table, assignment)
uid, received = dispatched[0]
print(f"\nuser {uid} receives a copy of user {assignment.ids[0]}'s bundle "
      f"({received.num_learnable_params()} learnable parameters)")

# Copies are independent: mutating what a user received leaves the table alone.
received.arrays["dense.bias"][:] = 1e9
print("table untouched by mutation:",
      not np.array_equal(bundles[assignment.ids[0]].arrays["dense.bias"],
                         received.arrays["dense.bias"]))
