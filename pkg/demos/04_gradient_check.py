"""
Checking gradients against finite differences
=============================================

Each backbone, head and protocol is run on small random problems and the
analytic gradient of every parameter, prompt included, is compared with a
central difference.
"""

from prompt_impute import autodiff as ad
from prompt_impute.gradcheck import gradient_suite

# one primitive by hand first
theta = ad.tensor([1], [0.0])
print("d sigmoid / d theta at 0:", ad.finite_difference(lambda: ad.sigmoid(theta).sum(), theta, 1e-3)[0])

for r in gradient_suite(instances=3, seed=0):
    print(f"{r['backbone']:9s} {r['head']:17s} {r['protocol']:4s} max rel error {r['max_rel_error']:.1e}")
