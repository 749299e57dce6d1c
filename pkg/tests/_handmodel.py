"""A one-weight-per-part model whose training step can be written out by hand."""

import math
from types import SimpleNamespace

from fairvit import autodiff as ad
from fairvit import layers as L
from fairvit.autodiff import Tensor
from fairvit.model import FeatureBundle, ParameterSet


class ScalarModel:
    """f = a*x, y_hat = p*f, adversary logits = f * q (q has one weight per class)."""

    def __init__(self, a, p, q):
        self.cfg = SimpleNamespace(has_adversary=True, n_attr_classes=2)
        self.params = ParameterSet(
            {"a": Tensor([a], requires_grad=True)},
            {"p": Tensor([p], requires_grad=True)},
            {"q": Tensor([q], requires_grad=True)},
        )

    def extract_features(self, x, training=False):
        flat = ad.reshape(x, (x.shape[0], 1))
        return FeatureBundle(f=ad.mul(flat, self.params["a"]))

    def predict_score(self, f, training=False, rng=None):
        return ad.reshape(ad.mul(f, self.params["p"]), (f.shape[0],))

    def adversary_logits(self, f, training=False, rng=None, lam=0.5):
        return self.adversary_logits_plain(L.grl(f, lam))

    def adversary_logits_plain(self, f, training=False, rng=None):
        return ad.matmul(f, self.params["q"])


def hand_sgd_step(a, p, q, x, y, z, lam, lr):
    """Gradients of the two losses written out with scalars and loops."""
    n = len(x)
    dp = da_pred = 0.0
    for xi, yi in zip(x, y):
        r = yi - p * a * xi
        dp += -2 * r * a * xi / n
        da_pred += -2 * r * p * xi / n
    dq = [0.0, 0.0]
    da_adv = 0.0
    for xi, zi in zip(x, z):
        f = a * xi
        logits = [f * q[0], f * q[1]]
        m = max(logits)
        e = [math.exp(v - m) for v in logits]
        s = [v / sum(e) for v in e]
        for c in range(2):
            d = (s[c] - (1.0 if c == zi else 0.0)) / n
            dq[c] += d * f
            da_adv += d * q[c] * xi
    return (a - lr * (da_pred - lam * da_adv), p - lr * dp, [q[0] - lr * dq[0], q[1] - lr * dq[1]])
