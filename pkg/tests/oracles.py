"""Independent brute-force references shared by the unit and acceptance tests."""

import numpy as np

from spinecade.convnet import ConvNetModel, conv, dropout, fc, maxpool, relu, softmax

FD_EPS = 1e-5
FD_FLOOR = 1e-7  # denominator floor for components whose true gradient is ~0


def tiny_net(seed, keep_prob=0.5):
    """2 conv + 1 FC on 3x8x8 input, every layer kind present, float64."""
    layers = [
        conv(3, 4, 3, padding=1), relu(), maxpool(2),
        conv(4, 5, 3), relu(), dropout(keep_prob),
        fc(0, 2), softmax(),
    ]
    model = ConvNetModel.build(layers, (3, 8, 8), seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1000)
    for w in model.weights:
        if "b" in w:
            w["b"][:] = rng.normal(0, 0.1, w["b"].shape)
    return model


def fd_relative_errors(seed, n=4):
    """Analytic vs. central-difference gradients; returns every component's relative error."""
    model = tiny_net(seed)
    model.training_mode = True
    rng = np.random.default_rng(seed)
    x = rng.random((n, 3, 8, 8))
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1

    def loss():
        model.rng = np.random.default_rng(seed)  # same dropout mask every call
        return model.loss_and_grads(x, y)[0]

    model.rng = np.random.default_rng(seed)
    _, grads = model.loss_and_grads(x, y)
    errs = []
    for w, g in zip(model.weights, grads):
        assert set(w) == set(g)
        for key in w:
            assert g[key].shape == w[key].shape
            flat, gflat = w[key].reshape(-1), g[key].reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + FD_EPS
                up = loss()
                flat[i] = old - FD_EPS
                down = loss()
                flat[i] = old
                num = (up - down) / (2 * FD_EPS)
                errs.append(abs(num - gflat[i]) / max(abs(num) + abs(gflat[i]), FD_FLOOR))
    return np.array(errs)


def mann_whitney_auc(scores, labels):
    """O(n^2) pairwise statistic with half credit for ties."""
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


FROC_RADIUS = 10.0
FROC_DETECTIONS = {
    "A": [((1.0, 0.0, 0.0), 0.9), ((2.0, 0.0, 0.0), 0.8), ((50.0, 0.0, 0.0), 0.6)],
    "B": [((3.0, 0.0, 0.0), 0.7), ((0.0, 30.0, 0.0), 0.4)],
}
FROC_ANNOTATIONS = {
    "A": [(0.0, 0.0, 0.0), (20.0, 0.0, 0.0)],
    "B": [(0.0, 0.0, 0.0)],
}
# worked by hand: greedy matching in descending score, nearest free annotation within 10 mm.
# d1 takes A's origin, d2 finds it taken and (20,0,0) is 18 mm away -> FP, d3 FP,
# d4 takes B's origin, d5 is 30 mm away -> FP.
FROC_TABLE = [  # threshold, sensitivity, fp per patient
    (0.95, 0.0, 0.0),
    (0.85, 1 / 3, 0.0),
    (0.75, 1 / 3, 0.5),
    (0.65, 2 / 3, 0.5),
    (0.5, 2 / 3, 1.0),
    (0.3, 2 / 3, 1.5),
]
