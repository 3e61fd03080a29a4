"""Central finite-difference oracle shared by unit and acceptance tests."""
import numpy as np

from budgetpose.energymodel import EnergyNet

H = 1e-5
FLOOR = 1e-4  # components smaller than this are compared on an absolute 1e-9 scale


def fd_gradient(net: EnergyNet, x, upstream, h=H):
    theta = net.flatten()
    out = np.empty_like(theta)
    for j in range(len(theta)):
        tp, tm = theta.copy(), theta.copy()
        tp[j] += h
        tm[j] -= h
        fp = (net.unflatten(tp).forward(x) * upstream).sum()
        fm = (net.unflatten(tm).forward(x) * upstream).sum()
        out[j] = (fp - fm) / (2 * h)
    return out


def relative_error(a, b, floor=FLOOR):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradcheck_cases(n_cases=100):
    """Worst relative error over ``n_cases`` seeded (net, features, upstream) triples."""
    worst = 0.0
    for c in range(n_cases):
        rng = np.random.default_rng(c)
        net = EnergyNet.initialize(c, scale=float(rng.uniform(0.1, 1.5)))
        x = rng.uniform(-1, 1, (int(rng.integers(1, 4)), 5))
        u = rng.normal(size=(len(x), 2))
        worst = max(worst, float(relative_error(net.backward(x, u), fd_gradient(net, x, u)).max()))
    return worst
