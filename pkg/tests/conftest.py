import numpy as np
import pytest

from fedrbn.nn import Model, build_mlp, clone_model, loss_and_grad


def randomized_model(rng, dim=5, hidden=(6, 4), classes=3):
    """MLP with non-degenerate biases and running stats so finite
    differences never straddle a relu kink or a zero activation."""
    m = build_mlp(dim, list(hidden), classes, rng)
    for key in m.params:
        if key.endswith(".b"):
            m.params[key] = rng.normal(0.0, 0.3, size=m.params[key].shape)
    for st in m.dbn_states.values():
        st.clean_mean = rng.normal(0.0, 0.3, size=st.channels)
        st.clean_var = rng.uniform(0.5, 1.5, size=st.channels)
        st.noise_mean = rng.normal(0.0, 0.3, size=st.channels)
        st.noise_var = rng.uniform(0.5, 1.5, size=st.channels)
        st.weight = rng.uniform(0.5, 1.5, size=st.channels)
        st.bias = rng.normal(0.0, 0.3, size=st.channels)
    return m


def get_param(model: Model, key: str):
    if key in model.params:
        return model.params[key]
    name, _, attr = key.rpartition(".")
    st = model.dbn_states[name]
    return st.weight if attr == "w" else st.bias


def finite_diff_check(model, x, y_oh, step=1e-5):
    """Max relative error between analytic grads and central differences
    over all trainable parameters and the input."""
    base = clone_model(model)
    _, grads, gx = loss_and_grad(clone_model(base), x, y_oh)

    def loss_of(m):
        l, _, _ = loss_and_grad(m, x, y_oh)
        return l

    max_rel = 0.0
    for key, g in grads.items():
        flat = g.ravel()
        for idx in range(flat.size):
            ij = np.unravel_index(idx, g.shape)
            mp = clone_model(base)
            get_param(mp, key)[ij] += step
            lp = loss_of(mp)
            mm = clone_model(base)
            get_param(mm, key)[ij] -= step
            lm = loss_of(mm)
            fd = (lp - lm) / (2 * step)
            rel = abs(fd - flat[idx]) / max(1e-6, abs(fd), abs(flat[idx]))
            max_rel = max(max_rel, rel)
    for idx in range(x.size):
        ij = np.unravel_index(idx, x.shape)
        xp = x.copy()
        xp[ij] += step
        lp, _, _ = loss_and_grad(clone_model(base), xp, y_oh)
        xm = x.copy()
        xm[ij] -= step
        lm, _, _ = loss_and_grad(clone_model(base), xm, y_oh)
        fd = (lp - lm) / (2 * step)
        rel = abs(fd - gx[ij]) / max(1e-6, abs(fd), abs(gx[ij]))
        max_rel = max(max_rel, rel)
    return max_rel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
