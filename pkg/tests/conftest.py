import numpy as np

from lagix.exposure import interpolate
from lagix.model import CovariateTerm, ModelData, ModelSpec


def make_data(rng, n_per_group=70, n_groups=2, M=3, start=-25, signal=False,
              theta=8.0):
    """Synthetic grouped count data with smooth, autocorrelated exposures."""
    processes = {}
    rows_t, rows_g = [], []
    for g in range(n_groups):
        t_grid = np.arange(start, n_per_group + 5)
        procs = {}
        for m in range(M):
            base = (3.0 + 0.8 * np.sin((t_grid + 17 * g) / (7.0 + 3 * m))
                    + 0.4 * np.cos(t_grid / (3.0 + m)))
            procs[f"x{m}"] = interpolate(
                t_grid, base + 0.3 * rng.normal(size=t_grid.size),
                group=g, name=f"x{m}")
        processes[g] = procs
        rows_t.append(np.arange(0, n_per_group, dtype=float))
        rows_g.append(np.full(n_per_group, g))
    times = np.concatenate(rows_t)
    groups = np.concatenate(rows_g)
    n = times.size
    if signal:
        eta = 1.6 + 0.3 * np.sin(times / 18.0)
        mu = np.exp(eta)
        y = rng.poisson(rng.gamma(shape=theta, scale=mu / theta))
    else:
        y = rng.poisson(5.0, size=n)
    covariates = {"time": times.copy(), "temp": rng.normal(size=n)}
    offset = 0.05 * rng.normal(size=n)
    return ModelData(y=y, times=times, processes=processes,
                     covariates=covariates, groups=groups, offset=offset)


FULL_TERMS = (CovariateTerm("time", "smooth", dimension=6),
              CovariateTerm("temp", "linear"),
              CovariateTerm("g", "random_intercept"))

SMOOTH_ONLY = (CovariateTerm("time", "smooth", dimension=6),)


def make_spec(structure, M=3, terms=FULL_TERMS, **kw):
    defaults = dict(L=15.0, d_w=5, d_f=7, d_psi_x=5, d_psi_l=4)
    defaults.update(kw)
    return ModelSpec(structure=structure, M=M, terms=terms, **defaults)


def synth_fit_inputs(structure, seed, n_per_group=70, M=2, theta=8.0):
    """Data drawn from the stated structure with a pronounced exposure
    effect, plus the matching spec; suitable for end-to-end fits."""
    from lagix.model import build_workspace

    rng = np.random.default_rng(seed)
    data = make_data(rng, n_per_group=n_per_group, M=M)
    spec = make_spec(structure, M=M, terms=SMOOTH_ONLY, d_w=4, d_f=6,
                     d_psi_x=4, d_psi_l=4)
    ws = build_workspace(spec, data)
    phi_true = 0.25 * rng.normal(size=ws.layout.n_phi)
    gamma_true = 0.08 * rng.normal(size=ws.layout.n_gamma)
    gamma_true[0] = np.log(6.0)
    # a pronounced exposure effect keeps the index parameters identified
    for label in ("f[0]", "f[1]", "psi[0]", "psi[1]"):
        try:
            sl = ws.layout.gamma_slice(label)
        except (KeyError, StopIteration):
            continue
        gamma_true[sl] = 0.5 * rng.normal(size=sl.stop - sl.start)
    eta = ws.linear_predictor(phi_true, gamma_true)
    eta = np.clip(eta, -20.0, 8.0)
    eta = 1.8 + (eta - eta.mean())
    mu = np.exp(eta)
    y = data.y.copy()
    y[ws.kept_rows] = rng.poisson(rng.gamma(theta, mu / theta))
    data.y[:] = y
    return spec, data
