"""Measured dynamical constants, frozen for the default table.

Estimates that downstream checks treat as fixed inputs (expansion rate,
transversality angles, the projection constant, oscillation-norm
prefactors) are measured once by `measure_*` helpers and written to the
packaged calibration file.  `load_calibration` returns that frozen
snapshot; the calibrate CLI subcommand regenerates it for other tables.
"""

import json
import math

from . import front


def load_calibration():
    import importlib.resources as res

    with res.files("billiardlab").joinpath("config/default_calibration.json").open() as fh:
        return json.load(fh)


def measure_hyperbolicity_block(table, samples=400, horizon=4.0, seed=0):
    """Expansion-law and angle constants from wavefront transport chains.

    lambda is the fitted per-unit-time expansion factor; the
    per-collision factor is recovered from the mean time per collision
    of the same fit.  C_pi = 10 / sin(c_tr) converts central-stable
    sliding distances to curve distances with room to spare.
    """
    est = front.estimate_hyperbolicity(table, samples=samples, horizon=horizon, rng_seed=seed)
    notes = est.notes
    tau_fit = notes["mean_fit_time"] / notes["fit_collisions"]
    lam_col = est.lam ** tau_fit
    hyp = {
        "lambda": est.lam,
        "lambda_per_collision": lam_col,
        "c_hyp": est.c_hyp,
        "c_tr": est.c_tr,
        "c_al": est.c_al,
        "r_squared": notes["r_squared"],
        "fit_collisions": notes["fit_collisions"],
        "mean_fit_time": notes["mean_fit_time"],
        "samples": samples,
        "horizon": horizon,
        "seed": seed,
    }
    proj = {"C_pi": 10.0 / math.sin(est.c_tr), "rule": "10/sin(c_tr)"}
    return hyp, proj


def measure_holonomy_block(table, eps=1e-5, n_s=16, margin=1.5,
                           noise_floor=3e-7, mass_seed=11):
    """Holonomy-regularity and product-structure constants for one tube.

    Builds the default tube at radius `eps`, tabulates the holonomies,
    and measures: the Jacobian bound C_h with the dynamical-Hoelder pair
    (C_h, Theta_h) fitted on node pairs and a sub-grid distance ladder;
    the factor-density ratio beta / eps^2 and its two-sided bound
    C_beta; the tube leakage in eps^3 units; and the mass defect of the
    extended density in eps * sup(phi) units.  Differences below
    `noise_floor` sit under the finite-difference quantization and are
    left out of the decay fit.  Every frozen constant carries `margin`.
    """
    import itertools

    import numpy as np

    from . import curves as cv
    from . import holonomy as hol

    params = {"Gamma_max": 1.6, "L_max": 1.0 / 160.0, "eps0": 1.0 / 16.0}
    pair = cv.default_standard_pair(table, params=params)
    chart = hol.build_tube(pair, eps=eps)
    ht = hol.build_holonomy_table(chart, n_s=n_s)
    rows = [i for i in range(n_s) if ht.in_H[i]]
    if not ht.H_intervals:
        raise RuntimeError("no product interval; tube unusable for calibration")
    a0, b0 = ht.H_intervals[0]

    jh_max = max(max(ht.jh[i, j], 1.0 / ht.jh[i, j])
                 for i in rows for j in range(len(ht.stencil)))

    # decay of Jacobian differences: grid pairs plus a sub-grid ladder
    sams = []
    for a, b in itertools.combinations(rows, 2):
        sp = cv.separation_time(chart.curve, float(ht.s_grid[a]),
                                float(ht.s_grid[b]))
        if not math.isfinite(sp):
            continue
        for j in range(1, len(ht.stencil)):
            d = abs(ht.jh[a, j] - ht.jh[b, j])
            if d > noise_floor:
                sams.append((sp, d))
    ell = chart.curve.length
    z = (0.0, -eps)
    bases = [a0 + f * (b0 - a0) for f in (0.2, 0.35, 0.55, 0.7)]
    deltas = [ell / 400.0, ell / 120.0, ell / 40.0, ell / 12.0, ell / 4.0]
    for s in bases:
        j0 = hol.holonomy_jacobian(chart, s, z)
        for d in deltas:
            j1 = hol.holonomy_jacobian(chart, s + d, z)
            sp = cv.separation_time(chart.curve, s, s + d)
            dj = abs(j1 - j0)
            if math.isfinite(sp) and dj > noise_floor:
                sams.append((sp, dj))
    xs = np.array([s[0] for s in sams], dtype=float)
    ys = np.log([s[1] for s in sams])
    slope, _icept = np.polyfit(xs, ys, 1)
    theta_h = math.exp(min(slope, -1e-3))
    cover = max(d / theta_h**sp for sp, d in sams)
    c_h = margin * max(jh_max, cover)

    beta_ratios = [hol.beta_formula(chart, ht, a0 + f * (b0 - a0)) / eps**2
                   for f in (0.25, 0.5, 0.75)]
    c_beta = margin * max(max(beta_ratios), 1.0 / min(beta_ratios))

    leak_ratio = hol.tube_leakage(chart, ht) / eps**3

    G = hol.build_G(chart, ht, pair)
    mass, mass_err = hol.density_mass(G, rng=mass_seed)
    ss = np.linspace(0.0, ell, 2001)
    sup_phi = float(np.max(pair.density_at(ss)))
    defect_ratio = abs(mass - 1.0) / (eps * sup_phi)

    return {
        "eps": eps,
        "n_s": n_s,
        "margin": margin,
        "noise_floor": noise_floor,
        "pair_params": params,
        "jh_max": jh_max,
        "C_h": c_h,
        "Theta_h": theta_h,
        "decay_samples": len(sams),
        "beta_over_eps2": sum(beta_ratios) / len(beta_ratios),
        "C_beta": c_beta,
        "leak_over_eps3": leak_ratio,
        "C_leak": margin * leak_ratio,
        "mass_defect": abs(mass - 1.0),
        "mass_stderr": mass_err,
        "sup_phi": sup_phi,
        "C_mass": margin * defect_ratio,
        "mass_seed": mass_seed,
    }


def write_calibration(path, blocks):
    with open(path, "w") as fh:
        json.dump(blocks, fh, indent=1, sort_keys=True)
        fh.write("\n")
