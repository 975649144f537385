"""Matplotlib figures rendered from result rows (PNG files, Agg backend)."""

from __future__ import annotations

import re
from collections import defaultdict
from pathlib import Path


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _series(rows, pred, key):
    """{estimator: sorted [(key(row), value, se)]} for rows passing `pred`."""
    out = defaultdict(list)
    for r in rows:
        if r.value is not None and pred(r):
            out[r.estimator].append((key(r), r.value, r.se))
    return {k: sorted(v) for k, v in out.items()}


def _draw(ax, series, label=None, band=True, **kw):
    xs = [a for a, _, _ in series]
    ys = [b for _, b, _ in series]
    (line,) = ax.plot(xs, ys, label=label, **kw)
    ses = [c for _, _, c in series]
    if band and all(s is not None and s == s for s in ses):
        lo = [y - 2 * s for y, s in zip(ys, ses)]
        hi = [y + 2 * s for y, s in zip(ys, ses)]
        ax.fill_between(xs, lo, hi, color=line.get_color(), alpha=0.2, linewidth=0)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    _plt().close(fig)
    return path


def _bounds_vs_d(rows, title, path):
    plt = _plt()
    finals = {}
    for r in rows:
        if r.value is None or r.estimator.startswith(("sinkhorn_iter", "sinkhorn_conv", "skipped")):
            continue
        if r.estimator.startswith("cub") and r.t is not None:
            # keep the row at the largest horizon for each d
            k = (r.estimator, r.d)
            if k in finals and finals[k].t >= r.t:
                continue
        finals[(r.estimator, r.d)] = r
    series = defaultdict(list)
    for (est, d), r in finals.items():
        series[est].append((d, r.value, r.se))
    fig, ax = plt.subplots(figsize=(6, 4))
    for est in sorted(series):
        if est.startswith(("lower_marginal", "lower_gelbrich")):
            continue
        _draw(ax, sorted(series[est]), est, marker="o")
    ax.set_xlabel("dimension d")
    ax.set_ylabel("W2 bound")
    ax.set_title(title)
    ax.legend(fontsize=7)
    return _save(fig, path)


def _cub_vs_t(rows, path):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 4))
    dims = sorted({r.d for r in rows})
    for d in dims:
        s = _series(rows, lambda r: r.d == d and r.estimator.startswith("cub") and r.t is not None,
                    lambda r: r.t)
        for est, pts in s.items():
            _draw(ax, pts, f"{est} d={d}")
        truth = [r.value for r in rows if r.d == d and r.estimator == "truth"]
        if truth:
            ax.axhline(truth[0], ls=":", color="k", lw=0.8)
    ax.set_xlabel("horizon T")
    ax.set_ylabel("CUB")
    ax.legend(fontsize=7)
    return _save(fig, path)


def _bimodal(rows, outdir):
    plt = _plt()
    paths = []
    fig, ax = plt.subplots(figsize=(6, 4))
    a = _series(rows, lambda r: r.estimator.startswith(("A_single", "A_mean")), lambda r: r.t)
    for est, pts in sorted(a.items()):
        single = est.startswith("A_single")
        _draw(ax, pts, est, band=not single, lw=0.6 if single else 1.2, ls=":" if single else "-")
    ax.set_xlabel("t")
    ax.set_ylabel("instantaneous bound")
    ax.legend(fontsize=7)
    paths.append(_save(fig, outdir / "bimodal_traces.png"))

    fig, ax = plt.subplots(figsize=(6, 4))
    for est, pts in _series(rows, lambda r: r.estimator == "A_cub1_single_chain", lambda r: r.t).items():
        _draw(ax, pts, est, marker="o")
    ax.set_xscale("log")
    ax.set_xlabel("horizon T")
    ax.set_ylabel("CUB1, one chain")
    paths.append(_save(fig, outdir / "bimodal_single_chain.png"))

    fig, ax = plt.subplots(figsize=(6, 4))
    for est, pts in sorted(_series(rows, lambda r: r.estimator.startswith("B_mean"), lambda r: r.t).items()):
        _draw(ax, pts, est)
    ax.set_xlabel("t")
    ax.set_ylabel("averaged bound")
    ax.legend(fontsize=7)
    paths.append(_save(fig, outdir / "bimodal_coupling_choice.png"))
    return paths


def _lam(est):
    m = re.search(r"lambda=([0-9.eE+-]+)", est)
    return float(m.group(1)) if m else None


def _ot(rows, outdir):
    plt = _plt()
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    cost = sorted((_lam(r.estimator), r.value) for r in rows if r.estimator.startswith("sinkhorn_w"))
    iters = sorted((_lam(r.estimator), r.value) for r in rows if r.estimator.startswith("sinkhorn_iter"))
    ax1.plot([c[0] for c in cost], [c[1] for c in cost], "o-", label="sinkhorn")
    for r in rows:
        if r.estimator in ("truth",) or r.estimator.startswith(("exact", "cub")):
            ax1.axhline(r.value, ls="--", lw=0.8, label=r.estimator, color=None)
    ax1.set_xscale("log")
    ax1.set_xlabel("lambda / median cost")
    ax1.set_ylabel("W2")
    ax1.legend(fontsize=7)
    ax2.plot([c[0] for c in iters], [c[1] for c in iters], "o-")
    ax2.set_xscale("log")
    ax2.set_yscale("log")
    ax2.set_xlabel("lambda / median cost")
    ax2.set_ylabel("iterations")
    return [_save(fig, outdir / "ot_compare.png")]


def _logistic(rows, outdir):
    plt = _plt()
    ups = [r for r in rows if r.estimator.startswith("cub") and r.value is not None]
    labels = [r.estimator.split("_", 1)[1] for r in ups]
    lows = {r.estimator.split("_", 2)[2]: r.value for r in rows if r.estimator.startswith("lower_combined")}
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = range(len(ups))
    ax.errorbar(xs, [r.value for r in ups], yerr=[2 * (r.se or 0) for r in ups], fmt="o", label="upper (CUB2)")
    ax.plot(xs, [lows.get(lab, float("nan")) for lab in labels], "v", label="lower")
    ax.set_xticks(list(xs), labels)
    ax.set_yscale("log")
    ax.set_ylabel("W2 bias against MALA")
    ax.legend(fontsize=7)
    return [_save(fig, outdir / "logistic_bounds.png")]


def render(experiment: str, rows, outdir) -> list:
    """Write the figures for one experiment's rows; returns the file paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = list(rows)
    if experiment in ("gaussian-ar1", "coupling-compare"):
        return [_bounds_vs_d(rows, experiment, outdir / f"{experiment}_bounds.png"),
                _cub_vs_t(rows, outdir / f"{experiment}_cub_vs_T.png")]
    if experiment == "ula-bias":
        return [_bounds_vs_d(rows, experiment, outdir / "ula_bias_bounds.png")]
    if experiment == "bimodal":
        return _bimodal(rows, outdir)
    if experiment == "ot-compare":
        return _ot(rows, outdir)
    if experiment == "logistic":
        return _logistic(rows, outdir)
    return []
